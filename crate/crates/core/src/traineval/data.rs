//! Sessions, prompt tables and fixed-length training windows.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vapp_numcore::Tensor;

use crate::audio::read_wav;
use crate::codebook::{label_window, vad_label, BinConfig};
use crate::dialoguesim::{load_meta, Manifest, Session};
use crate::error::{Result, VapError};
use crate::model::encoder::HOP;
use crate::model::{Filterbank, FrameLabels, ModelConfig};
use crate::promptgen::load_embeddings;
use crate::promptgen::record::SPEAKERS;
use crate::va::VaStream;

/// Prompt vectors keyed by [`prompt_key`].
pub type EmbeddingTable = BTreeMap<String, Vec<f32>>;

pub fn prompt_key(session_id: &str, channel: usize) -> String {
    format!("{session_id}/{}", SPEAKERS[channel])
}

pub fn load_embedding_table(path: &Path) -> Result<EmbeddingTable> {
    Ok(load_embeddings(path)?.into_iter().collect())
}

/// A session held in memory.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub id: String,
    /// Style name per channel.
    pub styles: [String; 2],
    pub va: VaStream,
    pub audio: [Vec<f32>; 2],
}

impl From<Session> for SessionData {
    fn from(s: Session) -> Self {
        Self {
            id: s.id,
            styles: [s.styles[0].name.clone(), s.styles[1].name.clone()],
            va: s.va,
            audio: s.audio,
        }
    }
}

pub fn load_session(root: &Path, id: &str) -> Result<SessionData> {
    let dir = Manifest::session_dir(root, id);
    let meta = load_meta(&dir)?;
    let va = VaStream::load(&dir.join("va.json"))?;
    let wav = dir.join("audio.wav");
    let mut channels = read_wav(&wav)?;
    if channels.len() != 2 {
        return Err(VapError::Dataset(format!(
            "{}: {} channels, sessions are stereo",
            wav.display(),
            channels.len()
        )));
    }
    let b = channels.pop().expect("two channels");
    let a = channels.pop().expect("two channels");
    Ok(SessionData {
        id: id.to_string(),
        styles: [meta.styles[0].name.clone(), meta.styles[1].name.clone()],
        va,
        audio: [a, b],
    })
}

pub fn load_sessions(root: &Path, ids: &[String]) -> Result<Vec<SessionData>> {
    ids.iter().map(|id| load_session(root, id)).collect()
}

fn session_prompts(session: &SessionData, table: &EmbeddingTable) -> Result<[Vec<f32>; 2]> {
    let get = |ch: usize| {
        let key = prompt_key(&session.id, ch);
        table
            .get(&key)
            .cloned()
            .ok_or_else(|| VapError::Dataset(format!("no prompt embedding for {key}")))
    };
    Ok([get(0)?, get(1)?])
}

/// One training window: encoder features of both channels, their prompt
/// vectors and per-frame targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub session: String,
    pub start_frame: usize,
    pub features: [Tensor<f32>; 2],
    pub prompts: [Vec<f32>; 2],
    pub labels: FrameLabels,
}

/// Cuts `session` into disjoint windows of `cfg.window_s`. The last
/// horizon of each window has no VAP label.
pub fn make_examples(
    session: &SessionData,
    table: &EmbeddingTable,
    filterbank: &Filterbank,
    cfg: &ModelConfig,
) -> Result<Vec<Example>> {
    if session.va.frame_rate() != cfg.frame_rate {
        return Err(VapError::Config(format!(
            "session {} is labelled at {} Hz, model runs at {} Hz",
            session.id,
            session.va.frame_rate(),
            cfg.frame_rate
        )));
    }
    let prompts = session_prompts(session, table)?;
    let frames = cfg.window_frames();
    let samples = frames * HOP;
    let n_windows = session.audio[0].len().min(session.audio[1].len()) / samples;
    let n_windows = n_windows.min(session.va.n_frames() / frames);
    if n_windows == 0 {
        return Err(VapError::Window(format!(
            "session {} is shorter than one {} s window",
            session.id, cfg.window_s
        )));
    }
    let bins = BinConfig {
        frame_rate: cfg.frame_rate,
        ..BinConfig::default()
    };
    let horizon = bins.horizon_frames();
    let mut out = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let va = session
            .va
            .window((w * frames) as f64 / cfg.frame_rate as f64, cfg.window_s)?;
        let vap = (0..frames.saturating_sub(horizon))
            .map(|t| label_window(&va, t, &bins).map(|s| s.index()))
            .collect::<Result<Vec<_>>>()?;
        let vad = (0..frames)
            .map(|t| vad_label(&va, t))
            .collect::<Result<Vec<_>>>()?;
        let cut = |ch: usize| {
            filterbank.features::<f32>(&session.audio[ch][w * samples..(w + 1) * samples])
        };
        out.push(Example {
            session: session.id.clone(),
            start_frame: w * frames,
            features: [cut(0)?, cut(1)?],
            prompts: prompts.clone(),
            labels: FrameLabels { vap, vad },
        });
    }
    Ok(out)
}

/// A whole session prepared for long-form inference.
#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub id: String,
    pub styles: [String; 2],
    pub va: VaStream,
    pub features: [Tensor<f32>; 2],
    pub prompts: [Vec<f32>; 2],
}

pub fn prepare_session(
    session: &SessionData,
    table: &EmbeddingTable,
    filterbank: &Filterbank,
) -> Result<PreparedSession> {
    Ok(PreparedSession {
        id: session.id.clone(),
        styles: session.styles.clone(),
        va: session.va.clone(),
        features: [
            filterbank.features::<f32>(&session.audio[0])?,
            filterbank.features::<f32>(&session.audio[1])?,
        ],
        prompts: session_prompts(session, table)?,
    })
}

/// How prompt embeddings reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Every prompt replaced by the zero vector.
    ZeroPrompt,
    /// Prompt pairs permuted among the items of a batch.
    ShufflePrompt,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "zero_prompt" => Ok(Self::ZeroPrompt),
            "shuffle_prompt" => Ok(Self::ShufflePrompt),
            other => Err(VapError::Config(format!(
                "unknown ablation '{other}', expected none, zero_prompt or shuffle_prompt"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::ZeroPrompt => "zero_prompt",
            Self::ShufflePrompt => "shuffle_prompt",
        }
    }

    /// The prompt pairs the network sees for a group of items.
    pub fn apply(self, prompts: &[&[Vec<f32>; 2]], seed: u64) -> Vec<[Vec<f32>; 2]> {
        match self {
            Self::None => prompts.iter().map(|p| (*p).clone()).collect(),
            Self::ZeroPrompt => prompts
                .iter()
                .map(|p| [vec![0.0; p[0].len()], vec![0.0; p[1].len()]])
                .collect(),
            Self::ShufflePrompt => {
                let mut order: Vec<usize> = (0..prompts.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                order.iter().map(|&i| prompts[i].clone()).collect()
            }
        }
    }
}
