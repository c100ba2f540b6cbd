//! A live system facing recorded user audio: the system channel is silent
//! and the model's scores say when the system would take the floor.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vapp_numcore::Real;

use crate::error::{Result, VapError};
use crate::model::{Filterbank, PromptEmbedding, PromptVap};
use crate::va::Utterance;

pub const USER: usize = 0;
pub const SYSTEM: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationParams {
    /// `p_now` of the system above this counts as taking the floor.
    pub threshold: f64,
    /// Longest wait after a user utterance before the response is censored.
    pub max_wait_s: f64,
    pub hop_s: f64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_wait_s: 2.0,
            hop_s: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineRow {
    pub time_s: f64,
    pub p_now: [f64; 2],
    pub p_future: [f64; 2],
    pub vad: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetStats {
    pub events: usize,
    pub crossings: usize,
    pub crossing_rate: f64,
    /// Median over all events, counting a missing crossing as later than
    /// any crossing. `None` when that median falls past the response window.
    pub median_onset_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub timeline: Vec<TimelineRow>,
    /// Response onset after each user utterance end; `None` when censored.
    pub onsets: Vec<Option<f64>>,
    pub stats: OnsetStats,
}

/// Onset after each end in `user`: time from the end to the first frame
/// where the system's `p_now` exceeds the threshold, looking at most
/// `max_wait_s` ahead.
pub fn response_onsets(
    p_now: &[[f64; 2]],
    frame_rate: u32,
    user: &[Utterance],
    params: &SimulationParams,
) -> Vec<Option<f64>> {
    let fr = frame_rate as f64;
    let wait = (params.max_wait_s * fr).round() as usize;
    user.iter()
        .map(|u| (u.end() * fr).round() as usize)
        .filter(|&end| end < p_now.len())
        .map(|end| {
            (end..(end + wait + 1).min(p_now.len()))
                .find(|&t| p_now[t][SYSTEM] > params.threshold)
                .map(|t| (t - end) as f64 / fr)
        })
        .collect()
}

pub fn onset_stats(onsets: &[Option<f64>]) -> OnsetStats {
    let crossings = onsets.iter().flatten().count();
    let mut sorted = onsets.to_vec();
    sorted.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    });
    let n = sorted.len();
    let median = match n {
        0 => None,
        n if n % 2 == 1 => sorted[n / 2],
        n => sorted[n / 2 - 1]
            .zip(sorted[n / 2])
            .map(|(a, b)| (a + b) / 2.0),
    };
    OnsetStats {
        events: n,
        crossings,
        crossing_rate: if n == 0 {
            0.0
        } else {
            crossings as f64 / n as f64
        },
        median_onset_s: median,
    }
}

/// Runs the model on `user_audio` against a silent system channel.
pub fn simulate_system<F: Real>(
    model: &PromptVap<F>,
    filterbank: &Filterbank,
    user_audio: &[f32],
    user_utterances: &[Utterance],
    user_prompt: &PromptEmbedding,
    system_prompt: &PromptEmbedding,
    params: &SimulationParams,
) -> Result<Simulation> {
    let cfg = model.config();
    for (who, p) in [("user", user_prompt), ("system", system_prompt)] {
        if p.dim() != cfg.embed_dim {
            return Err(VapError::Config(format!(
                "{who} prompt embedding has {} dims, model expects {}",
                p.dim(),
                cfg.embed_dim
            )));
        }
    }
    let silent = vec![0.0f32; user_audio.len()];
    let fu = filterbank.features::<F>(user_audio)?;
    let fs = filterbank.features::<F>(&silent)?;
    let (pu, ps) = (user_prompt.cast::<F>(), system_prompt.cast::<F>());
    let hop =
        ((params.hop_s * cfg.frame_rate as f64).round() as usize).clamp(1, cfg.window_frames());
    let out = model.forward_long([&fu, &fs], [&pu, &ps], cfg.window_frames(), hop)?;
    let fr = cfg.frame_rate as f64;
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let timeline = (0..out.frames())
        .map(|t| {
            let v = out.vad_logits.row(t);
            TimelineRow {
                time_s: t as f64 / fr,
                p_now: out.p_now[t],
                p_future: out.p_future[t],
                vad: [sigmoid(v[0].as_f64()), sigmoid(v[1].as_f64())],
            }
        })
        .collect();
    let onsets = response_onsets(&out.p_now, cfg.frame_rate, user_utterances, params);
    Ok(Simulation {
        timeline,
        stats: onset_stats(&onsets),
        onsets,
    })
}

pub const TIMELINE_HEADER: &str = "time_s,p_now_a,p_now_b,p_future_a,p_future_b,vad_a,vad_b";

pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let mut s = String::with_capacity(rows.len() * 64);
    s.push_str(TIMELINE_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.time_s, r.p_now[0], r.p_now[1], r.p_future[0], r.p_future[1], r.vad[0], r.vad[1]
        )
        .expect("write to string");
    }
    s
}

pub fn write_timeline(path: &Path, rows: &[TimelineRow]) -> Result<()> {
    std::fs::write(path, timeline_csv(rows)).map_err(|e| VapError::io(path, e))
}

/// Utterances from per-frame activity.
pub fn utterances_from_activity(activity: &[bool], frame_rate: u32) -> Vec<Utterance> {
    let ms = |t: usize| (t as i64 * 1000) / frame_rate as i64;
    let mut out = Vec::new();
    let mut start = None;
    for (t, &a) in activity.iter().chain(std::iter::once(&false)).enumerate() {
        match (a, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(Utterance {
                    start_ms: ms(s),
                    end_ms: ms(t),
                });
                start = None;
            }
            _ => {}
        }
    }
    out
}
