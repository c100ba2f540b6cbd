//! Synthetic two-party conversations with controllable turn-taking style.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::write_stereo_wav;
use crate::error::{Result, VapError};
use crate::model::encoder::SAMPLE_RATE;
use crate::seed::derive_seed;
use crate::va::{Utterance, VaStream};

const MIN_SEGMENT_S: f64 = 0.2;
const MIN_CHANNEL_GAP_S: f64 = 0.1;
const MAX_OVERLAP_S: f64 = 1.0;
const BACKCHANNEL_S: (f64, f64) = (0.15, 0.4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    /// Mean gap between the partner's turn end and this speaker's turn start.
    pub mean_fto_s: f64,
    pub fto_std_s: f64,
    pub mean_turn_s: f64,
    pub turn_lognorm_sigma: f64,
    /// Within-turn pauses per second of turn.
    pub pause_rate: f64,
    pub mean_pause_s: f64,
    /// Backchannels per second of partner speech.
    pub backchannel_rate: f64,
    pub talkativeness: f64,
}

impl StyleParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("fto_std_s", self.fto_std_s),
            ("turn_lognorm_sigma", self.turn_lognorm_sigma),
            ("pause_rate", self.pause_rate),
            ("backchannel_rate", self.backchannel_rate),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(VapError::Validation(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if !(self.mean_turn_s >= MIN_SEGMENT_S) {
            return Err(VapError::Validation(format!(
                "mean_turn_s must be at least {MIN_SEGMENT_S}, got {}",
                self.mean_turn_s
            )));
        }
        if self.pause_rate > 0.0 && !(self.mean_pause_s >= MIN_CHANNEL_GAP_S) {
            return Err(VapError::Validation(format!(
                "mean_pause_s must be at least {MIN_CHANNEL_GAP_S} when pauses occur"
            )));
        }
        if !(0.0..=1.0).contains(&self.talkativeness) {
            return Err(VapError::Validation(format!(
                "talkativeness must lie in [0, 1], got {}",
                self.talkativeness
            )));
        }
        if !self.mean_fto_s.is_finite() {
            return Err(VapError::Validation("mean_fto_s must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedStyle {
    pub name: String,
    pub params: StyleParams,
}

/// Two contrasting poles: quick, talkative responders and slow, calm ones.
pub fn default_style_library() -> Vec<NamedStyle> {
    vec![
        NamedStyle {
            name: "fast".into(),
            params: StyleParams {
                mean_fto_s: 0.15,
                fto_std_s: 0.15,
                mean_turn_s: 3.5,
                turn_lognorm_sigma: 0.5,
                pause_rate: 0.1,
                mean_pause_s: 0.3,
                backchannel_rate: 0.25,
                talkativeness: 0.8,
            },
        },
        NamedStyle {
            name: "slow".into(),
            params: StyleParams {
                mean_fto_s: 1.0,
                fto_std_s: 0.3,
                mean_turn_s: 1.8,
                turn_lognorm_sigma: 0.5,
                pause_rate: 0.3,
                mean_pause_s: 0.6,
                backchannel_rate: 0.05,
                talkativeness: 0.4,
            },
        },
    ]
}

fn pause_length(style: &StyleParams, rng: &mut ChaCha8Rng) -> f64 {
    let extra = style.mean_pause_s - MIN_CHANNEL_GAP_S;
    if extra <= 0.0 {
        return MIN_CHANNEL_GAP_S;
    }
    MIN_CHANNEL_GAP_S + Exp::new(1.0 / extra).expect("positive rate").sample(rng)
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("positive mean").sample(rng) as usize
    }
}

/// Splits a turn starting at `start` spanning `span` seconds into speech
/// segments separated by within-turn pauses.
fn turn_segments(
    start: f64,
    span: f64,
    style: &StyleParams,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let mut pauses: Vec<f64> = (0..poisson(style.pause_rate * span, rng))
        .map(|_| pause_length(style, rng))
        .collect();
    while pauses.iter().sum::<f64>() > 0.5 * span {
        pauses.pop();
    }
    let speech = span - pauses.iter().sum::<f64>();
    let mut cuts: Vec<f64> = pauses
        .iter()
        .map(|_| rng.random_range(0.0..speech))
        .collect();
    cuts.sort_by(f64::total_cmp);
    let mut segs = Vec::with_capacity(cuts.len() + 1);
    let (mut t, mut spoken) = (start, 0.0);
    for (cut, pause) in cuts.into_iter().zip(pauses) {
        let len = cut - spoken;
        if len < MIN_SEGMENT_S || speech - cut < MIN_SEGMENT_S {
            continue;
        }
        segs.push((t, t + len));
        t += len + pause;
        spoken = cut;
    }
    segs.push((t, t + speech - spoken));
    segs
}

/// Stochastic alternating-floor process for two speakers.
pub fn generate_va(
    style_a: &StyleParams,
    style_b: &StyleParams,
    duration_s: f64,
    seed: u64,
) -> Result<VaStream> {
    style_a.validate()?;
    style_b.validate()?;
    if duration_s < 30.0 {
        return Err(VapError::Generation(format!(
            "session duration {duration_s} s is below the 30 s minimum"
        )));
    }
    let styles = [style_a, style_b];
    if styles.iter().all(|s| s.talkativeness == 0.0) {
        return Err(VapError::Generation(
            "both speakers have talkativeness 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let claim = |speaker: usize, rng: &mut ChaCha8Rng| -> bool {
        let (mine, theirs) = (
            styles[speaker].talkativeness,
            styles[1 - speaker].talkativeness,
        );
        rng.random::<f64>() * (mine + theirs) < mine
    };
    let mut utts: [Vec<(f64, f64)>; 2] = Default::default();
    let mut speaker = if claim(0, &mut rng) { 0 } else { 1 };
    let mut t = rng.random_range(0.2..1.0);
    while t < duration_s - MIN_SEGMENT_S {
        let style = styles[speaker];
        let sigma = style.turn_lognorm_sigma;
        let mu = style.mean_turn_s.ln() - sigma * sigma / 2.0;
        let span = LogNormal::new(mu, sigma)
            .expect("valid lognormal")
            .sample(&mut rng)
            .clamp(MIN_SEGMENT_S, 30.0);
        let segs = turn_segments(t, span, style, &mut rng);
        let turn_end = segs.last().expect("one segment").1;
        utts[speaker].extend(&segs);

        let other = 1 - speaker;
        let spoken: f64 = segs.iter().map(|(s, e)| e - s).sum();
        let mut bcs: Vec<(f64, f64)> =
            (0..poisson(styles[other].backchannel_rate * spoken, &mut rng))
                .filter_map(|_| {
                    let &(s, e) = &segs[rng.random_range(0..segs.len())];
                    let len = rng.random_range(BACKCHANNEL_S.0..BACKCHANNEL_S.1);
                    let lo = s + MIN_CHANNEL_GAP_S;
                    let hi = e - MIN_CHANNEL_GAP_S - len;
                    (hi > lo).then(|| {
                        let at = rng.random_range(lo..hi);
                        (at, at + len)
                    })
                })
                .collect();
        bcs.sort_by(|x, y| x.0.total_cmp(&y.0));
        for bc in bcs {
            let free_after = utts[other].last().map_or(0.0, |u| u.1 + MIN_CHANNEL_GAP_S);
            if bc.0 >= free_after {
                utts[other].push(bc);
            }
        }

        let last_end =
            |ch: usize, utts: &[Vec<(f64, f64)>; 2]| utts[ch].last().map_or(0.0, |u| u.1);
        if claim(other, &mut rng) {
            let partner = styles[other];
            let fto = if partner.fto_std_s > 0.0 {
                Normal::new(partner.mean_fto_s, partner.fto_std_s)
                    .expect("valid normal")
                    .sample(&mut rng)
            } else {
                partner.mean_fto_s
            };
            t = (turn_end + fto.max(-MAX_OVERLAP_S))
                .max(last_end(other, &utts) + MIN_CHANNEL_GAP_S)
                .max(t + MIN_CHANNEL_GAP_S);
            speaker = other;
        } else {
            t = turn_end + pause_length(style, &mut rng);
        }
    }

    let mut channels: [Vec<Utterance>; 2] = Default::default();
    for (ch, list) in utts.iter().enumerate() {
        for &(s, e) in list {
            let u = Utterance::from_secs(s, e.min(duration_s));
            if u.end_ms - u.start_ms >= 50 {
                channels[ch].push(u);
            }
        }
    }
    VaStream::new(50, duration_s, channels)
}

/// Utterances of `channel` after which the partner takes the floor.
/// Utterances inside a partner utterance are backchannels and never final.
pub fn turn_final(va: &VaStream, channel: usize) -> Vec<bool> {
    let own = va.utterances(channel);
    let partner = va.utterances(1 - channel);
    own.iter()
        .enumerate()
        .map(|(i, u)| {
            let next_own = own.get(i + 1).map_or(i64::MAX, |n| n.start_ms);
            let backchannel = partner
                .iter()
                .any(|p| p.start_ms <= u.start_ms && u.end_ms <= p.end_ms);
            !backchannel
                && partner.iter().any(|p| {
                    p.start_ms > u.start_ms && p.end_ms > u.end_ms && p.start_ms < next_own
                })
        })
        .collect()
}

const BASE_F0: [f64; 2] = [120.0, 210.0];
const HARMONICS: usize = 6;
const TONE_AMPLITUDE: f64 = 0.25;
const NOISE_AMPLITUDE: f64 = 0.03;
const RAMP_S: f64 = 0.01;
/// Turn-final utterances end with falling pitch and loudness over this span.
const FINAL_GLIDE_S: f64 = 0.3;
const FINAL_GLIDE_DROP: f64 = 0.4;
const FINAL_FADE: f64 = 0.8;

/// Renders each channel's active regions as a harmonic tone with noise.
pub fn synthesize_audio(va: &VaStream, seed: u64) -> [Vec<f32>; 2] {
    let n = (va.duration_s() * SAMPLE_RATE as f64).round() as usize;
    let sr = SAMPLE_RATE as f64;
    let mut out = [vec![0.0f32; n], vec![0.0f32; n]];
    for (ch, buf) in out.iter_mut().enumerate() {
        let finals = turn_final(va, ch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("channel{ch}")));
        // Band-pass noise state: difference of two one-pole low-passes.
        let (a_hi, a_lo) = (one_pole(3000.0), one_pole(300.0));
        for (u, &is_final) in va.utterances(ch).iter().zip(&finals) {
            let f0 = BASE_F0[ch] * (1.0 + rng.random_range(-0.15..0.15));
            let lo = ((u.start_ms as f64 / 1000.0) * sr).ceil() as usize;
            let hi = (((u.end_ms as f64) / 1000.0) * sr).ceil() as usize;
            let hi = hi.min(n);
            let (start, end) = (u.start(), u.end());
            let glide_from = end - FINAL_GLIDE_S.min(0.5 * (end - start));
            let mut phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (mut y_hi, mut y_lo) = (0.0, 0.0);
            for (i, slot) in buf.iter_mut().enumerate().take(hi).skip(lo) {
                let time = i as f64 / sr;
                let (mut f, mut gain) = (f0, 1.0);
                if is_final && time > glide_from {
                    let progress = (time - glide_from) / (end - glide_from);
                    f *= 1.0 - FINAL_GLIDE_DROP * progress;
                    gain -= FINAL_FADE * progress;
                }
                phase = (phase + std::f64::consts::TAU * f / sr) % std::f64::consts::TAU;
                let (s1, c1) = phase.sin_cos();
                let (mut prev, mut cur) = (0.0, s1);
                let mut tone = 0.0;
                for k in 1..=HARMONICS {
                    tone += cur / k as f64;
                    let next = 2.0 * c1 * cur - prev;
                    prev = cur;
                    cur = next;
                }
                let white: f64 = rng.random_range(-1.0..1.0);
                y_hi += a_hi * (white - y_hi);
                y_lo += a_lo * (white - y_lo);
                let noise = y_hi - y_lo;
                let ramp = ramp_gain(time - start).min(ramp_gain(end - time));
                *slot =
                    (gain * ramp * (TONE_AMPLITUDE * tone / 2.45 + NOISE_AMPLITUDE * noise)) as f32;
            }
        }
    }
    out
}

fn one_pole(cutoff_hz: f64) -> f64 {
    1.0 - (-std::f64::consts::TAU * cutoff_hz / SAMPLE_RATE as f64).exp()
}

fn ramp_gain(dt: f64) -> f64 {
    if dt >= RAMP_S {
        1.0
    } else if dt <= 0.0 {
        0.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * dt / RAMP_S).cos()
    }
}

/// A generated conversation.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub duration_s: f64,
    pub styles: [NamedStyle; 2],
    pub seed: u64,
    pub va: VaStream,
    pub audio: [Vec<f32>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMeta {
    pub id: String,
    pub duration_s: f64,
    pub seed: u64,
    pub styles: [NamedStyle; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_sessions: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub styles: Vec<NamedStyle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: CorpusConfig,
    pub splits: Splits,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| VapError::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| VapError::Format(format!("{}: {e}", path.display())))
    }

    pub fn session_dir(root: &Path, id: &str) -> PathBuf {
        root.join(id)
    }
}

pub fn session_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Generates one session of the corpus.
pub fn generate_session(
    id: &str,
    library: &[NamedStyle],
    duration_s: f64,
    global_seed: u64,
) -> Result<Session> {
    if library.is_empty() {
        return Err(VapError::Generation("style library is empty".into()));
    }
    let seed = derive_seed(global_seed, id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let styles = [
        library[rng.random_range(0..library.len())].clone(),
        library[rng.random_range(0..library.len())].clone(),
    ];
    let va = generate_va(
        &styles[0].params,
        &styles[1].params,
        duration_s,
        rng.random(),
    )?;
    let audio = synthesize_audio(&va, rng.random());
    Ok(Session {
        id: id.to_string(),
        duration_s,
        styles,
        seed,
        va,
        audio,
    })
}

/// 8:1:1 session-level split of `ids`, shuffled with `seed`.
pub fn split_sessions(ids: &[String], seed: u64) -> Splits {
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n = order.len();
    let (n_train, n_val) = (n * 8 / 10, n / 10);
    let sorted = |v: &[String]| {
        let mut v = v.to_vec();
        v.sort();
        v
    };
    Splits {
        train: sorted(&order[..n_train]),
        validation: sorted(&order[n_train..n_train + n_val]),
        test: sorted(&order[n_train + n_val..]),
    }
}

/// Writes `n_sessions` session directories and `manifest.json` under `out_dir`.
pub fn build_corpus(
    n_sessions: usize,
    library: &[NamedStyle],
    duration_s: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| VapError::io(out_dir, e))?;
    let ids: Vec<String> = (0..n_sessions).map(session_id).collect();
    ids.par_iter().try_for_each(|id| -> Result<()> {
        let s = generate_session(id, library, duration_s, seed)?;
        write_session(&s, &Manifest::session_dir(out_dir, id))
    })?;
    let manifest = Manifest {
        config: CorpusConfig {
            n_sessions,
            duration_s,
            seed,
            styles: library.to_vec(),
        },
        splits: split_sessions(&ids, seed),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| VapError::io(&path, e))?;
    Ok(manifest)
}

pub fn write_session(s: &Session, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| VapError::io(dir, e))?;
    write_stereo_wav(&dir.join("audio.wav"), [&s.audio[0], &s.audio[1]])?;
    s.va.save(&dir.join("va.json"))?;
    let meta = SessionMeta {
        id: s.id.clone(),
        duration_s: s.duration_s,
        seed: s.seed,
        styles: s.styles.clone(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&path, text).map_err(|e| VapError::io(&path, e))
}

pub fn load_meta(dir: &Path) -> Result<SessionMeta> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| VapError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| VapError::Format(format!("{}: {e}", path.display())))
}

/// Style names per session id, for reporting.
pub fn style_names(manifest_dir: &Path, ids: &[String]) -> Result<BTreeMap<String, [String; 2]>> {
    ids.iter()
        .map(|id| {
            let meta = load_meta(&Manifest::session_dir(manifest_dir, id))?;
            Ok((
                id.clone(),
                [meta.styles[0].name.clone(), meta.styles[1].name.clone()],
            ))
        })
        .collect()
}

/// Frame activity from audio energy at the start of each frame.
pub fn energy_vad(samples: &[f32], frame_rate: u32, threshold: f32) -> Vec<bool> {
    let hop = SAMPLE_RATE as usize / frame_rate as usize;
    let probe = hop / 10;
    (0..samples.len() / hop)
        .map(|t| {
            samples[t * hop..t * hop + probe]
                .iter()
                .any(|x| x.abs() > threshold)
        })
        .collect()
}
