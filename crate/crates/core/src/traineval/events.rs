//! Mutual silences and shift/hold prediction at them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vapp_numcore::Real;

use super::data::{Ablation, PreparedSession};
use super::train::cast_vec;
use crate::error::{Result, VapError};
use crate::model::PromptVap;
use crate::seed::derive_seed;
use crate::va::{Utterance, VaStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnLabel {
    Shift,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SilenceEvent {
    pub start_s: f64,
    pub end_s: f64,
    pub prev_speaker: usize,
    pub next_speaker: usize,
    pub label: TurnLabel,
}

impl SilenceEvent {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

pub const DEFAULT_MIN_SILENCE_S: f64 = 0.25;

/// Maximal stretches where neither channel is active, with speech on both
/// sides, lasting at least `min_silence_s`.
pub fn find_silences(va: &VaStream, min_silence_s: f64) -> Vec<SilenceEvent> {
    let mut all: Vec<(usize, Utterance)> = (0..2)
        .flat_map(|s| va.utterances(s).iter().map(move |u| (s, *u)))
        .collect();
    all.sort_by_key(|(s, u)| (u.start_ms, u.end_ms, *s));
    let min_ms = (min_silence_s * 1000.0).round() as i64;
    let mut events = Vec::new();
    // Speaker and span of the utterance that currently reaches furthest.
    let mut last: Option<(usize, Utterance)> = None;
    for (i, &(s, u)) in all.iter().enumerate() {
        if let Some((ps, pu)) = last {
            if u.start_ms > pu.end_ms && u.start_ms - pu.end_ms >= min_ms {
                // Among utterances starting together, the next speaker is the
                // one whose utterance runs longest.
                let next = all[i..]
                    .iter()
                    .take_while(|(_, v)| v.start_ms == u.start_ms)
                    .max_by_key(|(_, v)| v.end_ms)
                    .map(|(ns, _)| *ns)
                    .unwrap_or(s);
                events.push(SilenceEvent {
                    start_s: pu.end(),
                    end_s: u.start(),
                    prev_speaker: ps,
                    next_speaker: next,
                    label: if next == ps {
                        TurnLabel::Hold
                    } else {
                        TurnLabel::Shift
                    },
                });
            }
            // Ties on the end time go to the later-starting utterance.
            if u.end_ms >= pu.end_ms {
                last = Some((s, u));
            }
        } else {
            last = Some((s, u));
        }
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub shift_correct: usize,
    pub shift_total: usize,
    pub hold_correct: usize,
    pub hold_total: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: TurnLabel, predicted: TurnLabel) {
        let hit = (truth == predicted) as usize;
        match truth {
            TurnLabel::Shift => {
                self.shift_total += 1;
                self.shift_correct += hit;
            }
            TurnLabel::Hold => {
                self.hold_total += 1;
                self.hold_correct += hit;
            }
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.shift_correct += other.shift_correct;
        self.shift_total += other.shift_total;
        self.hold_correct += other.hold_correct;
        self.hold_total += other.hold_total;
    }

    /// Mean of the per-class recalls.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        if self.shift_total == 0 || self.hold_total == 0 {
            return Err(VapError::Evaluation(format!(
                "balanced accuracy needs both classes, got {} shift and {} hold events",
                self.shift_total, self.hold_total
            )));
        }
        let rs = self.shift_correct as f64 / self.shift_total as f64;
        let rh = self.hold_correct as f64 / self.hold_total as f64;
        Ok((rs + rh) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftHoldParams {
    pub min_silence_s: f64,
    /// Length of the scored stretch at the start of each silence.
    pub region_s: f64,
    /// Hop between overlapping inference windows, in seconds.
    pub hop_s: f64,
}

impl Default for ShiftHoldParams {
    fn default() -> Self {
        Self {
            min_silence_s: DEFAULT_MIN_SILENCE_S,
            region_s: 0.5,
            hop_s: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftHoldReport {
    pub balanced_accuracy: f64,
    pub confusion: Confusion,
}

/// Shift/hold decision from per-frame `p_now` over one silence: shift iff
/// the mean score of the speaker who was not talking beats the previous
/// speaker's.
pub fn predict_turn(
    p_now: &[[f64; 2]],
    frame_rate: u32,
    event: &SilenceEvent,
    region_s: f64,
) -> TurnLabel {
    let fr = frame_rate as f64;
    let first = (event.start_s * fr).round() as usize;
    let last = ((event.start_s + region_s.min(event.duration())) * fr).round() as usize;
    let last = last.max(first + 1).min(p_now.len());
    let first = first.min(last.saturating_sub(1));
    let (prev, other) = (event.prev_speaker, 1 - event.prev_speaker);
    let (mut sp, mut so) = (0.0, 0.0);
    for p in &p_now[first..last] {
        sp += p[prev];
        so += p[other];
    }
    if so > sp {
        TurnLabel::Shift
    } else {
        TurnLabel::Hold
    }
}

pub(crate) fn session_prompts(
    sessions: &[PreparedSession],
    ablation: Ablation,
    seed: u64,
) -> Vec<[Vec<f32>; 2]> {
    let refs: Vec<_> = sessions.iter().map(|s| &s.prompts).collect();
    ablation.apply(&refs, derive_seed(seed, "eval-prompts"))
}

/// `p_now` over a whole session.
pub fn session_p_now<F: Real>(
    model: &PromptVap<F>,
    session: &PreparedSession,
    prompts: &[Vec<f32>; 2],
    hop_s: f64,
) -> Result<Vec<[f64; 2]>> {
    let cfg = model.config();
    let fa = session.features[0].cast::<F>();
    let fb = session.features[1].cast::<F>();
    let (pa, pb) = (cast_vec::<F>(&prompts[0]), cast_vec::<F>(&prompts[1]));
    let hop = ((hop_s * cfg.frame_rate as f64).round() as usize).clamp(1, cfg.window_frames());
    Ok(model
        .forward_long([&fa, &fb], [&pa, &pb], cfg.window_frames(), hop)?
        .p_now)
}

/// Balanced shift/hold accuracy over every silence event of `sessions`.
pub fn eval_shift_hold<F: Real>(
    model: &PromptVap<F>,
    sessions: &[PreparedSession],
    params: &ShiftHoldParams,
    ablation: Ablation,
    seed: u64,
) -> Result<ShiftHoldReport> {
    let prompts = session_prompts(sessions, ablation, seed);
    let per: Vec<Confusion> = sessions
        .par_iter()
        .zip(prompts.par_iter())
        .map(|(s, p)| {
            let p_now = session_p_now(model, s, p, params.hop_s)?;
            let mut c = Confusion::default();
            for e in find_silences(&s.va, params.min_silence_s) {
                c.record(
                    e.label,
                    predict_turn(&p_now, s.va.frame_rate(), &e, params.region_s),
                );
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut confusion = Confusion::default();
    for c in &per {
        confusion.merge(c);
    }
    Ok(ShiftHoldReport {
        balanced_accuracy: confusion.balanced_accuracy()?,
        confusion,
    })
}
