//! Timing records and turn-taking statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VapError};
use crate::va::{Utterance, VaStream};

pub const SPEAKERS: [&str; 2] = ["A", "B"];

/// Utterance timings of both participants, sorted by start time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimingRecord {
    entries: Vec<(usize, Utterance)>,
}

fn format_secs(ms: i64) -> String {
    let sign = if ms < 0 { "-" } else { "" };
    format!("{sign}{}.{:03}", ms.abs() / 1000, ms.abs() % 1000)
}

impl TimingRecord {
    pub fn new(mut entries: Vec<(usize, Utterance)>) -> Result<Self> {
        for (i, (s, u)) in entries.iter().enumerate() {
            if *s > 1 || u.end_ms <= u.start_ms {
                return Err(VapError::Validation(format!("record entry {i} is invalid")));
            }
        }
        entries.sort_by_key(|(s, u)| (u.start_ms, *s, u.end_ms));
        Ok(Self { entries })
    }

    pub fn from_va(va: &VaStream) -> Self {
        let entries = (0..2)
            .flat_map(|c| va.utterances(c).iter().map(move |u| (c, *u)))
            .collect();
        Self::new(entries).expect("stream utterances are valid")
    }

    /// Parses lines of the form `A 10.100 12.510`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| VapError::Format(format!("record line {}: {m}: {line:?}", i + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [who, start, end] = fields[..] else {
                return Err(bad("expected SPEAKER START END"));
            };
            let speaker = SPEAKERS
                .iter()
                .position(|s| *s == who)
                .ok_or_else(|| bad("speaker must be A or B"))?;
            let secs = |f: &str| f.parse::<f64>().ok().filter(|v| v.is_finite());
            let (Some(s), Some(e)) = (secs(start), secs(end)) else {
                return Err(bad("times must be numbers"));
            };
            if e <= s {
                return Err(bad("end must follow start"));
            }
            entries.push((speaker, Utterance::from_secs(s, e)));
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(usize, Utterance)] {
        &self.entries
    }

    /// One line per utterance with millisecond precision.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(s, u)| {
                format!(
                    "{} {} {}\n",
                    SPEAKERS[*s],
                    format_secs(u.start_ms),
                    format_secs(u.end_ms)
                )
            })
            .collect()
    }

    /// Sub-record of utterances starting in `[start_s, end_s)`.
    pub fn segment(&self, start_s: f64, end_s: f64) -> Self {
        let (lo, hi) = (
            (start_s * 1000.0).round() as i64,
            (end_s * 1000.0).round() as i64,
        );
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(_, u)| u.start_ms >= lo && u.start_ms < hi)
                .copied()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantStats {
    pub speech_ratio: f64,
    pub utterance_count: usize,
    pub mean_turn_s: f64,
    /// Mean offset from the partner's turn end to this participant's turn
    /// start; absent when the participant never takes over the floor.
    pub mean_fto_s: Option<f64>,
    pub mean_pre_speech_silence_s: f64,
    /// Pauses inside own turns per second of own turn time.
    pub pause_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnStats {
    pub participants: [ParticipantStats; 2],
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Statistics per participant. Utterances lying wholly inside a partner
/// utterance are treated as backchannels: they count as speech but neither
/// take nor end a turn.
pub fn compute_stats(record: &TimingRecord) -> Result<TurnStats> {
    let entries = record.entries();
    for (s, name) in SPEAKERS.iter().enumerate() {
        if !entries.iter().any(|(w, _)| *w == s) {
            return Err(VapError::Stats(format!(
                "participant {name} has no utterances"
            )));
        }
    }
    let first = entries.iter().map(|(_, u)| u.start_ms).min().unwrap();
    let last = entries.iter().map(|(_, u)| u.end_ms).max().unwrap();
    let total = (last - first) as f64 / 1000.0;

    let backchannel: Vec<bool> = entries
        .iter()
        .map(|(s, u)| {
            entries
                .iter()
                .any(|(o, p)| o != s && p.start_ms <= u.start_ms && u.end_ms <= p.end_ms)
        })
        .collect();
    let floor: Vec<(usize, Utterance)> = entries
        .iter()
        .zip(&backchannel)
        .filter(|(_, bc)| !**bc)
        .map(|(e, _)| *e)
        .collect();

    let mut ftos: [Vec<f64>; 2] = Default::default();
    let mut pre_silence: [Vec<f64>; 2] = Default::default();
    for (i, (s, u)) in floor.iter().enumerate() {
        let prev = floor[..i].iter().max_by_key(|(_, p)| p.end_ms);
        if let Some((ps, p)) = prev {
            if ps != s {
                ftos[*s].push((u.start_ms - p.end_ms) as f64 / 1000.0);
            }
        }
        let latest = entries
            .iter()
            .filter(|(_, p)| p.start_ms < u.start_ms)
            .map(|(_, p)| p.end_ms)
            .max();
        if let Some(end) = latest {
            pre_silence[*s].push(((u.start_ms - end).max(0)) as f64 / 1000.0);
        }
    }

    // Turns: maximal runs of one speaker in the floor sequence.
    let mut turns: [Vec<f64>; 2] = Default::default();
    let mut pauses = [0usize; 2];
    let mut i = 0;
    while i < floor.len() {
        let s = floor[i].0;
        let mut j = i;
        let mut end = floor[i].1.end_ms;
        while j + 1 < floor.len() && floor[j + 1].0 == s {
            j += 1;
            end = end.max(floor[j].1.end_ms);
        }
        turns[s].push((end - floor[i].1.start_ms) as f64 / 1000.0);
        pauses[s] += j - i;
        i = j + 1;
    }

    let participants = [0, 1].map(|s| {
        let speech: f64 = entries
            .iter()
            .filter(|(w, _)| *w == s)
            .map(|(_, u)| u.duration())
            .sum();
        let turn_time: f64 = turns[s].iter().sum();
        ParticipantStats {
            speech_ratio: if total > 0.0 {
                (speech / total).min(1.0)
            } else {
                0.0
            },
            utterance_count: entries.iter().filter(|(w, _)| *w == s).count(),
            mean_turn_s: mean(&turns[s]).unwrap_or(0.0),
            mean_fto_s: mean(&ftos[s]),
            mean_pre_speech_silence_s: mean(&pre_silence[s]).unwrap_or(0.0),
            pause_rate: if turn_time > 0.0 {
                pauses[s] as f64 / turn_time
            } else {
                0.0
            },
        }
    });
    Ok(TurnStats { participants })
}
