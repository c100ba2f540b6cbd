//! Two-channel voice-activity streams.
//!
//! Utterance boundaries are kept at millisecond resolution. Frame `f` is
//! active iff its start time `f / frame_rate` lies in `[start, end)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VapError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Utterance {
    pub start_ms: i64,
    pub end_ms: i64,
}

impl Utterance {
    pub fn from_secs(start: f64, end: f64) -> Self {
        Self {
            start_ms: (start * 1000.0).round() as i64,
            end_ms: (end * 1000.0).round() as i64,
        }
    }

    pub fn start(&self) -> f64 {
        self.start_ms as f64 / 1000.0
    }

    pub fn end(&self) -> f64 {
        self.end_ms as f64 / 1000.0
    }

    pub fn duration(&self) -> f64 {
        (self.end_ms - self.start_ms) as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaStream {
    frame_rate: u32,
    duration_ms: i64,
    utterances: [Vec<Utterance>; 2],
    activity: [Vec<bool>; 2],
}

impl VaStream {
    /// Validates that each channel is sorted, non-empty-interval and
    /// non-overlapping, then rasterizes.
    pub fn new(frame_rate: u32, duration_s: f64, utterances: [Vec<Utterance>; 2]) -> Result<Self> {
        if frame_rate == 0 {
            return Err(VapError::Validation("frame rate must be positive".into()));
        }
        let duration_ms = (duration_s * 1000.0).round() as i64;
        for (ch, list) in utterances.iter().enumerate() {
            for (i, u) in list.iter().enumerate() {
                if u.start_ms < 0 || u.end_ms <= u.start_ms {
                    return Err(VapError::Validation(format!(
                        "channel {ch} utterance {i}: invalid interval [{}, {})",
                        u.start(),
                        u.end()
                    )));
                }
                if i > 0 && list[i - 1].end_ms > u.start_ms {
                    return Err(VapError::Validation(format!(
                        "channel {ch} utterance {i} overlaps or precedes its predecessor"
                    )));
                }
            }
        }
        let n = (duration_ms * frame_rate as i64 / 1000) as usize;
        let activity = [
            rasterize(&utterances[0], frame_rate, n),
            rasterize(&utterances[1], frame_rate, n),
        ];
        Ok(Self {
            frame_rate,
            duration_ms,
            utterances,
            activity,
        })
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_ms as f64 / 1000.0
    }

    pub fn n_frames(&self) -> usize {
        self.activity[0].len()
    }

    pub fn utterances(&self, channel: usize) -> &[Utterance] {
        &self.utterances[channel]
    }

    pub fn activity(&self, channel: usize) -> &[bool] {
        &self.activity[channel]
    }

    pub fn is_active(&self, channel: usize, frame: usize) -> bool {
        self.activity[channel][frame]
    }

    /// Time-shifted copy; utterances that would start before zero are an error.
    pub fn shifted(&self, offset_s: f64) -> Result<Self> {
        let off = (offset_s * 1000.0).round() as i64;
        let shift = |list: &Vec<Utterance>| -> Vec<Utterance> {
            list.iter()
                .map(|u| Utterance {
                    start_ms: u.start_ms + off,
                    end_ms: u.end_ms + off,
                })
                .collect()
        };
        Self::new(
            self.frame_rate,
            (self.duration_ms + off) as f64 / 1000.0,
            [shift(&self.utterances[0]), shift(&self.utterances[1])],
        )
    }

    /// Sub-stream covering `[start_s, start_s + len_s)`, re-based to zero.
    /// Utterances crossing the edges are clipped.
    pub fn window(&self, start_s: f64, len_s: f64) -> Result<Self> {
        let lo = (start_s * 1000.0).round() as i64;
        let hi = lo + (len_s * 1000.0).round() as i64;
        let clip = |list: &Vec<Utterance>| -> Vec<Utterance> {
            list.iter()
                .filter(|u| u.end_ms > lo && u.start_ms < hi)
                .map(|u| Utterance {
                    start_ms: u.start_ms.max(lo) - lo,
                    end_ms: u.end_ms.min(hi) - lo,
                })
                .collect()
        };
        Self::new(
            self.frame_rate,
            len_s,
            [clip(&self.utterances[0]), clip(&self.utterances[1])],
        )
    }

    pub fn to_json(&self) -> String {
        let doc = VaDocument {
            frame_rate: self.frame_rate,
            duration_s: self.duration_s(),
            channels: self
                .utterances
                .iter()
                .map(|list| ChannelDocument {
                    utterances: list.iter().map(|u| [u.start(), u.end()]).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("va serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: VaDocument = serde_json::from_str(text)
            .map_err(|e| VapError::Format(format!("va document: {e}")))?;
        if doc.channels.len() != 2 {
            return Err(VapError::Format(format!(
                "va document has {} channels, expected 2",
                doc.channels.len()
            )));
        }
        let conv = |c: &ChannelDocument| -> Vec<Utterance> {
            c.utterances
                .iter()
                .map(|[s, e]| Utterance::from_secs(*s, *e))
                .collect()
        };
        Self::new(
            doc.frame_rate,
            doc.duration_s,
            [conv(&doc.channels[0]), conv(&doc.channels[1])],
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| VapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VapError::io(path, e))?;
        Self::from_json(&text)
    }
}

fn rasterize(list: &[Utterance], frame_rate: u32, n: usize) -> Vec<bool> {
    let fr = frame_rate as i64;
    let mut out = vec![false; n];
    for u in list {
        // First frame f with f * 1000 >= start * fr, i.e. ceil(start * fr / 1000).
        let lo = (u.start_ms * fr + 999).div_euclid(1000).max(0) as usize;
        let hi = ((u.end_ms * fr + 999).div_euclid(1000).max(0) as usize).min(n);
        for a in out.iter_mut().take(hi).skip(lo) {
            *a = true;
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaDocument {
    frame_rate: u32,
    duration_s: f64,
    channels: Vec<ChannelDocument>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelDocument {
    utterances: Vec<[f64; 2]>,
}
