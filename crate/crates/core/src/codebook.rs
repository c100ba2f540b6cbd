//! Discrete future-activity states.
//!
//! A state packs, for each of the two speakers, four binary "active in this
//! future bin" flags. Speaker A occupies the high nibble and the earliest
//! bin is the most significant bit of each nibble, so for example
//! A = `[1,0,0,0]`, B = `[0,0,0,1]` is state 129.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VapError};
use crate::va::VaStream;

pub const NUM_STATES: usize = 256;
pub const NUM_BINS: usize = 4;

/// Per-speaker bin flags, indexed `[speaker][bin]`.
pub type StateBits = [[bool; NUM_BINS]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VapState(u8);

impl VapState {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn bits(self) -> StateBits {
        decode_bits(self.0)
    }

    /// The state with the two speakers' bin patterns exchanged.
    pub fn swapped(self) -> Self {
        Self(self.0.rotate_left(4))
    }
}

pub fn encode_state(bits: &StateBits) -> VapState {
    let mut index = 0u8;
    for (s, speaker) in bits.iter().enumerate() {
        for (b, &on) in speaker.iter().enumerate() {
            if on {
                index |= 1 << (7 - (4 * s + b));
            }
        }
    }
    VapState(index)
}

pub fn decode_state(index: usize) -> Result<StateBits> {
    if index >= NUM_STATES {
        return Err(VapError::Domain(format!(
            "state index {index} outside 0..{NUM_STATES}"
        )));
    }
    Ok(decode_bits(index as u8))
}

fn decode_bits(index: u8) -> StateBits {
    let mut bits = [[false; NUM_BINS]; 2];
    for (s, speaker) in bits.iter_mut().enumerate() {
        for (b, on) in speaker.iter_mut().enumerate() {
            *on = index & (1 << (7 - (4 * s + b))) != 0;
        }
    }
    bits
}

/// `state_swap_map()[k]` is the index of state `k` with speakers exchanged.
pub fn state_swap_map() -> Vec<usize> {
    (0..NUM_STATES)
        .map(|k| VapState(k as u8).swapped().index())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BinWeighting {
    /// Bins weighted by their duration.
    #[default]
    Duration,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinConfig {
    pub frame_rate: u32,
    /// Five strictly increasing boundaries in milliseconds, starting at 0.
    pub bin_boundaries_ms: [u32; NUM_BINS + 1],
    pub activity_threshold: f64,
    #[serde(default)]
    pub weighting: BinWeighting,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            frame_rate: 50,
            bin_boundaries_ms: [0, 200, 600, 1200, 2000],
            activity_threshold: 0.5,
            weighting: BinWeighting::Duration,
        }
    }
}

impl BinConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bin_boundaries_ms;
        if b[0] != 0 || b.windows(2).any(|w| w[1] <= w[0]) {
            return Err(VapError::Config(format!(
                "bin boundaries must start at 0 and increase strictly, got {b:?}"
            )));
        }
        if self.frame_rate == 0 {
            return Err(VapError::Config("frame rate must be positive".into()));
        }
        if b.iter()
            .any(|&ms| (ms as u64 * self.frame_rate as u64) % 1000 != 0)
        {
            return Err(VapError::Config(format!(
                "bin boundaries {b:?} do not fall on frame edges at {} Hz",
                self.frame_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.activity_threshold) {
            return Err(VapError::Config(
                "activity threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Bin lengths in frames (10, 20, 30, 40 at the defaults).
    pub fn bin_frames(&self) -> [usize; NUM_BINS] {
        let f = |ms: u32| (ms as usize * self.frame_rate as usize) / 1000;
        let b = &self.bin_boundaries_ms;
        [
            f(b[1]) - f(b[0]),
            f(b[2]) - f(b[1]),
            f(b[3]) - f(b[2]),
            f(b[4]) - f(b[3]),
        ]
    }

    /// Number of future frames a label needs.
    pub fn horizon_frames(&self) -> usize {
        self.bin_frames().iter().sum()
    }
}

/// State for the frames `(t, t + horizon]` of `va`.
pub fn label_window(va: &VaStream, t: usize, cfg: &BinConfig) -> Result<VapState> {
    let horizon = cfg.horizon_frames();
    if t + horizon >= va.n_frames() {
        return Err(VapError::Window(format!(
            "frame {t} needs {horizon} future frames but the stream has {}",
            va.n_frames()
        )));
    }
    let lens = cfg.bin_frames();
    let mut bits = [[false; NUM_BINS]; 2];
    for (s, speaker) in bits.iter_mut().enumerate() {
        let act = va.activity(s);
        let mut start = t + 1;
        for (b, on) in speaker.iter_mut().enumerate() {
            let active = act[start..start + lens[b]].iter().filter(|a| **a).count();
            *on = active as f64 / lens[b] as f64 >= cfg.activity_threshold;
            start += lens[b];
        }
    }
    Ok(encode_state(&bits))
}

/// Current activity of both speakers at frame `t`.
pub fn vad_label(va: &VaStream, t: usize) -> Result<[bool; 2]> {
    if t >= va.n_frames() {
        return Err(VapError::Window(format!(
            "frame {t} outside stream of {} frames",
            va.n_frames()
        )));
    }
    Ok([va.is_active(0, t), va.is_active(1, t)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// First two bins (0–600 ms at the defaults).
    Now,
    /// Last two bins (600–2000 ms at the defaults).
    Future,
}

/// Categorical distribution over the 256 states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution(Vec<f64>);

impl StateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != NUM_STATES {
            return Err(VapError::Validation(format!(
                "state distribution has {} entries, expected {NUM_STATES}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(VapError::Validation(
                "state distribution has a negative or NaN entry".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(VapError::Validation(format!(
                "state distribution sums to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// Precomputed per-state speaker weights for [`aggregate`].
#[derive(Debug, Clone)]
pub struct Aggregator {
    /// `[horizon][speaker][state]`
    weights: [[Vec<f64>; 2]; 2],
}

impl Aggregator {
    pub fn new(cfg: &BinConfig) -> Self {
        let lens = cfg.bin_frames();
        let w: [f64; NUM_BINS] = match cfg.weighting {
            BinWeighting::Duration => lens.map(|l| l as f64),
            BinWeighting::Uniform => [1.0; NUM_BINS],
        };
        let horizon_bins = [[0usize, 1], [2, 3]];
        let mut weights: [[Vec<f64>; 2]; 2] = Default::default();
        for (h, bins) in horizon_bins.iter().enumerate() {
            let total: f64 = bins.iter().map(|&b| w[b]).sum();
            for (s, per_state) in weights[h].iter_mut().enumerate() {
                *per_state = (0..NUM_STATES)
                    .map(|k| {
                        let bits = decode_bits(k as u8);
                        bins.iter()
                            .filter(|&&b| bits[s][b])
                            .map(|&b| w[b])
                            .sum::<f64>()
                            / total
                    })
                    .collect();
            }
        }
        Self { weights }
    }

    /// Cross-speaker normalized activity `(p_A, p_B)`; `(0.5, 0.5)` when
    /// neither speaker has any mass in the horizon.
    pub fn aggregate(&self, probs: &[f64], horizon: Horizon) -> (f64, f64) {
        let h = match horizon {
            Horizon::Now => 0,
            Horizon::Future => 1,
        };
        let mass = |s: usize| -> f64 {
            self.weights[h][s]
                .iter()
                .zip(probs)
                .map(|(w, p)| w * p)
                .sum()
        };
        let (a, b) = (mass(0), mass(1));
        if a + b <= 0.0 {
            (0.5, 0.5)
        } else {
            let pa = a / (a + b);
            (pa, 1.0 - pa)
        }
    }
}

/// Validating one-shot form of [`Aggregator::aggregate`].
pub fn aggregate(dist: &StateDistribution, horizon: Horizon, cfg: &BinConfig) -> (f64, f64) {
    Aggregator::new(cfg).aggregate(dist.probs(), horizon)
}
