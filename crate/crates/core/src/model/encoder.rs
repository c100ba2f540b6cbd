//! Fixed filterbank front end.
//!
//! Each 20 ms frame is described by 40 triangular mel-band log energies and
//! one log frame energy. Frame `t` analyses the 25 ms of audio that ends at
//! the end of the frame, zero-padded before the start of the signal, so no
//! feature ever depends on later audio.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use vapp_numcore::{Real, Tensor};

use crate::error::{Result, VapError};

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP: usize = 320;
pub const WINDOW: usize = 400;
pub const FFT_LEN: usize = 512;
pub const MEL_BANDS: usize = 40;
pub const FEATURE_DIM: usize = MEL_BANDS + 1;
/// Added to every energy before the logarithm.
pub const ENERGY_FLOOR: f64 = 1e-8;

const FEATURE_OFFSET: f64 = -4.0;
const FEATURE_SCALE: f64 = 6.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of frames produced for `n` samples.
pub fn frame_count(n: usize) -> usize {
    n / HOP
}

pub struct Filterbank {
    window: Vec<f64>,
    /// Per band, the nonzero `(bin, weight)` pairs.
    bands: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Filterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Filterbank")
            .field("bands", &self.bands.len())
            .finish()
    }
}

impl Default for Filterbank {
    fn default() -> Self {
        Self::new()
    }
}

impl Filterbank {
    pub fn new() -> Self {
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
        let edges: Vec<f64> = (0..MEL_BANDS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (MEL_BANDS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / FFT_LEN as f64;
        let bands = (0..MEL_BANDS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..=FFT_LEN / 2)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);
        Self { window, bands, fft }
    }

    /// Unscaled natural-log energies, `[frames][41]`, last entry the frame energy.
    pub fn log_energies(&self, samples: &[f32]) -> Result<Vec<[f64; FEATURE_DIM]>> {
        if samples.len() < WINDOW {
            return Err(VapError::Window(format!(
                "{} samples is shorter than one {WINDOW}-sample analysis window",
                samples.len()
            )));
        }
        let frames = frame_count(samples.len());
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; FFT_LEN / 2 + 1];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let end = HOP * (t + 1);
            let mut energy = 0.0;
            buf.fill(Complex::new(0.0, 0.0));
            for (n, slot) in buf.iter_mut().take(WINDOW).enumerate() {
                let idx = end as isize - WINDOW as isize + n as isize;
                let x = if idx >= 0 {
                    samples[idx as usize] as f64
                } else {
                    0.0
                };
                energy += x * x;
                slot.re = x * self.window[n];
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let mut row = [0.0; FEATURE_DIM];
            for (m, band) in self.bands.iter().enumerate() {
                let e: f64 = band.iter().map(|&(k, w)| w * power[k]).sum();
                row[m] = (e + ENERGY_FLOOR).ln();
            }
            row[MEL_BANDS] = (energy + ENERGY_FLOOR).ln();
            out.push(row);
        }
        Ok(out)
    }

    /// Standardized features `[frames, 41]` as fed to the network.
    pub fn features<F: Real>(&self, samples: &[f32]) -> Result<Tensor<F>> {
        let rows = self.log_energies(samples)?;
        let data = rows
            .iter()
            .flat_map(|r| {
                r.iter()
                    .map(|&v| F::from_f64((v - FEATURE_OFFSET) / FEATURE_SCALE))
            })
            .collect();
        Ok(Tensor::new(&[rows.len(), FEATURE_DIM], data)?)
    }
}

const FEAT_MAGIC: &[u8; 4] = b"FEAT";

/// Writes precomputed `[T, dim]` features.
pub fn save_features(path: &Path, frame_rate: u32, features: &Tensor<f32>) -> Result<()> {
    let (t, dim) = (features.rows(), features.cols());
    let mut bytes = Vec::with_capacity(16 + 4 * features.len());
    bytes.extend_from_slice(FEAT_MAGIC);
    for v in [frame_rate, t as u32, dim as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for x in features.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| VapError::io(path, e))
}

/// Reads a feature file, returning its frame rate and `[T, dim]` features.
pub fn load_features(path: &Path) -> Result<(u32, Tensor<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| VapError::io(path, e))?;
    let fmt = |m: &str| VapError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != FEAT_MAGIC {
        return Err(fmt("missing FEAT header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (rate, t, dim) = (word(1), word(2) as usize, word(3) as usize);
    let payload = &bytes[16..];
    if payload.len() != 4 * t * dim {
        return Err(fmt(&format!(
            "expected {} feature bytes, found {}",
            4 * t * dim,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rate, Tensor::new(&[t, dim], data)?))
}
