//! 16-bit PCM WAV input and output.

use std::path::Path;

use crate::error::{Result, VapError};
use crate::model::encoder::SAMPLE_RATE;

/// Writes two equally long channels in `[-1, 1]` as 16 kHz stereo PCM16.
pub fn write_stereo_wav(path: &Path, channels: [&[f32]; 2]) -> Result<()> {
    if channels[0].len() != channels[1].len() {
        return Err(VapError::Alignment(channels[0].len(), channels[1].len()));
    }
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => VapError::io(path, io),
        other => VapError::Format(format!("{}: {other}", path.display())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for (a, b) in channels[0].iter().zip(channels[1]) {
        w.write_sample(to_pcm(*a)).map_err(wrap)?;
        w.write_sample(to_pcm(*b)).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

pub fn to_pcm(x: f32) -> i16 {
    (x * 32767.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Reads a 16 kHz PCM16 WAV with one or two channels, scaled to `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<Vec<Vec<f32>>> {
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => VapError::io(path, io),
        other => VapError::Format(format!("{}: {other}", path.display())),
    };
    let mut r = hound::WavReader::open(path).map_err(wrap)?;
    let spec = r.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(VapError::Format(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(VapError::Format(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    let n_ch = spec.channels as usize;
    if !(1..=2).contains(&n_ch) {
        return Err(VapError::Format(format!(
            "{}: {n_ch} channels, expected 1 or 2",
            path.display()
        )));
    }
    let mut out = vec![Vec::with_capacity(r.len() as usize / n_ch); n_ch];
    for (i, s) in r.samples::<i16>().enumerate() {
        out[i % n_ch].push(s.map_err(wrap)? as f32 / 32767.0);
    }
    Ok(out)
}
