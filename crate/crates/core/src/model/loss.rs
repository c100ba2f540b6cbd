//! The training objective: VAP cross-entropy + VAD binary cross-entropy +
//! prompt reconstruction error, summed without weights.

use vapp_numcore::{Real, Tape, Tensor, Var};

use super::network::{Graph, ModelOutputs};
use crate::error::{Result, VapError};

/// Per-frame targets for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    /// State labels for the leading frames that have a complete future;
    /// frames beyond `vap.len()` carry no VAP label.
    pub vap: Vec<usize>,
    /// Current activity of both speakers for every frame.
    pub vad: Vec<[bool; 2]>,
}

impl FrameLabels {
    fn check(&self, frames: usize) -> Result<()> {
        if self.vap.is_empty() {
            return Err(VapError::Window(
                "window has no frame with a complete future label".into(),
            ));
        }
        if self.vad.len() != frames || self.vap.len() > frames {
            return Err(VapError::Validation(format!(
                "labels cover {} VAD / {} VAP frames, outputs have {frames}",
                self.vad.len(),
                self.vap.len()
            )));
        }
        Ok(())
    }

    fn vad_tensor<F: Real>(&self) -> Tensor<F> {
        let data = self
            .vad
            .iter()
            .flat_map(|r| r.map(|b| if b { F::one() } else { F::zero() }))
            .collect();
        Tensor::new(&[self.vad.len(), 2], data).expect("shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub total: f64,
    pub vap: f64,
    pub vad: f64,
    pub prompt: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub vap: Var,
    pub vad: Var,
    pub prompt: Var,
}

impl LossVars {
    pub fn values<F: Real>(&self, tape: &Tape<F>) -> Losses {
        let v = |x: Var| tape.value(x).item().as_f64();
        Losses {
            total: v(self.total),
            vap: v(self.vap),
            vad: v(self.vad),
            prompt: v(self.prompt),
        }
    }
}

/// Records the loss of `graph` against `labels` and the input prompts.
pub fn loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    graph: &Graph,
    labels: &FrameLabels,
    prompts: [&[F]; 2],
) -> Result<LossVars> {
    let frames = tape.value(graph.vap_logits).rows();
    labels.check(frames)?;
    let valid = tape.slice_rows(graph.vap_logits, 0, labels.vap.len())?;
    let vap = tape.cross_entropy(valid, &labels.vap)?;
    let vad = tape.binary_cross_entropy(graph.vad_logits, &labels.vad_tensor())?;
    let mut parts = Vec::with_capacity(2);
    for s in 0..2 {
        let target = tape.constant(Tensor::new(&[prompts[s].len()], prompts[s].to_vec())?);
        let target = tape.broadcast_rows(target, frames)?;
        parts.push(tape.mse(graph.prompt_recon[s], target)?);
    }
    let both = tape.add(parts[0], parts[1])?;
    let prompt = tape.scale(both, F::from_f64(0.5));
    let total = tape.add(vap, vad)?;
    let total = tape.add(total, prompt)?;
    Ok(LossVars {
        total,
        vap,
        vad,
        prompt,
    })
}

/// Loss of already evaluated outputs, accumulated in 64-bit.
pub fn loss<F: Real>(
    outputs: &ModelOutputs<F>,
    labels: &FrameLabels,
    prompts: [&[F]; 2],
) -> Result<Losses> {
    let frames = outputs.frames();
    labels.check(frames)?;
    let mut vap = 0.0;
    for (t, &target) in labels.vap.iter().enumerate() {
        let row = outputs.vap_logits.row(t);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
        let lse = mx
            + row
                .iter()
                .map(|x| (x.as_f64() - mx).exp())
                .sum::<f64>()
                .ln();
        vap += lse - row[target].as_f64();
    }
    vap /= labels.vap.len() as f64;

    let mut vad = 0.0;
    for (t, bits) in labels.vad.iter().enumerate() {
        for (s, &on) in bits.iter().enumerate() {
            let x = outputs.vad_logits.row(t)[s].as_f64();
            let y = if on { 1.0 } else { 0.0 };
            vad += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
    }
    vad /= (2 * frames) as f64;

    let mut prompt = 0.0;
    for s in 0..2 {
        let recon = &outputs.prompt_recon[s];
        for t in 0..frames {
            for (r, p) in recon.row(t).iter().zip(prompts[s]) {
                let d = r.as_f64() - p.as_f64();
                prompt += d * d;
            }
        }
    }
    prompt /= (2 * frames * prompts[0].len()) as f64;
    Ok(Losses {
        total: vap + vad + prompt,
        vap,
        vad,
        prompt,
    })
}
