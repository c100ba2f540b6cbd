use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vapp_numcore::Real;

use super::data::{Ablation, Example};
use super::events::{ShiftHoldParams, ShiftHoldReport};
use super::simulate::OnsetStats;
use super::train::{cast_vec, LossRecord};
use crate::error::{Result, VapError};
use crate::model::{ModelConfig, PromptVap};
use crate::promptgen::cosine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub sessions: usize,
    pub losses: Option<LossRecord>,
    pub shift_hold_params: Option<ShiftHoldParams>,
    pub shift_hold: Option<ShiftHoldReport>,
    /// Response-onset statistics per prompt configuration.
    #[serde(default)]
    pub onsets: BTreeMap<String, OnsetStats>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| VapError::Format(format!("eval report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| VapError::io(path, e))
    }
}

/// Share of (frame, channel) pairs whose reconstructed prompt is closer in
/// cosine to the true prompt than to `contrast` (aligned with `examples`).
pub fn recon_preference<F: Real>(
    model: &PromptVap<F>,
    examples: &[Example],
    contrast: &[[Vec<f32>; 2]],
) -> Result<f64> {
    if examples.len() != contrast.len() || examples.is_empty() {
        return Err(VapError::Evaluation(format!(
            "{} windows but {} contrast prompts",
            examples.len(),
            contrast.len()
        )));
    }
    let per: Vec<(usize, usize)> = examples
        .par_iter()
        .zip(contrast.par_iter())
        .map(|(ex, other)| {
            let (fa, fb) = (ex.features[0].cast::<F>(), ex.features[1].cast::<F>());
            let (pa, pb) = (cast_vec::<F>(&ex.prompts[0]), cast_vec::<F>(&ex.prompts[1]));
            let out = model.forward_features([&fa, &fb], [&pa, &pb])?;
            let mut hits = 0;
            for ch in 0..2 {
                let recon = &out.prompt_recon[ch];
                for t in 0..recon.rows() {
                    let r: Vec<f32> = recon.row(t).iter().map(|x| x.as_f64() as f32).collect();
                    if cosine(&r, &ex.prompts[ch]) > cosine(&r, &other[ch]) {
                        hits += 1;
                    }
                }
            }
            Ok((hits, 2 * out.frames()))
        })
        .collect::<Result<_>>()?;
    let (hits, total) = per.iter().fold((0, 0), |(h, n), (a, b)| (h + a, n + b));
    Ok(hits as f64 / total as f64)
}
