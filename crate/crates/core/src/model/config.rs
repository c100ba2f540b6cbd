use serde::{Deserialize, Serialize};

use super::encoder::FEATURE_DIM;
use crate::error::{Result, VapError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub channel_layers: usize,
    pub cross_layers: usize,
    pub ffn_mult: usize,
    pub frame_rate: u32,
    pub embed_dim: usize,
    pub window_s: f64,
    pub dropout: f64,
    /// Width of the per-frame input features.
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 4,
            channel_layers: 1,
            cross_layers: 3,
            ffn_mult: 4,
            frame_rate: 50,
            embed_dim: 1792,
            window_s: 20.0,
            dropout: 0.1,
            feature_dim: FEATURE_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(VapError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ffn_mult == 0 || self.embed_dim == 0 || self.feature_dim == 0 {
            return err("ffn_mult, embed_dim and feature_dim must be positive".into());
        }
        let frames = self.window_s * self.frame_rate as f64;
        if self.window_s <= 0.0 || (frames - frames.round()).abs() > 1e-9 {
            return err(format!(
                "window of {} s is not a whole number of frames at {} Hz",
                self.window_s, self.frame_rate
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn window_frames(&self) -> usize {
        (self.window_s * self.frame_rate as f64).round() as usize
    }

    /// Canonical text form stored in checkpoints.
    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| VapError::Format(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
