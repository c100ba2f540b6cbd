//! Prompt-conditioned voice activity projection network.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod loss;
pub mod network;

use vapp_numcore::Real;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use encoder::Filterbank;
pub use loss::{loss, loss_on_tape, FrameLabels, LossVars, Losses};
pub use network::{Graph, Mode, ModelOutputs, PromptVap};

use crate::error::{Result, VapError};

/// Unit-norm sentence vector and the text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub text: String,
    pub vector: Vec<f32>,
}

impl PromptEmbedding {
    pub fn new(text: impl Into<String>, vector: Vec<f32>) -> Result<Self> {
        let norm = vector
            .iter()
            .map(|x| (*x as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(VapError::Validation(format!(
                "prompt embedding norm {norm:.6} is not 1 within 1e-3"
            )));
        }
        Ok(Self {
            text: text.into(),
            vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cast<F: Real>(&self) -> Vec<F> {
        self.vector.iter().map(|&x| F::from_f64(x as f64)).collect()
    }
}

impl<F: Real> PromptVap<F> {
    /// Full pipeline from two equally long 16 kHz channels.
    pub fn forward(
        &self,
        filterbank: &Filterbank,
        channels: [&[f32]; 2],
        prompts: [&PromptEmbedding; 2],
    ) -> Result<ModelOutputs<F>> {
        if channels[0].len() != channels[1].len() {
            return Err(VapError::Alignment(channels[0].len(), channels[1].len()));
        }
        let fa = filterbank.features::<F>(channels[0])?;
        let fb = filterbank.features::<F>(channels[1])?;
        let (pa, pb) = (prompts[0].cast::<F>(), prompts[1].cast::<F>());
        self.forward_features([&fa, &fb], [&pa, &pb])
    }
}
