//! Prompt-conditioned turn-taking prediction: voice-activity codebook,
//! network, synthetic dialogue corpus, prompt generation, training and
//! evaluation.

pub mod audio;
pub mod codebook;
pub mod dialoguesim;
pub mod error;
pub mod model;
pub mod promptgen;
pub mod seed;
pub mod traineval;
pub mod va;

pub use error::{Result, VapError};
