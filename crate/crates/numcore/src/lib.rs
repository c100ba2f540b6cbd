//! Small dense-tensor library with reverse-mode differentiation, sized for
//! training compact causal transformers on a CPU.
//!
//! All ops are eager and recorded on a [`Tape`]; see [`Tape::backward`].

pub mod adam;
mod attention;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod real;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState, ParamStore};
pub use error::{NumError, Result};
pub use nn::{causal_multihead_attention, AttentionWeights, Linear};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Softmax of a plain slice, outside any tape.
pub fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = x.iter().map(|&v| (v - mx).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
