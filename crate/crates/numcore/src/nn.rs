//! Layer-level compositions of tape ops.

use crate::error::{NumError, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Multi-head attention where frame `t` of the output sees frames `<= t` of
/// `kv_in` only. Self-attention is the case `kv_in == q_in`.
pub fn causal_multihead_attention<F: Real>(
    tape: &mut Tape<F>,
    q_in: Var,
    kv_in: Var,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(q_in).cols();
    if heads == 0 || d % heads != 0 {
        return Err(NumError::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let (qs, ks) = (tape.value(q_in).shape(), tape.value(kv_in).shape());
    if qs != ks {
        return Err(NumError::Dimension {
            op: "causal_multihead_attention",
            lhs: qs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let q = weights.query.forward(tape, q_in)?;
    let k = weights.key.forward(tape, kv_in)?;
    let v = weights.value.forward(tape, kv_in)?;
    let ctx = tape.causal_attention(q, k, v, heads)?;
    weights.output.forward(tape, ctx)
}
