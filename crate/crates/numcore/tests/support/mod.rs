//! Central finite-difference oracle, independent of the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vapp_numcore::{Real, Tape, Tensor, Var};

pub fn random_tensor<F: Real>(shape: &[usize], seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

const ZERO_GRAD: f64 = 1e-4;

/// Evaluates `f` with all inputs as gradient-tracking leaves.
fn eval<F: Real>(f: &dyn Fn(&mut Tape<F>, &[Var]) -> Var, inputs: &[Tensor<F>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item().as_f64()
}

/// Returns the worst norm-relative error `|a - n| / max(|a|, |n|)` over all
/// inputs, comparing tape gradients against central differences.
pub fn gradcheck<F: Real>(
    f: &dyn Fn(&mut Tape<F>, &[Var]) -> Var,
    inputs: &[Tensor<F>],
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = input.data()[j].as_f64();
            plus[i].data_mut()[j] = F::from_f64(x + h);
            minus[i].data_mut()[j] = F::from_f64(x - h);
            numeric[j] = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        // Gradients that vanish analytically (e.g. key biases under softmax
        // shift invariance) are compared in absolute terms.
        let rel = if denom < ZERO_GRAD {
            diff / ZERO_GRAD
        } else {
            diff / denom
        };
        worst = worst.max(rel);
    }
    worst
}

#[allow(dead_code)]
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
