mod support;

use support::{gradcheck, random_tensor};
use vapp_numcore::{AdamConfig, AdamState, NumError, ParamStore, Tape, Tensor, Var};

#[test]
fn square_at_three_has_gradient_six() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 6.0);
}

#[test]
fn softmax_then_cross_entropy_pipeline() {
    let x = random_tensor::<f64>(&[4, 6], 1);
    let w = random_tensor::<f64>(&[6, 6], 2);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let p = t.softmax(h);
        t.cross_entropy(p, &[0, 5, 2, 2]).unwrap()
    };
    assert!(gradcheck(&f, &[x, w], 1e-5) < 1e-5);
}

#[test]
fn repeated_backward_accumulates_exactly() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random_tensor(&[3, 3], 3));
    let w = tape.param(random_tensor(&[3, 2], 4));
    let y = tape.matmul(x, w).unwrap();
    let y = tape.gelu(y);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let once = tape.grad(w).unwrap();
    tape.backward(s).unwrap();
    let twice = tape.grad(w).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(NumError::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random_tensor(&[2, 2], 5));
    let c = tape.constant(random_tensor(&[2, 2], 6));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().data(), tape.value(c).data());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(random_tensor(&[90, 8], 7));
        let w = tape.param(random_tensor(&[8, 8], 8));
        let q = tape.matmul(x, w).unwrap();
        let a = tape.causal_attention(q, x, x, 4).unwrap();
        let l = tape.cross_entropy(a, &[3; 90]).unwrap();
        tape.backward(l).unwrap();
        (tape.grad(x).unwrap(), tape.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}

fn single(name: &str, value: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert(name.to_string(), Tensor::scalar(value));
    p
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut params = single("w", 0.5);
    let grads = single("w", 1.0);
    let mut adam = AdamState::new(AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    adam.step(&mut params, &grads).unwrap();
    // m̂ = 1, v̂ = 1 after bias correction, so Δ = -lr / (1 + eps).
    let delta = params["w"].item() - 0.5;
    assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_zero_gradient_leaves_parameter() {
    let mut params = single("w", -1.25);
    let grads = single("w", 0.0);
    let mut adam = AdamState::new(AdamConfig::default());
    adam.step(&mut params, &grads).unwrap();
    assert_eq!(params["w"].item(), -1.25);
}

#[test]
fn adam_moments_follow_closed_form_ema() {
    let g = 0.3;
    let mut params = single("w", 0.0);
    let grads = single("w", g);
    let mut adam = AdamState::new(AdamConfig::default());
    adam.step(&mut params, &grads).unwrap();
    adam.step(&mut params, &grads).unwrap();
    assert_eq!(adam.step_count(), 2);
    // EMA of a constant: m_n = (1 - β1^n) g, v_n = (1 - β2^n) g².
    let m = adam.first_moment("w").unwrap()[0];
    let v = adam.second_moment("w").unwrap()[0];
    assert!((m - (1.0 - 0.9f64.powi(2)) * g).abs() < 1e-15);
    assert!((v - (1.0 - 0.999f64.powi(2)) * g * g).abs() < 1e-15);
    // Both bias-corrected moments equal g, so each step moves by lr·g/(|g|+eps).
    let expect = -2.0 * 1e-4 * g / (g + 1e-8);
    assert!((params["w"].item() - expect).abs() < 1e-12);
}

#[test]
fn adam_rejects_nan_without_mutating() {
    let mut params = single("w", 1.0);
    let grads = single("w", f64::NAN);
    let mut adam = AdamState::new(AdamConfig::default());
    match adam.step(&mut params, &grads) {
        Err(NumError::NonFiniteGradient { name, .. }) => assert_eq!(name, "w"),
        other => panic!("expected NaN diagnostic, got {other:?}"),
    }
    assert_eq!(params["w"].item(), 1.0);
    assert_eq!(adam.step_count(), 0);
}
