//! Fused multi-head causal attention kernel.
//!
//! Scores are computed block-row by block-row so that only the lower
//! triangle (plus the diagonal blocks) is ever multiplied. Row `i` of the
//! output reads keys and values at positions `<= i` only; masked
//! probabilities are stored as exact zeros.

use crate::linalg::{gemm, MatMut, MatRef};
use crate::real::Real;

const BLOCK: usize = 64;

fn blocks(t: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..t.div_ceil(BLOCK)).map(move |b| (b * BLOCK, ((b + 1) * BLOCK).min(t)))
}

/// Forward pass. `q`, `k`, `v` are `[t × d]` row-major; returns the
/// `[t × d]` output and the per-head probability matrices (`heads × t × t`).
pub fn forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::from_f64(dh as f64).sqrt();
    let mut out = vec![F::zero(); t * d];
    let mut probs = vec![F::zero(); heads * t * t];
    let qm = MatRef::dense(q, t, d);
    let km = MatRef::dense(k, t, d);
    let vm = MatRef::dense(v, t, d);
    for h in 0..heads {
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        for (r0, r1) in blocks(t) {
            gemm(
                scale,
                qm.block(r0, h * dh, r1 - r0, dh),
                km.block(0, h * dh, r1, dh).t(),
                F::zero(),
                MatMut::dense(&mut *p, t, t).block(r0, 0, r1 - r0, r1),
            );
            for i in r0..r1 {
                let row = &mut p[i * t..i * t + r1];
                let (live, masked) = row.split_at_mut(i + 1);
                let mx = live.iter().copied().fold(F::neg_infinity(), F::max);
                for x in live.iter_mut() {
                    *x = (*x - mx).fast_exp();
                }
                let inv = F::one() / live.iter().copied().sum::<F>();
                for x in live.iter_mut() {
                    *x *= inv;
                }
                masked.fill(F::zero());
            }
        }
    }
    for h in 0..heads {
        let pm = MatRef::dense(&probs[h * t * t..(h + 1) * t * t], t, t);
        for (r0, r1) in blocks(t) {
            gemm(
                F::one(),
                pm.block(r0, 0, r1 - r0, r1),
                vm.block(0, h * dh, r1, dh),
                F::zero(),
                MatMut::dense(&mut out, t, d).block(r0, h * dh, r1 - r0, dh),
            );
        }
    }
    (out, probs)
}

/// Backward pass. Accumulates into `dq`, `dk`, `dv` (each `[t × d]`).
#[allow(clippy::too_many_arguments)]
pub fn backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    t: usize,
    d: usize,
    heads: usize,
    dq: Option<&mut [F]>,
    dk: Option<&mut [F]>,
    dv: Option<&mut [F]>,
) {
    let dh = d / heads;
    let scale = F::one() / F::from_f64(dh as f64).sqrt();
    let qm = MatRef::dense(q, t, d);
    let km = MatRef::dense(k, t, d);
    let vm = MatRef::dense(v, t, d);
    let gm = MatRef::dense(dout, t, d);
    let mut dq = dq;
    let mut dk = dk;
    let mut dv = dv;
    let mut ds = vec![F::zero(); t * t];
    for h in 0..heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        let pm = MatRef::dense(p, t, t);
        if let Some(dv) = dv.as_deref_mut() {
            for (c0, c1) in blocks(t) {
                gemm(
                    F::one(),
                    pm.block(c0, c0, t - c0, c1 - c0).t(),
                    gm.block(c0, h * dh, t - c0, dh),
                    F::one(),
                    MatMut::dense(&mut *dv, t, d).block(c0, h * dh, c1 - c0, dh),
                );
            }
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        for (r0, r1) in blocks(t) {
            gemm(
                F::one(),
                gm.block(r0, h * dh, r1 - r0, dh),
                vm.block(0, h * dh, r1, dh).t(),
                F::zero(),
                MatMut::dense(&mut ds, t, t).block(r0, 0, r1 - r0, r1),
            );
            for i in r0..r1 {
                let prow = &p[i * t..i * t + i + 1];
                let row = &mut ds[i * t..i * t + r1];
                let dot: F = prow.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
                let (live, masked) = row.split_at_mut(i + 1);
                for (x, &pij) in live.iter_mut().zip(prow) {
                    *x = pij * (*x - dot) * scale;
                }
                masked.fill(F::zero());
            }
        }
        let sm = MatRef::dense(&ds, t, t);
        if let Some(dq) = dq.as_deref_mut() {
            for (r0, r1) in blocks(t) {
                gemm(
                    F::one(),
                    sm.block(r0, 0, r1 - r0, r1),
                    km.block(0, h * dh, r1, dh),
                    F::one(),
                    MatMut::dense(&mut *dq, t, d).block(r0, h * dh, r1 - r0, dh),
                );
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            for (c0, c1) in blocks(t) {
                gemm(
                    F::one(),
                    sm.block(c0, c0, t - c0, c1 - c0).t(),
                    qm.block(c0, h * dh, t - c0, dh),
                    F::one(),
                    MatMut::dense(&mut *dk, t, d).block(c0, h * dh, c1 - c0, dh),
                );
            }
        }
    }
}
