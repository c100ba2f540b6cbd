use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vapp_numcore::{
    causal_multihead_attention, AttentionWeights, Linear, ParamStore, Real, Tape, Tensor, Var,
};

use super::config::ModelConfig;
use crate::codebook::{state_swap_map, Aggregator, BinConfig, Horizon, NUM_STATES};
use crate::error::{Result, VapError};
use crate::seed::derive_seed;

const LN_EPS: f64 = 1e-5;

/// Whether a forward pass records a training step.
pub enum Mode<'a> {
    Eval,
    /// Parameters track gradients and dropout masks are drawn from the rng.
    Train(&'a mut ChaCha8Rng),
}

/// Handles to the network's outputs on a tape.
#[derive(Debug, Clone)]
pub struct Graph {
    pub params: BTreeMap<String, Var>,
    /// `[T, 256]`
    pub vap_logits: Var,
    /// `[T, 2]`
    pub vad_logits: Var,
    /// Per channel `[T, E]`.
    pub prompt_recon: [Var; 2],
}

/// Evaluated outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs<F: Real> {
    pub vap_logits: Tensor<F>,
    pub vad_logits: Tensor<F>,
    pub prompt_recon: [Tensor<F>; 2],
    pub p_now: Vec<[f64; 2]>,
    pub p_future: Vec<[f64; 2]>,
}

impl<F: Real> ModelOutputs<F> {
    pub fn frames(&self) -> usize {
        self.vap_logits.rows()
    }

    fn from_graph(tape: &Tape<F>, g: &Graph) -> Self {
        let vap_logits = tape.value(g.vap_logits).clone();
        let agg = Aggregator::new(&BinConfig::default());
        let (mut p_now, mut p_future) = (Vec::new(), Vec::new());
        let mut probs = vec![0.0f64; NUM_STATES];
        for t in 0..vap_logits.rows() {
            let row = vap_logits.row(t);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let mut z = 0.0;
            for (p, x) in probs.iter_mut().zip(row) {
                *p = (x.as_f64() - mx).exp();
                z += *p;
            }
            probs.iter_mut().for_each(|p| *p /= z);
            let (a, b) = agg.aggregate(&probs, Horizon::Now);
            p_now.push([a, b]);
            let (a, b) = agg.aggregate(&probs, Horizon::Future);
            p_future.push([a, b]);
        }
        Self {
            vap_logits,
            vad_logits: tape.value(g.vad_logits).clone(),
            prompt_recon: [
                tape.value(g.prompt_recon[0]).clone(),
                tape.value(g.prompt_recon[1]).clone(),
            ],
            p_now,
            p_future,
        }
    }
}

/// Parameter names and shapes for `cfg`, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (d, e, f) = (cfg.d_model, cfg.embed_dim, cfg.feature_dim);
    let ffn = d * cfg.ffn_mult;
    let mut s = BTreeMap::new();
    let mut linear = |name: String, din: usize, dout: usize| {
        s.insert(format!("{name}.w"), vec![din, dout]);
        s.insert(format!("{name}.b"), vec![dout]);
    };
    linear("enc.proj".into(), f, d);
    linear("prompt.proj".into(), e, d);
    linear("fuse1".into(), 2 * d, d);
    linear("fuse2".into(), 2 * d, d);
    for i in 0..cfg.channel_layers {
        for p in ["q", "k", "v", "o"] {
            linear(format!("chan.{i}.attn.{p}"), d, d);
        }
        linear(format!("chan.{i}.ffn.in"), d, ffn);
        linear(format!("chan.{i}.ffn.out"), ffn, d);
    }
    for i in 0..cfg.cross_layers {
        for block in ["self", "cross"] {
            for p in ["q", "k", "v", "o"] {
                linear(format!("cross.{i}.{block}.{p}"), d, d);
            }
        }
        linear(format!("cross.{i}.ffn.in"), d, ffn);
        linear(format!("cross.{i}.ffn.out"), ffn, d);
    }
    linear("head.vap".into(), d, NUM_STATES);
    linear("head.vad".into(), d, 1);
    linear("head.prompt".into(), d, e);
    let mut norms: Vec<String> = vec!["final.ln".into()];
    for i in 0..cfg.channel_layers {
        norms.extend([format!("chan.{i}.ln1"), format!("chan.{i}.ln2")]);
    }
    for i in 0..cfg.cross_layers {
        norms.extend((1..=3).map(|k| format!("cross.{i}.ln{k}")));
    }
    for n in norms {
        s.insert(format!("{n}.g"), vec![d]);
        s.insert(format!("{n}.b"), vec![d]);
    }
    s
}

/// Sinusoidal position table `[t, d]`.
pub fn positional_encoding<F: Real>(t: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for j in 0..d {
            let rate = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            data.push(F::from_f64(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(&[t, d], data).expect("shape")
}

/// The prompt-conditioned two-channel VAP network.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVap<F: Real> {
    config: ModelConfig,
    params: ParamStore<F>,
}

impl<F: Real> PromptVap<F> {
    /// Random initialization; each tensor draws from its own name-derived seed.
    /// The VAP head starts at zero so the initial state distribution is uniform.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".g") {
                vec![1.0; n]
            } else if name.ends_with(".b") || name.starts_with("head.vap") {
                vec![0.0; n]
            } else {
                let std = (shape[0] as f64).powf(-0.5);
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::from_f64(&shape, &data)?);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(VapError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(VapError::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(VapError::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Casts every parameter to another precision.
    pub fn cast<G: Real>(&self) -> PromptVap<G> {
        PromptVap {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records the network on `tape` for per-frame features `[T, feature_dim]`
    /// of both channels and their prompt vectors.
    pub fn graph(
        &self,
        tape: &mut Tape<F>,
        features: [&Tensor<F>; 2],
        prompts: [&[F]; 2],
        mode: Mode<'_>,
    ) -> Result<Graph> {
        let cfg = &self.config;
        let (ta, tb) = (features[0].rows(), features[1].rows());
        if ta != tb {
            return Err(VapError::Alignment(ta, tb));
        }
        if ta == 0 {
            return Err(VapError::Window("input has no frames".into()));
        }
        for f in features {
            if f.shape().len() != 2 || f.cols() != cfg.feature_dim {
                return Err(VapError::Config(format!(
                    "features of shape {:?}, model expects width {}",
                    f.shape(),
                    cfg.feature_dim
                )));
            }
        }
        for p in prompts {
            if p.len() != cfg.embed_dim {
                return Err(VapError::Config(format!(
                    "prompt embedding has {} dims, model expects {}",
                    p.len(),
                    cfg.embed_dim
                )));
            }
        }
        let (train, mut rng) = match mode {
            Mode::Eval => (false, None),
            Mode::Train(r) => (true, Some(r)),
        };
        let params: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if train {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        let mut b = Builder {
            tape,
            params: &params,
            heads: cfg.heads,
            dropout: if train { cfg.dropout } else { 0.0 },
            rng: rng.as_deref_mut(),
        };
        let t = ta;
        let pe = b.tape.constant(positional_encoding(t, cfg.d_model));

        let mut streams = Vec::with_capacity(2);
        for s in 0..2 {
            let x = b.tape.constant(features[s].clone());
            let x = b.linear("enc.proj", x)?;
            let p = b
                .tape
                .constant(Tensor::new(&[cfg.embed_dim], prompts[s].to_vec())?);
            let p = b.linear("prompt.proj", p)?;
            let prompt_rows = b.tape.broadcast_rows(p, t)?;
            let x = b.fuse("fuse1", x, prompt_rows)?;
            let mut x = b.tape.add(x, pe)?;
            for i in 0..cfg.channel_layers {
                x = b.channel_block(i, x)?;
            }
            streams.push(b.fuse("fuse2", x, prompt_rows)?);
        }
        let (mut xa, mut xb) = (streams[0], streams[1]);
        for i in 0..cfg.cross_layers {
            (xa, xb) = b.cross_block(i, xa, xb)?;
        }
        let out_a = b.layer_norm("final.ln", xa)?;
        let out_b = b.layer_norm("final.ln", xb)?;

        // The joint head reads [out_A | out_B] through [U ; U·P], where P
        // exchanges the speakers' halves of each state, so that swapping the
        // channels permutes the states exactly.
        let swap = state_swap_map();
        let u = params["head.vap.w"];
        let bias = params["head.vap.b"];
        let ya = b.tape.matmul(out_a, u)?;
        let yb = b.tape.matmul(out_b, u)?;
        let yb = b.tape.gather_cols(yb, swap.clone())?;
        let logits = b.tape.add(ya, yb)?;
        let bias_swapped = b.tape.gather_cols(bias, swap)?;
        let bias = b.tape.add(bias, bias_swapped)?;
        let vap_logits = b.tape.add_bias(logits, bias)?;

        let va = b.linear("head.vad", out_a)?;
        let vb = b.linear("head.vad", out_b)?;
        let vad_logits = b.tape.concat(va, vb)?;
        let prompt_recon = [
            b.linear("head.prompt", out_a)?,
            b.linear("head.prompt", out_b)?,
        ];
        Ok(Graph {
            params,
            vap_logits,
            vad_logits,
            prompt_recon,
        })
    }

    fn with_builder<T>(
        &self,
        f: impl FnOnce(&mut Builder<'_, '_, '_, F>) -> Result<Var>,
        extract: impl FnOnce(&Tape<F>, Var) -> T,
    ) -> Result<T> {
        let mut tape = Tape::new();
        let params: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let mut b = Builder {
            tape: &mut tape,
            params: &params,
            heads: self.config.heads,
            dropout: 0.0,
            rng: None,
        };
        let out = f(&mut b)?;
        Ok(extract(&tape, out))
    }

    /// Projection of one prompt embedding to model width.
    pub fn project_prompt(&self, prompt: &[F]) -> Result<Vec<F>> {
        if prompt.len() != self.config.embed_dim {
            return Err(VapError::Config(format!(
                "prompt embedding has {} dims, model expects {}",
                prompt.len(),
                self.config.embed_dim
            )));
        }
        self.with_builder(
            |b| {
                let p = b
                    .tape
                    .constant(Tensor::new(&[prompt.len()], prompt.to_vec())?);
                b.linear("prompt.proj", p)
            },
            |tape, v| tape.value(v).data().to_vec(),
        )
    }

    /// Fusion of projected prompt `prompt_vec` into `[T, d_model]` features at
    /// site 1 (after the encoder) or site 2 (after the channel transformer).
    pub fn fuse_prompt(
        &self,
        site: usize,
        features: &Tensor<F>,
        prompt_vec: &[F],
    ) -> Result<Tensor<F>> {
        let name = match site {
            1 => "fuse1",
            2 => "fuse2",
            _ => return Err(VapError::Config(format!("no fusion site {site}"))),
        };
        self.with_builder(
            |b| {
                let x = b.tape.constant(features.clone());
                let p = b
                    .tape
                    .constant(Tensor::new(&[prompt_vec.len()], prompt_vec.to_vec())?);
                let rows = b.tape.broadcast_rows(p, features.rows())?;
                b.fuse(name, x, rows)
            },
            |tape, v| tape.value(v).clone(),
        )
    }

    /// The channel-wise transformer on `[T, d_model]` input.
    pub fn channel_forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let layers = self.config.channel_layers;
        self.with_builder(
            |b| {
                let mut h = b.tape.constant(x.clone());
                for i in 0..layers {
                    h = b.channel_block(i, h)?;
                }
                Ok(h)
            },
            |tape, v| tape.value(v).clone(),
        )
    }

    /// The cross-channel transformer, before the final normalization.
    pub fn cross_forward(&self, a: &Tensor<F>, b_in: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        if a.rows() != b_in.rows() {
            return Err(VapError::Alignment(a.rows(), b_in.rows()));
        }
        let layers = self.config.cross_layers;
        let joined = self.with_builder(
            |b| {
                let mut xa = b.tape.constant(a.clone());
                let mut xb = b.tape.constant(b_in.clone());
                for i in 0..layers {
                    (xa, xb) = b.cross_block(i, xa, xb)?;
                }
                Ok(b.tape.concat(xa, xb)?)
            },
            |tape, v| tape.value(v).clone(),
        )?;
        let d = a.cols();
        let (mut da, mut db) = (Vec::new(), Vec::new());
        for r in 0..joined.rows() {
            da.extend_from_slice(&joined.row(r)[..d]);
            db.extend_from_slice(&joined.row(r)[d..]);
        }
        Ok((Tensor::new(a.shape(), da)?, Tensor::new(a.shape(), db)?))
    }

    /// Inference on precomputed features.
    pub fn forward_features(
        &self,
        features: [&Tensor<F>; 2],
        prompts: [&[F]; 2],
    ) -> Result<ModelOutputs<F>> {
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, features, prompts, Mode::Eval)?;
        Ok(ModelOutputs::from_graph(&tape, &g))
    }

    /// Inference over a long input by overlapping windows of `window_frames`
    /// advanced by `hop` frames. Frames past the first window are read from
    /// the tail of a later window, so each sees at least `window_frames - hop`
    /// frames of context.
    pub fn forward_long(
        &self,
        features: [&Tensor<F>; 2],
        prompts: [&[F]; 2],
        window_frames: usize,
        hop: usize,
    ) -> Result<ModelOutputs<F>> {
        let t = features[0].rows();
        if features[1].rows() != t {
            return Err(VapError::Alignment(t, features[1].rows()));
        }
        if hop == 0 || hop > window_frames {
            return Err(VapError::Config(format!(
                "hop {hop} must lie in 1..={window_frames}"
            )));
        }
        if t <= window_frames {
            return self.forward_features(features, prompts);
        }
        let slice = |f: &Tensor<F>, begin: usize, end: usize| -> Result<Tensor<F>> {
            let c = f.cols();
            Ok(Tensor::new(
                &[end - begin, c],
                f.data()[begin * c..end * c].to_vec(),
            )?)
        };
        let mut out: Option<ModelOutputs<F>> = None;
        let mut next = 0;
        loop {
            let begin = next.min(t - window_frames);
            let end = begin + window_frames;
            let fa = slice(features[0], begin, end)?;
            let fb = slice(features[1], begin, end)?;
            let o = self.forward_features([&fa, &fb], prompts)?;
            out = Some(match out {
                None => o,
                Some(acc) => {
                    let skip = acc.frames() - begin;
                    append_rows(acc, o, skip)?
                }
            });
            if end == t {
                break;
            }
            next += hop;
        }
        Ok(out.expect("at least one window"))
    }
}

fn append_rows<F: Real>(
    acc: ModelOutputs<F>,
    o: ModelOutputs<F>,
    skip: usize,
) -> Result<ModelOutputs<F>> {
    let cat = |a: &Tensor<F>, b: &Tensor<F>| -> Result<Tensor<F>> {
        let c = a.cols();
        let mut data = a.data().to_vec();
        data.extend_from_slice(&b.data()[skip * c..]);
        Ok(Tensor::new(&[data.len() / c, c], data)?)
    };
    let mut p_now = acc.p_now;
    p_now.extend_from_slice(&o.p_now[skip..]);
    let mut p_future = acc.p_future;
    p_future.extend_from_slice(&o.p_future[skip..]);
    Ok(ModelOutputs {
        vap_logits: cat(&acc.vap_logits, &o.vap_logits)?,
        vad_logits: cat(&acc.vad_logits, &o.vad_logits)?,
        prompt_recon: [
            cat(&acc.prompt_recon[0], &o.prompt_recon[0])?,
            cat(&acc.prompt_recon[1], &o.prompt_recon[1])?,
        ],
        p_now,
        p_future,
    })
}

struct Builder<'t, 'p, 'r, F: Real> {
    tape: &'t mut Tape<F>,
    params: &'p BTreeMap<String, Var>,
    heads: usize,
    dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<F: Real> Builder<'_, '_, '_, F> {
    fn p(&self, name: &str) -> Var {
        self.params[name]
    }

    fn lin(&self, name: &str) -> Linear {
        Linear {
            weight: self.p(&format!("{name}.w")),
            bias: self.p(&format!("{name}.b")),
        }
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        Ok(self.lin(name).forward(self.tape, x)?)
    }

    fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let (g, b) = (self.p(&format!("{name}.g")), self.p(&format!("{name}.b")));
        Ok(self.tape.layer_norm(x, g, b, F::from_f64(LN_EPS))?)
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.dropout == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let scale = F::from_f64(1.0 / keep);
        let mask = (0..self.tape.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        Ok(self.tape.mul_const(x, mask)?)
    }

    fn fuse(&mut self, name: &str, x: Var, prompt_rows: Var) -> Result<Var> {
        let cat = self.tape.concat(x, prompt_rows)?;
        self.linear(name, cat)
    }

    fn attention(&mut self, prefix: &str, q_in: Var, kv_in: Var) -> Result<Var> {
        let w = AttentionWeights {
            query: self.lin(&format!("{prefix}.q")),
            key: self.lin(&format!("{prefix}.k")),
            value: self.lin(&format!("{prefix}.v")),
            output: self.lin(&format!("{prefix}.o")),
        };
        let y = causal_multihead_attention(self.tape, q_in, kv_in, &w, self.heads)?;
        self.drop(y)
    }

    fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.in"), x)?;
        let h = self.tape.gelu(h);
        let y = self.linear(&format!("{prefix}.out"), h)?;
        self.drop(y)
    }

    fn residual(&mut self, x: Var, y: Var) -> Result<Var> {
        Ok(self.tape.add(x, y)?)
    }

    fn channel_block(&mut self, i: usize, x: Var) -> Result<Var> {
        let h = self.layer_norm(&format!("chan.{i}.ln1"), x)?;
        let y = self.attention(&format!("chan.{i}.attn"), h, h)?;
        let x = self.residual(x, y)?;
        let h = self.layer_norm(&format!("chan.{i}.ln2"), x)?;
        let y = self.ffn(&format!("chan.{i}.ffn"), h)?;
        self.residual(x, y)
    }

    fn cross_block(&mut self, i: usize, a: Var, b: Var) -> Result<(Var, Var)> {
        let mut xs = [a, b];
        for x in xs.iter_mut() {
            let h = self.layer_norm(&format!("cross.{i}.ln1"), *x)?;
            let y = self.attention(&format!("cross.{i}.self"), h, h)?;
            *x = self.residual(*x, y)?;
        }
        let ha = self.layer_norm(&format!("cross.{i}.ln2"), xs[0])?;
        let hb = self.layer_norm(&format!("cross.{i}.ln2"), xs[1])?;
        let ya = self.attention(&format!("cross.{i}.cross"), ha, hb)?;
        let yb = self.attention(&format!("cross.{i}.cross"), hb, ha)?;
        xs[0] = self.residual(xs[0], ya)?;
        xs[1] = self.residual(xs[1], yb)?;
        for x in xs.iter_mut() {
            let h = self.layer_norm(&format!("cross.{i}.ln3"), *x)?;
            let y = self.ffn(&format!("cross.{i}.ffn"), h)?;
            *x = self.residual(*x, y)?;
        }
        Ok((xs[0], xs[1]))
    }
}
