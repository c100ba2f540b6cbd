//! Minibatch Adam training on prepared windows.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;
use vapp_numcore::{AdamConfig, AdamState, NumError, ParamStore, Real, Tape, Tensor};

use super::data::{load_sessions, make_examples, Ablation, EmbeddingTable, Example};
use crate::dialoguesim::Manifest;
use crate::error::{Result, VapError};
use crate::model::{
    loss, loss_on_tape, Checkpoint, Filterbank, Losses, Mode, ModelConfig, PromptVap,
};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Where the best-validation checkpoint is written, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
    pub ablation: Ablation,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_path: None,
            ablation: Ablation::None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(VapError::Config(format!(
                "epochs ({}) and batch_size ({}) must be at least 1",
                self.epochs, self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(VapError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossRecord,
    pub validation: LossRecord,
}

/// Serializable mirror of [`Losses`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub vap: f64,
    pub vad: f64,
    pub prompt: f64,
}

impl From<Losses> for LossRecord {
    fn from(l: Losses) -> Self {
        Self {
            total: l.total,
            vap: l.vap,
            vad: l.vad,
            prompt: l.prompt,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub curves: Vec<EpochRecord>,
}

/// Per-epoch curves as CSV.
pub fn curves_csv(curves: &[EpochRecord]) -> String {
    let mut s = String::from(
        "epoch,train_total,train_vap,train_vad,train_prompt,val_total,val_vap,val_vad,val_prompt\n",
    );
    for r in curves {
        let (t, v) = (r.train, r.validation);
        s.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            r.epoch, t.total, t.vap, t.vad, t.prompt, v.total, v.vap, v.vad, v.prompt
        ));
    }
    s
}

/// Frame-weighted mean losses over `examples` in inference mode, with the
/// prompts replaced according to `ablation`.
pub fn eval_vap_loss<F: Real>(
    model: &PromptVap<F>,
    examples: &[Example],
    ablation: Ablation,
    seed: u64,
) -> Result<Losses> {
    if examples.is_empty() {
        return Err(VapError::Evaluation("no windows to evaluate".into()));
    }
    let refs: Vec<_> = examples.iter().map(|e| &e.prompts).collect();
    let prompts = ablation.apply(&refs, derive_seed(seed, "eval-prompts"));
    let per: Vec<(Losses, usize, usize)> = examples
        .par_iter()
        .zip(prompts.par_iter())
        .map(|(ex, p)| {
            let (fa, fb) = (ex.features[0].cast::<F>(), ex.features[1].cast::<F>());
            let (pa, pb) = (cast_vec::<F>(&p[0]), cast_vec::<F>(&p[1]));
            let out = model.forward_features([&fa, &fb], [&pa, &pb])?;
            let l = loss(&out, &ex.labels, [&pa, &pb])?;
            Ok((l, ex.labels.vap.len(), out.frames()))
        })
        .collect::<Result<_>>()?;
    let (mut vap, mut vad, mut prompt) = (0.0, 0.0, 0.0);
    let (mut nv, mut nf) = (0usize, 0usize);
    for (l, v, f) in &per {
        vap += l.vap * *v as f64;
        vad += l.vad * *f as f64;
        prompt += l.prompt * *f as f64;
        nv += v;
        nf += f;
    }
    let (vap, vad, prompt) = (vap / nv as f64, vad / nf as f64, prompt / nf as f64);
    Ok(Losses {
        total: vap + vad + prompt,
        vap,
        vad,
        prompt,
    })
}

pub(crate) fn cast_vec<F: Real>(v: &[f32]) -> Vec<F> {
    v.iter().map(|&x| F::from_f64(x as f64)).collect()
}

fn mean_losses(all: &[Losses]) -> Losses {
    let n = all.len() as f64;
    let s = |f: fn(&Losses) -> f64| all.iter().map(f).sum::<f64>() / n;
    Losses {
        total: s(|l| l.total),
        vap: s(|l| l.vap),
        vad: s(|l| l.vad),
        prompt: s(|l| l.prompt),
    }
}

/// Gradient and losses of one window.
fn window_step<F: Real>(
    model: &PromptVap<F>,
    ex: &Example,
    prompts: &[Vec<f32>; 2],
    rng_seed: u64,
) -> Result<(ParamStore<F>, Losses)> {
    let (fa, fb) = (ex.features[0].cast::<F>(), ex.features[1].cast::<F>());
    let (pa, pb) = (cast_vec::<F>(&prompts[0]), cast_vec::<F>(&prompts[1]));
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut tape = Tape::new();
    let g = model.graph(&mut tape, [&fa, &fb], [&pa, &pb], Mode::Train(&mut rng))?;
    let lv = loss_on_tape(&mut tape, &g, &ex.labels, [&pa, &pb])?;
    let losses = lv.values(&tape);
    if !losses.total.is_finite() {
        return Ok((ParamStore::new(), losses));
    }
    tape.backward(lv.total)?;
    let grads = g
        .params
        .iter()
        .map(|(name, &v)| {
            let grad = tape
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            (name.clone(), grad)
        })
        .collect();
    Ok((grads, losses))
}

fn save_checkpoint(model_ckpt: &Checkpoint, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => model_ckpt.save(p),
        None => Ok(()),
    }
}

/// Trains on `train` windows, selecting the epoch with the lowest
/// validation loss. Bitwise reproducible for a given config in 64-bit mode.
pub fn train_examples(
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(VapError::Dataset(format!(
            "need training and validation windows, got {} and {}",
            train.len(),
            validation.len()
        )));
    }
    match cfg.precision {
        Precision::F32 => run::<f32>(train, validation, cfg),
        Precision::F64 => run::<f64>(train, validation, cfg),
    }
}

fn run<F: Real>(
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut model = PromptVap::<F>::init(cfg.model.clone(), derive_seed(cfg.seed, "init"))?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order"));
    let ckpt_path = cfg.checkpoint_path.as_deref();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, order_rng.random_range(0..=i));
        }
        let mut seen = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let refs: Vec<_> = batch.iter().map(|&i| &train[i].prompts).collect();
            let prompts = cfg
                .ablation
                .apply(&refs, derive_seed(cfg.seed, &format!("shuffle/{step}")));
            let results: Vec<_> = batch
                .par_iter()
                .zip(prompts.par_iter())
                .map(|(&i, p)| {
                    window_step(
                        &model,
                        &train[i],
                        p,
                        derive_seed(cfg.seed, &format!("dropout/{step}/{i}")),
                    )
                })
                .collect::<Result<_>>()?;
            let mut sum: Option<ParamStore<F>> = None;
            for (grads, losses) in &results {
                if !losses.total.is_finite() {
                    return Err(diverged(
                        &model,
                        best.as_ref().map(|b| &b.2),
                        ckpt_path,
                        epoch,
                        step,
                        "loss is not finite",
                    ));
                }
                seen.push(*losses);
                match sum.as_mut() {
                    None => sum = Some(grads.clone()),
                    Some(acc) => {
                        for (name, g) in grads {
                            let a = acc.get_mut(name).expect("same parameter set");
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("nonempty batch");
            let inv = F::one() / F::from_f64(batch.len() as f64);
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            match adam.step(model.params_mut(), &grads) {
                Ok(()) => {}
                Err(NumError::NonFiniteGradient { name, .. }) => {
                    let msg = format!("gradient of {name} is not finite");
                    return Err(diverged(
                        &model,
                        best.as_ref().map(|b| &b.2),
                        ckpt_path,
                        epoch,
                        step,
                        &msg,
                    ));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let val = eval_vap_loss(&model, validation, cfg.ablation, cfg.seed)?;
        let record = EpochRecord {
            epoch,
            train: mean_losses(&seen).into(),
            validation: val.into(),
        };
        info!(
            epoch,
            train_vap = record.train.vap,
            val_vap = val.vap,
            val_total = val.total,
            "epoch finished"
        );
        curves.push(record);
        if !val.total.is_finite() {
            return Err(diverged(
                &model,
                best.as_ref().map(|b| &b.2),
                ckpt_path,
                epoch,
                step,
                "validation loss is not finite",
            ));
        }
        if best.as_ref().is_none_or(|b| val.total < b.0) {
            let ckpt = Checkpoint::from_model(&model);
            save_checkpoint(&ckpt, ckpt_path)?;
            best = Some((val.total, epoch, ckpt));
        }
    }
    let (_, best_epoch, checkpoint) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        curves,
    })
}

/// Keeps the last good parameters on disk and builds the error.
fn diverged<F: Real>(
    model: &PromptVap<F>,
    best: Option<&Checkpoint>,
    path: Option<&Path>,
    epoch: usize,
    step: u64,
    what: &str,
) -> VapError {
    if best.is_none() {
        if let Err(e) = save_checkpoint(&Checkpoint::from_model(model), path) {
            return e;
        }
    }
    VapError::Divergence(format!("{what} at epoch {epoch}, step {step}"))
}

/// Loads the train and validation splits of a corpus and trains on them.
pub fn train(corpus_dir: &Path, table: &EmbeddingTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let manifest = Manifest::load(corpus_dir)?;
    if manifest.splits.train.is_empty() || manifest.splits.validation.is_empty() {
        return Err(VapError::Dataset(
            "manifest needs train and validation sessions".into(),
        ));
    }
    let fb = Filterbank::new();
    let windows = |ids: &[String]| -> Result<Vec<Example>> {
        let sessions = load_sessions(corpus_dir, ids)?;
        let per: Vec<Vec<Example>> = sessions
            .par_iter()
            .map(|s| make_examples(s, table, &fb, &cfg.model))
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    };
    let tr = windows(&manifest.splits.train)?;
    let va = windows(&manifest.splits.validation)?;
    train_examples(&tr, &va, cfg)
}
