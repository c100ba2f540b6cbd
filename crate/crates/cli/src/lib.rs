//! The `vapp` command line: corpus generation, prompts, training,
//! evaluation and simulation, each writing under `--out`.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use vapp_core::audio::read_wav;
use vapp_core::dialoguesim::{build_corpus, energy_vad, Manifest};
use vapp_core::model::{Checkpoint, Filterbank, PromptEmbedding};
use vapp_core::promptgen::llm::API_KEY_VAR;
use vapp_core::promptgen::{
    compute_stats, embed_text, llm_prompts, store_embeddings, template_prompts, LlmEndpoint,
    PromptPair, TimingRecord,
};
use vapp_core::traineval::{
    curves_csv, eval_shift_hold, eval_vap_loss, load_embedding_table, load_sessions, make_examples,
    prepare_session, simulate_system, train, utterances_from_activity, write_timeline, Ablation,
    EvalReport, OnsetStats, Precision, Simulation,
};
use vapp_core::va::VaStream;
use vapp_core::{Result, VapError};
use vapp_numcore::Real;

pub use config::{Metric, PromptMode, RunConfig};

pub const PROMPTS_FILE: &str = "prompts.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.pemb";
pub const CHECKPOINT_FILE: &str = "checkpoint.vapp";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "report.toml";
pub const ONSETS_FILE: &str = "onsets.toml";

#[derive(Parser, Debug)]
#[command(
    name = "vapp",
    version,
    about = "Prompt-conditioned turn-taking prediction pipelines"
)]
struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with a train/validation/test manifest.
    GenData(GenData),
    /// Write impression and prompt text for every session.
    GenPrompts(GenPrompts),
    /// Embed the prompt texts.
    EmbedPrompts(EmbedPrompts),
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run a checkpoint on user audio against a silent system channel.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args, Debug)]
struct GenPrompts {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// template or llm
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Debug)]
struct EmbedPrompts {
    /// prompts.json written by gen-prompts.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// none, zero_prompt or shuffle_prompt
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated: vap, shift_hold
    #[arg(long)]
    metrics: Option<String>,
    /// Prompt treatment the checkpoint was trained with.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    user_prompt: String,
    #[arg(long)]
    system_prompt: String,
    #[arg(long)]
    out: PathBuf,
    /// Channel of the WAV holding the user.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Also run with the two prompts exchanged.
    #[arg(long)]
    swap: bool,
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 1 on usage or validation errors, 2 on IO or
/// transport errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: --jobs: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData(a) => gen_data(&mut cfg, a),
        Command::GenPrompts(a) => gen_prompts(&mut cfg, a),
        Command::EmbedPrompts(a) => embed_prompts(&mut cfg, a),
        Command::Train(a) => train_cmd(&mut cfg, a),
        Command::Eval(a) => eval_cmd(&mut cfg, a),
        Command::Simulate(a) => simulate_cmd(&mut cfg, a),
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| VapError::io(out, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| VapError::io(path, e))
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(VapError::Config(format!(
            "--precision: expected f32 or f64, got '{other}'"
        ))),
    }
}

fn gen_data(cfg: &mut RunConfig, a: GenData) -> Result<()> {
    let c = &mut cfg.corpus;
    c.sessions = a.sessions.unwrap_or(c.sessions);
    c.seed = a.seed.unwrap_or(c.seed);
    c.duration_s = a.duration.unwrap_or(c.duration_s);
    if c.sessions == 0 {
        return Err(VapError::Config("--sessions must be at least 1".into()));
    }
    for s in &c.styles {
        s.params.validate()?;
    }
    create_out(&a.out)?;
    let m = build_corpus(c.sessions, &c.styles, c.duration_s, c.seed, &a.out)?;
    let sessions = c.sessions;
    cfg.echo(&a.out)?;
    println!(
        "{} sessions: {} train, {} validation, {} test",
        sessions,
        m.splits.train.len(),
        m.splits.validation.len(),
        m.splits.test.len()
    );
    Ok(())
}

fn all_ids(m: &Manifest) -> Vec<String> {
    let mut ids: Vec<String> = m
        .splits
        .train
        .iter()
        .chain(&m.splits.validation)
        .chain(&m.splits.test)
        .cloned()
        .collect();
    ids.sort();
    ids
}

fn gen_prompts(cfg: &mut RunConfig, a: GenPrompts) -> Result<()> {
    if let Some(m) = &a.mode {
        cfg.prompts.mode = match m.as_str() {
            "template" => PromptMode::Template,
            "llm" => PromptMode::Llm,
            other => {
                return Err(VapError::Config(format!(
                    "--mode: expected template or llm, got '{other}'"
                )))
            }
        };
    }
    let manifest = Manifest::load(&a.corpus)?;
    let ids = all_ids(&manifest);
    let record = |id: &String| -> Result<TimingRecord> {
        let va = VaStream::load(&Manifest::session_dir(&a.corpus, id).join("va.json"))?;
        Ok(TimingRecord::from_va(&va))
    };
    let pairs: Vec<PromptPair> = match cfg.prompts.mode {
        PromptMode::Template => ids
            .par_iter()
            .map(|id| Ok(template_prompts(&compute_stats(&record(id)?)?)))
            .collect::<Result<_>>()?,
        PromptMode::Llm => {
            let key = std::env::var(API_KEY_VAR).map_err(|_| {
                VapError::Config(format!(
                    "{API_KEY_VAR} is not set; use --mode template offline"
                ))
            })?;
            let mut endpoint = LlmEndpoint::new(&cfg.prompts.llm_url, &cfg.prompts.llm_model);
            endpoint.timeout = Duration::from_secs_f64(cfg.prompts.llm_timeout_s);
            ids.iter()
                .map(|id| llm_prompts(&record(id)?, &endpoint, &key))
                .collect::<Result<_>>()?
        }
    };
    let table: BTreeMap<&String, &PromptPair> = ids.iter().zip(&pairs).collect();
    create_out(&a.out)?;
    write(
        &a.out.join(PROMPTS_FILE),
        &serde_json::to_string_pretty(&table).expect("prompts serialize"),
    )?;
    cfg.echo(&a.out)?;
    println!("prompts for {} sessions", ids.len());
    Ok(())
}

fn embed_prompts(cfg: &mut RunConfig, a: EmbedPrompts) -> Result<()> {
    cfg.prompts.embed_dim = a.dim.unwrap_or(cfg.prompts.embed_dim);
    let text = std::fs::read_to_string(&a.prompts).map_err(|e| VapError::io(&a.prompts, e))?;
    let table: BTreeMap<String, PromptPair> = serde_json::from_str(&text)
        .map_err(|e| VapError::Format(format!("{}: {e}", a.prompts.display())))?;
    let mut entries = Vec::with_capacity(2 * table.len());
    for (id, pair) in &table {
        for ch in 0..2 {
            let e = embed_text(
                &pair.get(ch).prompt,
                cfg.prompts.embed_dim,
                cfg.prompts.embed_seed,
            )?;
            entries.push((vapp_core::traineval::prompt_key(id, ch), e.vector));
        }
    }
    create_out(&a.out)?;
    store_embeddings(&a.out.join(EMBEDDINGS_FILE), &entries)?;
    cfg.echo(&a.out)?;
    println!(
        "{} embeddings of dimension {}",
        entries.len(),
        cfg.prompts.embed_dim
    );
    Ok(())
}

fn train_cmd(cfg: &mut RunConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(s) = &a.ablation {
        t.ablation = Ablation::parse(s)?;
    }
    if let Some(s) = &a.precision {
        t.precision = parse_precision(s)?;
    }
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.seed = a.seed.unwrap_or(t.seed);
    t.validate()?;
    let table = load_embedding_table(&a.embeddings)?;
    create_out(&a.out)?;
    cfg.echo(&a.out)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_path = Some(a.out.join(CHECKPOINT_FILE));
    let outcome = train(&a.corpus, &table, &tc)?;
    write(&a.out.join(CURVES_FILE), &curves_csv(&outcome.curves))?;
    let best = &outcome.curves[outcome.best_epoch - 1];
    println!(
        "best epoch {}: validation L {:.4} (vap {:.4})",
        outcome.best_epoch, best.validation.total, best.validation.vap
    );
    Ok(())
}

fn eval_cmd(cfg: &mut RunConfig, a: EvalArgs) -> Result<()> {
    if let Some(m) = &a.metrics {
        cfg.eval.metrics = Metric::parse_list(m)?;
    }
    if let Some(s) = &a.ablation {
        cfg.train.ablation = Ablation::parse(s)?;
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let report = match cfg.train.precision {
        Precision::F32 => evaluate::<f32>(cfg, &a, &ckpt)?,
        Precision::F64 => evaluate::<f64>(cfg, &a, &ckpt)?,
    };
    create_out(&a.out)?;
    report.save(&a.out.join(REPORT_FILE))?;
    cfg.echo(&a.out)?;
    if let Some(l) = &report.losses {
        println!("test L_vap {:.4}", l.vap);
    }
    if let Some(s) = &report.shift_hold {
        println!("shift/hold balanced accuracy {:.4}", s.balanced_accuracy);
    }
    Ok(())
}

fn evaluate<F: Real>(cfg: &RunConfig, a: &EvalArgs, ckpt: &Checkpoint) -> Result<EvalReport> {
    let model = ckpt.to_model::<F>()?;
    let manifest = Manifest::load(&a.corpus)?;
    let table = load_embedding_table(&a.embeddings)?;
    let sessions = load_sessions(&a.corpus, &manifest.splits.test)?;
    if sessions.is_empty() {
        return Err(VapError::Dataset("the test split is empty".into()));
    }
    let fb = Filterbank::new();
    let seed = cfg.train.seed;
    let ablation = cfg.train.ablation;
    let mut report = EvalReport {
        model: ckpt.config.clone(),
        ablation,
        sessions: sessions.len(),
        losses: None,
        shift_hold_params: None,
        shift_hold: None,
        onsets: BTreeMap::new(),
    };
    if cfg.eval.metrics.contains(&Metric::Vap) {
        let windows: Vec<_> = sessions
            .par_iter()
            .map(|s| make_examples(s, &table, &fb, &ckpt.config))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        report.losses = Some(eval_vap_loss(&model, &windows, ablation, seed)?.into());
    }
    if cfg.eval.metrics.contains(&Metric::ShiftHold) {
        let prepared = sessions
            .par_iter()
            .map(|s| prepare_session(s, &table, &fb))
            .collect::<Result<Vec<_>>>()?;
        report.shift_hold = Some(eval_shift_hold(
            &model,
            &prepared,
            &cfg.eval.shift_hold,
            ablation,
            seed,
        )?);
        report.shift_hold_params = Some(cfg.eval.shift_hold.clone());
    }
    Ok(report)
}

#[derive(serde::Serialize)]
struct OnsetReport<'a> {
    user_prompt: &'a str,
    system_prompt: &'a str,
    stats: OnsetStats,
}

fn simulate_cmd(cfg: &mut RunConfig, a: SimulateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model::<f32>()?;
    let mut channels = read_wav(&a.wav)?;
    if a.channel >= channels.len() {
        return Err(VapError::Config(format!(
            "--channel {} but {} has {} channel(s)",
            a.channel,
            a.wav.display(),
            channels.len()
        )));
    }
    let audio = channels.swap_remove(a.channel);
    let dim = ckpt.config.embed_dim;
    let embed =
        |text: &str| -> Result<PromptEmbedding> { embed_text(text, dim, cfg.prompts.embed_seed) };
    let (user, system) = (embed(&a.user_prompt)?, embed(&a.system_prompt)?);
    let activity = energy_vad(&audio, ckpt.config.frame_rate, cfg.simulate.vad_threshold);
    let utterances = utterances_from_activity(&activity, ckpt.config.frame_rate);
    let fb = Filterbank::new();
    let params = cfg.simulate.params();
    let run = |u: &PromptEmbedding, s: &PromptEmbedding| -> Result<Simulation> {
        simulate_system(&model, &fb, &audio, &utterances, u, s, &params)
    };
    create_out(&a.out)?;
    let mut reports = BTreeMap::new();
    let sim = run(&user, &system)?;
    write_timeline(&a.out.join("timeline.csv"), &sim.timeline)?;
    reports.insert(
        "prompted",
        OnsetReport {
            user_prompt: &a.user_prompt,
            system_prompt: &a.system_prompt,
            stats: sim.stats,
        },
    );
    if a.swap {
        let swapped = run(&system, &user)?;
        write_timeline(&a.out.join("timeline_swapped.csv"), &swapped.timeline)?;
        reports.insert(
            "swapped",
            OnsetReport {
                user_prompt: &a.system_prompt,
                system_prompt: &a.user_prompt,
                stats: swapped.stats,
            },
        );
    }
    write(
        &a.out.join(ONSETS_FILE),
        &toml::to_string(&reports).expect("onsets serialize"),
    )?;
    cfg.echo(&a.out)?;
    for (name, r) in &reports {
        let median = r
            .stats
            .median_onset_s
            .map_or("beyond the response window".to_string(), |m| {
                format!("{m:.3} s")
            });
        println!(
            "{name}: {} of {} user utterance ends answered, median onset {median}",
            r.stats.crossings, r.stats.events
        );
    }
    Ok(())
}
