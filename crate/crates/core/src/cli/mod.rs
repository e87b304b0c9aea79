//! Command-line surface. Precedence is flags > config file > defaults.

mod config;
mod staging;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{
    parse_kv_policy, profile_schedule, schedule_config_of, toy_schedule, AttributeBlock, BenchBlock, EvalBlock,
    FlopsBlock, Format, GenerateBlock, IoConfig, ModelBlock, RunConfig, SNAPSHOT_FILE,
};
pub use staging::Staging;

use crate::kvcache::{generate, trace_csv, PolicyKind};
use crate::model::{checkpoint, ModelParams};
use crate::profiler::{self, ArchProfile, Pruning, BUILTIN_PROFILES};
use crate::pruner::{PruneSchedule, ScorerParams};
use crate::saliency::{attribute, saliency_csv, sparsity_stats};
use crate::trainer::{self, synthetic_text, Checkpoint, Corpus, EvalMode, EvalOptions, EvalReport};
use crate::{Error, Result};

/// Exit status for configuration and input errors.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 1;

type F = f32;

#[derive(Debug, Parser)]
#[command(
    name = "sdtp",
    version,
    about = "Saliency-driven dynamic token pruning on a byte-level decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created atomically.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stdout formats, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub format: Option<Vec<Format>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic text corpus.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Language-model training of a base model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Scorer training on a frozen base model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Base model checkpoint; without one a fresh model is pretrained.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ratio loss only, no saliency supervision.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Held-out perplexity and scorer/saliency correlation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EvalMode>,
        #[arg(long)]
        all_windows: bool,
    },
    /// Per-stage saliency CSV and sparsity statistics for one text.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Analytic FLOPs and memory table.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        profile: Option<String>,
        /// JSON architecture profile.
        #[arg(long)]
        profile_file: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// on, off, or a schedule JSON file.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        gen_len: Option<usize>,
        #[arg(long)]
        precision_bytes: Option<usize>,
    },
    /// Greedy generation with optional pruning and KV eviction.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long, value_parser = parse_switch)]
        prune: Option<bool>,
        /// none, local:F or h2o:F.
        #[arg(long)]
        kv_policy: Option<String>,
        #[arg(long)]
        gen_len: Option<usize>,
    },
    /// Wall-clock prefill and generation timings on one worker.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Without a checkpoint the configured model is freshly initialized.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        gen_len: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on or off, got {other:?}")),
    }
}

/// Exit status for an error: usage errors are 2, everything else 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Schedule(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` and runs the command, writing human output to `stdout`.
/// Returns the process exit status.
pub fn run_from<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = if code == 0 {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    match run(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = Some(s);
    }
    if let Some(out) = &common.out {
        c.io.output_dir = Some(out.clone());
    }
    if let Some(f) = &common.format {
        c.io.formats = f.clone();
    }
    Ok(c)
}

fn wants(cfg: &RunConfig, f: Format) -> bool {
    cfg.io.formats.contains(&f)
}

/// Snapshot without the output location, so reruns elsewhere match.
fn snapshot(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.io.output_dir = None;
    c.snapshot()
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn load_windows(cfg: &RunConfig) -> Result<Vec<Vec<usize>>> {
    let path = cfg.corpus_path()?;
    let corpus = Corpus::load(path)?;
    let mut w = corpus.windows(cfg.train.window);
    if let Some(m) = cfg.io.max_windows {
        w.truncate(m);
    }
    if w.is_empty() {
        return Err(Error::Input(format!(
            "corpus {} is shorter than one window of {} tokens",
            path.display(),
            cfg.train.window + 1
        )));
    }
    Ok(w)
}

fn check_window(params: &ModelParams<F>, window: usize) -> Result<()> {
    if window > params.config.max_seq_len {
        return Err(Error::Config(format!(
            "train.window {window} exceeds the model's max_seq_len {}",
            params.config.max_seq_len
        )));
    }
    Ok(())
}

fn fresh_model(cfg: &RunConfig) -> Result<ModelParams<F>> {
    let mut mc = cfg.model.config.clone();
    mc.validate()?;
    mc.max_seq_len = mc.max_seq_len.max(cfg.train.window);
    ModelParams::init(&mc)
}

/// Model, scorers and schedule from a trained or plain checkpoint. Plain
/// models get untrained scorers on the configured schedule.
struct Loaded {
    params: ModelParams<F>,
    scorers: ScorerParams<F>,
    schedule: PruneSchedule,
}

fn resolve_schedule(cfg: &mut RunConfig, n_layers: usize) -> Result<PruneSchedule> {
    let sc = cfg.schedule.clone().unwrap_or_else(|| toy_schedule(n_layers));
    let s = sc.resolve(n_layers)?;
    cfg.schedule = Some(schedule_config_of(&s));
    Ok(s)
}

fn load_checkpoint(cfg: &mut RunConfig, path: &Path) -> Result<Loaded> {
    let bytes = checkpoint::read_file(path)?;
    if checkpoint::kind(&bytes)?.as_deref() == Some("sdtp") {
        let ck = Checkpoint::<F>::decode(&bytes)?;
        cfg.schedule = Some(schedule_config_of(&ck.schedule));
        cfg.model.config = ck.model.config.clone();
        return Ok(Loaded {
            params: ck.model,
            scorers: ck.scorers,
            schedule: ck.schedule,
        });
    }
    let params = checkpoint::decode_model::<F>(&bytes)?;
    cfg.model.config = params.config.clone();
    let schedule = resolve_schedule(cfg, params.config.n_layers)?;
    let seed = cfg.train.seed;
    Ok(Loaded {
        scorers: ScorerParams::init(params.config.d_model, schedule.len(), seed),
        params,
        schedule,
    })
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Corpus {
            out: path,
            bytes,
            seed,
            force,
        } => cmd_corpus(&path, bytes, seed, force, out),
        Command::Pretrain { common, corpus, epochs } => {
            let mut c = base_config(&common)?;
            c.io.corpus = corpus.or(c.io.corpus);
            if let Some(e) = epochs {
                c.pretrain.epochs = e;
            }
            cmd_pretrain(c.resolve()?, common.force, out)
        }
        Command::Train {
            common,
            corpus,
            checkpoint,
            baseline,
            epochs,
        } => {
            let mut c = base_config(&common)?;
            c.io.corpus = corpus.or(c.io.corpus);
            c.model.checkpoint = checkpoint.or(c.model.checkpoint);
            c.train.baseline |= baseline;
            if let Some(e) = epochs {
                c.train.epochs = e;
            }
            cmd_train(c.resolve()?, common.force, out)
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            mode,
            all_windows,
        } => {
            let mut c = base_config(&common)?;
            c.io.corpus = corpus.or(c.io.corpus);
            c.model.checkpoint = checkpoint.or(c.model.checkpoint);
            if let Some(m) = mode {
                c.eval.mode = m;
            }
            c.eval.all_windows |= all_windows;
            cmd_eval(c.resolve()?, common.force, out)
        }
        Command::Attribute {
            common,
            checkpoint,
            input,
            threshold,
        } => {
            let mut c = base_config(&common)?;
            c.model.checkpoint = checkpoint.or(c.model.checkpoint);
            c.io.input = input.or(c.io.input);
            if let Some(t) = threshold {
                c.attribute.threshold_frac = t;
            }
            cmd_attribute(c.resolve()?, common.force, out)
        }
        Command::Flops {
            common,
            profile,
            profile_file,
            lengths,
            schedule,
            gen_len,
            precision_bytes,
        } => {
            let mut c = base_config(&common)?;
            if let Some(p) = profile {
                c.flops.profile = p;
                c.flops.custom = None;
            }
            if let Some(p) = profile_file {
                let src = std::fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("cannot read profile {}: {e}", p.display())))?;
                c.flops.custom =
                    Some(serde_json::from_str(&src).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?);
            }
            if let Some(l) = lengths {
                c.flops.lengths = l;
            }
            match schedule.as_deref() {
                None => {}
                Some("on") => c.flops.prune = true,
                Some("off") => c.flops.prune = false,
                Some(path) => {
                    let src = std::fs::read_to_string(path)
                        .map_err(|e| Error::Config(format!("cannot read schedule {path}: {e}")))?;
                    c.schedule = Some(serde_json::from_str(&src).map_err(|e| Error::Config(format!("{path}: {e}")))?);
                    c.flops.prune = true;
                }
            }
            if let Some(g) = gen_len {
                c.flops.gen_len = g;
            }
            if let Some(b) = precision_bytes {
                c.flops.precision_bytes = b;
            }
            cmd_flops(c.resolve()?, common.force, out)
        }
        Command::Generate {
            common,
            checkpoint,
            prompt,
            prune,
            kv_policy,
            gen_len,
        } => {
            let mut c = base_config(&common)?;
            c.model.checkpoint = checkpoint.or(c.model.checkpoint);
            c.io.input = prompt.or(c.io.input);
            if let Some(p) = prune {
                c.generate.prune = p;
            }
            if let Some(k) = kv_policy {
                c.kv = parse_kv_policy(&k, &c.kv)?;
            }
            if let Some(g) = gen_len {
                c.generate.gen_len = g;
            }
            cmd_generate(c.resolve()?, common.force, out)
        }
        Command::Bench {
            common,
            checkpoint,
            n,
            gen_len,
            repeats,
        } => {
            let mut c = base_config(&common)?;
            c.model.checkpoint = checkpoint.or(c.model.checkpoint);
            if let Some(v) = n {
                c.bench.n = v;
            }
            if let Some(v) = gen_len {
                c.bench.gen_len = v;
            }
            if let Some(v) = repeats {
                c.bench.repeats = v;
            }
            cmd_bench(c.resolve()?, common.force, out)
        }
    }
}

fn cmd_corpus(path: &Path, bytes: usize, seed: u64, force: bool, out: &mut dyn Write) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    if bytes == 0 {
        return Err(Error::Config("--bytes must be >= 1".into()));
    }
    let text = synthetic_text(bytes, seed);
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &text)?;
    std::fs::rename(&tmp, path)?;
    writeln!(out, "wrote {} bytes to {}", text.len(), path.display())?;
    Ok(())
}

fn pretrain_into(cfg: &RunConfig, windows: &[Vec<usize>], stage: &Staging) -> Result<ModelParams<F>> {
    let mut params = fresh_model(cfg)?;
    let mut log = std::fs::File::create(stage.path("pretrain.jsonl"))?;
    trainer::pretrain(&mut params, windows, &cfg.pretrain, |step, loss| {
        writeln!(log, "{}", serde_json::json!({ "step": step, "loss": loss }))?;
        Ok(())
    })?;
    checkpoint::write_file(&stage.path("base.ckpt"), &checkpoint::encode_model(&params)?)?;
    Ok(params)
}

fn cmd_pretrain(cfg: RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let windows = load_windows(&cfg)?;
    let (train_w, _) = trainer::split_holdout(windows, cfg.io.holdout_fraction);
    let stage = Staging::new(cfg.output_dir()?, force)?;
    let params = pretrain_into(&cfg, &train_w, &stage)?;
    stage.write(SNAPSHOT_FILE, snapshot(&cfg)?.as_bytes())?;
    let dir = stage.commit()?;
    writeln!(
        out,
        "pretrained {} parameters on {} windows -> {}",
        params.config.param_count(),
        train_w.len(),
        dir.display()
    )?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: usize,
    config_hash: &'a str,
    baseline: bool,
    train_windows: usize,
    heldout_windows: usize,
    final_loss: Option<&'a crate::objectives::LossReport>,
    eval_full: EvalReport,
    eval_pruned: EvalReport,
}

fn cmd_train(mut cfg: RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let windows = load_windows(&cfg)?;
    let (train_w, held_w) = trainer::split_holdout(windows, cfg.io.holdout_fraction);
    let stage = Staging::new(cfg.output_dir()?, force)?;
    let params = match cfg.model.checkpoint.clone() {
        Some(p) => {
            let params = checkpoint::load_model::<F>(&p)?;
            cfg.model.config = params.config.clone();
            params
        }
        None => pretrain_into(&cfg, &train_w, &stage)?,
    };
    check_window(&params, cfg.train.window)?;
    let schedule = resolve_schedule(&mut cfg, params.config.n_layers)?;
    let mut log = std::fs::File::create(stage.path("metrics.jsonl"))?;
    let ck = trainer::train(&params, &train_w, &schedule, &cfg.train, |r| {
        writeln!(log, "{}", r.to_json_line())?;
        Ok(())
    })?;
    ck.save(&stage.path("checkpoint.sdtp"))?;
    let eval_w = if held_w.is_empty() { &train_w } else { &held_w };
    let opts = EvalOptions {
        seed: cfg.train.seed,
        saliency_mode: cfg.train.saliency_mode,
        correlation: cfg.eval.correlation,
    };
    let eval_full = trainer::evaluate(&ck.model, &ck.scorers, &schedule, eval_w, EvalMode::Full, &opts)?;
    let eval_pruned = trainer::evaluate(&ck.model, &ck.scorers, &schedule, eval_w, EvalMode::Pruned, &opts)?;
    let summary = TrainSummary {
        steps: ck.steps,
        config_hash: &ck.config_hash,
        baseline: cfg.train.baseline,
        train_windows: train_w.len(),
        heldout_windows: held_w.len(),
        final_loss: ck.final_report.as_ref(),
        eval_full,
        eval_pruned,
    };
    let body = json(&summary)?;
    stage.write("report.json", body.as_bytes())?;
    stage.write(SNAPSHOT_FILE, snapshot(&cfg)?.as_bytes())?;
    let dir = stage.commit()?;
    if wants(&cfg, Format::Text) {
        writeln!(
            out,
            "trained {} steps; held-out ppl full {:.4} pruned {:.4}; spearman {}; -> {}",
            summary.steps,
            summary.eval_full.perplexity,
            summary.eval_pruned.perplexity,
            summary
                .eval_pruned
                .mean_spearman
                .map_or("-".into(), |s| format!("{s:.4}")),
            dir.display()
        )?;
    }
    if wants(&cfg, Format::Json) {
        write!(out, "{body}")?;
    }
    Ok(())
}

/// Writes `files` plus the snapshot when an output directory is set, then
/// prints the text line and/or JSON body.
fn emit(
    cfg: &RunConfig,
    force: bool,
    files: &[(&str, &str)],
    text: &str,
    body: &str,
    out: &mut dyn Write,
) -> Result<()> {
    let dir = match &cfg.io.output_dir {
        Some(d) => {
            let stage = Staging::new(d, force)?;
            for (name, contents) in files {
                stage.write(name, contents.as_bytes())?;
            }
            stage.write(SNAPSHOT_FILE, snapshot(cfg)?.as_bytes())?;
            Some(stage.commit()?)
        }
        None => None,
    };
    if wants(cfg, Format::Text) {
        write!(out, "{text}")?;
        if let Some(d) = dir {
            writeln!(out, "-> {}", d.display())?;
        }
    }
    if wants(cfg, Format::Json) {
        write!(out, "{body}")?;
    }
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let path = cfg.checkpoint_path()?.to_path_buf();
    let windows = load_windows(&cfg)?;
    let m = load_checkpoint(&mut cfg, &path)?;
    check_window(&m.params, cfg.train.window)?;
    let windows = if cfg.eval.all_windows || cfg.io.holdout_fraction == 0.0 {
        windows
    } else {
        let (train_w, held) = trainer::split_holdout(windows, cfg.io.holdout_fraction);
        if held.is_empty() {
            train_w
        } else {
            held
        }
    };
    let opts = EvalOptions {
        seed: cfg.train.seed,
        saliency_mode: cfg.train.saliency_mode,
        correlation: cfg.eval.correlation,
    };
    let r = trainer::evaluate(&m.params, &m.scorers, &m.schedule, &windows, cfg.eval.mode, &opts)?;
    let body = json(&r)?;
    let kept: Vec<String> = r.kept_counts.iter().map(|k| format!("{k:.1}")).collect();
    let text = format!(
        "{:?} ppl {:.4} nll {:.5} over {} tokens in {} windows; kept [{}]; spearman {}\n",
        r.mode,
        r.perplexity,
        r.nll,
        r.scored_tokens,
        r.sequences,
        kept.join(", "),
        r.mean_spearman.map_or("-".into(), |s| format!("{s:.4}"))
    );
    emit(&cfg, force, &[("eval.json", &body)], &text, &body, out)
}

fn read_tokens(path: &Path) -> Result<Vec<usize>> {
    let c = Corpus::load(path)?;
    Ok(c.tokens)
}

fn check_tokens(params: &ModelParams<F>, tokens: &[usize], extra: usize) -> Result<()> {
    let c = &params.config;
    if tokens.len() + extra > c.max_seq_len {
        return Err(Error::Input(format!(
            "{} tokens (+{extra} generated) exceed the model's max_seq_len {}",
            tokens.len(),
            c.max_seq_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::Input(format!(
            "token {t} outside the vocabulary of {}",
            c.vocab_size
        )));
    }
    Ok(())
}

fn cmd_attribute(mut cfg: RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let path = cfg.checkpoint_path()?.to_path_buf();
    let tokens = read_tokens(cfg.input_path()?)?;
    let m = load_checkpoint(&mut cfg, &path)?;
    check_tokens(&m.params, &tokens, 0)?;
    if tokens.len() < 2 {
        return Err(Error::Input("attribution needs at least two tokens".into()));
    }
    let maps = attribute(&m.params, &tokens, &tokens[1..], &m.schedule, cfg.train.saliency_mode)?;
    let stats = sparsity_stats(&maps, cfg.attribute.threshold_frac)?;
    let csv = saliency_csv(&maps);
    let body = json(&stats)?;
    let frac: Vec<String> = stats.important_fraction().iter().map(|f| format!("{f:.3}")).collect();
    let text = format!(
        "{} tokens, {} stages at layers {:?}; important fraction (> {} of max) [{}]\n",
        tokens.len(),
        maps.len(),
        stats.layers,
        stats.threshold_frac,
        frac.join(", ")
    );
    emit(
        &cfg,
        force,
        &[("saliency.csv", &csv), ("sparsity.json", &body)],
        &text,
        &body,
        out,
    )
}

fn cmd_flops(mut cfg: RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let profile = match &cfg.flops.custom {
        Some(p) => p.clone(),
        None => ArchProfile::builtin(&cfg.flops.profile).map_err(|_| {
            Error::Config(format!(
                "flops.profile: unknown profile {:?}; available: {}",
                cfg.flops.profile,
                BUILTIN_PROFILES.join(", ")
            ))
        })?,
    };
    profile.validate()?;
    let schedule = if cfg.flops.prune {
        let sc = cfg
            .schedule
            .clone()
            .unwrap_or_else(|| profile_schedule(profile.n_layers));
        let s = sc.resolve(profile.n_layers)?;
        cfg.schedule = Some(sc);
        Some(s)
    } else {
        None
    };
    let rows = cfg
        .flops
        .lengths
        .iter()
        .map(|&n| {
            profiler::report(
                &profile,
                n,
                cfg.flops.gen_len,
                schedule.as_ref().map(|s| Pruning::new(s, &profile)),
                cfg.flops.precision_bytes,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let body = json(&rows)?;
    let text = format!("profile {}\n{}", profile.name, profiler::table_text(&rows));
    emit(
        &cfg,
        force,
        &[("flops.json", &body), ("flops.txt", &text)],
        &text,
        &body,
        out,
    )
}

#[derive(Serialize)]
struct MaskStage {
    layer: usize,
    kept: Vec<usize>,
}

#[derive(Serialize)]
struct GenerateReport {
    prompt_tokens: usize,
    generated: Vec<usize>,
    text: String,
    pruned: bool,
    kv_policy: crate::kvcache::KVCachePolicy,
    prefill_positions: Vec<usize>,
}

fn cmd_generate(mut cfg: RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let path = cfg.checkpoint_path()?.to_path_buf();
    let prompt = read_tokens(cfg.input_path()?)?;
    let m = load_checkpoint(&mut cfg, &path)?;
    check_tokens(&m.params, &prompt, cfg.generate.gen_len)?;
    let pruning = cfg.generate.prune.then_some((&m.schedule, &m.scorers));
    let g = generate(&m.params, &prompt, pruning, &cfg.kv, cfg.generate.gen_len)?;
    let text = String::from_utf8_lossy(&g.tokens.iter().map(|&t| t as u8).collect::<Vec<u8>>()).into_owned();
    let stages: Vec<MaskStage> = if cfg.generate.prune {
        m.schedule
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| MaskStage {
                layer: st.layer,
                kept: g.mask.kept(s),
            })
            .collect()
    } else {
        Vec::new()
    };
    let mask = json(&serde_json::json!({
        "tokens": prompt.len(),
        "protected": g.mask.protected(),
        "stages": stages,
    }))?;
    let report = GenerateReport {
        prompt_tokens: prompt.len(),
        generated: g.tokens.clone(),
        text: text.clone(),
        pruned: cfg.generate.prune,
        kv_policy: cfg.kv.clone(),
        prefill_positions: g.prefill_positions.clone(),
    };
    let body = json(&report)?;
    let trace = trace_csv(&g.trace);
    let max_entries = g.trace.iter().map(|r| r.entries).max().unwrap_or(0);
    let policy = match cfg.kv.kind {
        PolicyKind::None => "none".to_string(),
        k => format!("{k:?}:{}", cfg.kv.budget_fraction),
    };
    let human = format!(
        "{} tokens after a {}-token prompt (prune {}, kv {policy}, peak cache {max_entries}):\n{text}\n",
        g.tokens.len(),
        prompt.len(),
        if cfg.generate.prune { "on" } else { "off" },
    );
    emit(
        &cfg,
        force,
        &[
            ("generated.txt", &text),
            ("generation.json", &body),
            ("mask.json", &mask),
            ("trace.csv", &trace),
        ],
        &human,
        &body,
        out,
    )
}

fn cmd_bench(mut cfg: RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let (n, gen_len) = (cfg.bench.n, cfg.bench.gen_len);
    let m = match cfg.model.checkpoint.clone() {
        Some(p) => load_checkpoint(&mut cfg, &p)?,
        None => {
            let mut mc = cfg.model.config.clone();
            mc.max_seq_len = mc.max_seq_len.max(n + gen_len);
            let params = ModelParams::<F>::init(&mc)?;
            let schedule = resolve_schedule(&mut cfg, mc.n_layers)?;
            Loaded {
                scorers: ScorerParams::init(mc.d_model, schedule.len(), cfg.train.seed),
                params,
                schedule,
            }
        }
    };
    let tokens: Vec<usize> = match &cfg.io.corpus {
        Some(p) => Corpus::load(p)?.tokens.into_iter().take(n).collect(),
        None => synthetic_text(n, cfg.train.seed)
            .bytes()
            .take(n)
            .map(usize::from)
            .collect(),
    };
    if tokens.len() < n {
        return Err(Error::Input(format!(
            "bench needs {n} tokens, the corpus has {}",
            tokens.len()
        )));
    }
    check_tokens(&m.params, &tokens, gen_len)?;
    let r = profiler::bench_toy(&m.params, &m.scorers, &m.schedule, &tokens, gen_len, cfg.bench.repeats)?;
    let body = json(&r)?;
    let text = format!(
        "n {} gen {} x{} on {} worker: prefill {:.2} ms -> {:.2} ms ({:.2}x), end-to-end {:.2} ms -> {:.2} ms ({:.2}x), overlap {:.3}\n",
        r.n,
        r.gen_len,
        r.repeats,
        r.workers,
        r.prefill_ms_full,
        r.prefill_ms_pruned,
        r.prefill_speedup,
        r.end2end_ms_full,
        r.end2end_ms_pruned,
        r.end2end_speedup,
        r.overlap
    );
    emit(&cfg, force, &[("bench.json", &body)], &text, &body, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run_from(std::iter::once("sdtp").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn flops_row_near_reference() {
        let (code, out, _) = run_args(&[
            "flops",
            "--profile",
            "mistral-7b",
            "--lengths",
            "4096",
            "--format",
            "json",
        ]);
        assert_eq!(code, 0);
        let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
        let t = rows[0]["baseline"]["prefill"]["total"].as_f64().unwrap() / 1e12;
        assert!((t - 72.51).abs() / 72.51 < 0.2, "{t}");
        assert!(rows[0]["prefill_ratio"].as_f64().is_some());
    }

    #[test]
    fn flops_schedule_switch() {
        let (_, out, _) = run_args(&["flops", "--lengths", "4096", "--schedule", "off", "--format", "json"]);
        let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(rows[0]["prefill_ratio"].is_null());
        let (_, text, _) = run_args(&["flops", "--lengths", "4096,8192"]);
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn unknown_profile_lists_available() {
        let (code, _, err) = run_args(&["flops", "--profile", "gpt-9"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(
            err.contains("mistral-7b") && err.contains("llama2-7b") && err.contains("bloom-7b"),
            "{err}"
        );
    }

    #[test]
    fn bloom_uses_fitted_schedule() {
        let (code, out, err) = run_args(&["flops", "--profile", "bloom-7b", "--lengths", "4096"]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("4096"));
    }

    #[test]
    fn missing_corpus_names_field() {
        let (code, _, err) = run_args(&["train", "--out", "/nonexistent/x"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("io.corpus"), "{err}");
    }

    #[test]
    fn bad_flag_is_usage_error() {
        let (code, _, _) = run_args(&["eval", "--mode", "sideways"]);
        assert_eq!(code, EXIT_USAGE);
        let (code, _, _) = run_args(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("flops"));
    }
}
