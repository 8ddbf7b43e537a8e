use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use umif::config::{ConfigError, RunConfig};
use umif::formats::{read_checkpoint, write_checkpoint, Checkpoint};
use umif::train::{adamw_config, EpochLog, Trainer};
use umif::verify::Suite;
use umif::{dataset, eval, inspect, verify};
use umif_core::model::Model;
use umif_core::{OpKind, ParamStore};

/// Multi-view voxel reconstruction: data generation, training, evaluation,
/// verification and inspection.
///
/// Configuration is resolved as defaults < `--config` file < `UMIF_<KEY>`
/// environment variables < trailing `--key value` overrides.
#[derive(Parser, Debug)]
#[command(name = "umif", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train, writing a checkpoint per epoch and the loss log.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint across view counts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated view counts.
        #[arg(long, default_value = "1,2,3,5,8")]
        views: String,
        /// Samples to score: val, train or all.
        #[arg(long, default_value = "val")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run verification suites and print a CSV report.
    Verify {
        /// gradcheck, oracles or invariants; all suites when omitted.
        #[arg(long)]
        suite: Vec<String>,
        /// Negate the backward rule of this op (mutation fixture).
        #[arg(long)]
        mutant: Option<String>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write neighbor and cluster CSVs for one sample.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample seed.
        #[arg(long)]
        sample: u64,
        /// Number of views (defaults to n_views_train).
        #[arg(long)]
        views: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` pairs, after all other flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.is::<Usage>() || c.is::<ConfigError>())
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").ok_or_else(|| usage(format!("expected `--key value`, got {a:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| usage(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Applies the file, environment and flag layers on top of `base`.
fn resolve(base: RunConfig, common: &Common) -> Result<RunConfig> {
    let mut c = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        c.apply_text(&text).with_context(|| format!("config file {}", path.display()))?;
    }
    c.apply_env(std::env::vars())?;
    for (k, v) in parse_overrides(&common.overrides)? {
        c.set(&k, &v)?;
    }
    c.validate()?;
    Ok(c)
}

fn load_checkpoint(path: &Path, c: &RunConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(read_checkpoint(&bytes, adamw_config(c)).with_context(|| format!("checkpoint {}", path.display()))?)
}

/// Run config stored in a checkpoint with the user layers on top.
fn checkpoint_config(path: &Path, common: &Common) -> Result<(RunConfig, Checkpoint)> {
    let ckpt = load_checkpoint(path, &RunConfig::default())?;
    let stored = RunConfig::from_text(&ckpt.config_text).context("config stored in checkpoint")?;
    let c = resolve(stored.clone(), common)?;
    if c.model != stored.model {
        return Err(usage("model settings cannot be overridden for an existing checkpoint"));
    }
    Ok((c, ckpt))
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn gen_data(common: &Common) -> Result<()> {
    let c = resolve(RunConfig::default(), common)?;
    let samples =
        dataset::generate(c.seed, c.num_shapes, c.model.decoder.voxel_size, c.model.encoder.image_size)?;
    dataset::write(&c.dataset, &samples)?;
    println!("wrote {} samples to {}", samples.len(), c.dataset.display());
    Ok(())
}

fn log_line(l: &EpochLog) -> String {
    format!("{},{},{},{}\n", l.epoch, l.lr, l.train_dice, l.val_dice)
}

fn train(resume: Option<&Path>, common: &Common) -> Result<()> {
    let (c, ckpt) = match resume {
        Some(p) => {
            let (c, ckpt) = checkpoint_config(p, common)?;
            (c, Some(ckpt))
        }
        None => (resolve(RunConfig::default(), common)?, None),
    };
    let samples = dataset::read(&c.dataset)?;
    let loss_path = c.reports.join("loss.csv");
    let mut trainer = match ckpt {
        Some(ckpt) => {
            let mut t = Trainer::resume(ckpt, &samples)?;
            t.config = c.clone();
            t
        }
        None => Trainer::new(&c, &samples)?,
    };
    let mut log = if trainer.epoch == 0 {
        let mut f = create(&loss_path)?;
        f.write_all(b"epoch,lr,train_dice,val_dice\n")?;
        let l = trainer.initial_log()?;
        f.write_all(log_line(&l).as_bytes())?;
        println!("{}", log_line(&l).trim_end());
        f
    } else {
        fs::OpenOptions::new().append(true).open(&loss_path).with_context(|| format!("opening {}", loss_path.display()))?
    };
    while trainer.epoch < c.epochs {
        let l = trainer.run_epoch()?;
        log.write_all(log_line(&l).as_bytes())?;
        log.flush()?;
        let bytes = write_checkpoint(&trainer.checkpoint());
        create(&c.checkpoints.join(format!("epoch_{:03}.ckpt", l.epoch)))?.write_all(&bytes)?;
        create(&c.checkpoints.join("last.ckpt"))?.write_all(&bytes)?;
        println!("{}", log_line(&l).trim_end());
    }
    Ok(())
}

fn parse_views(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<usize>().map_err(|e| usage(format!("bad view count {x:?}: {e}"))))
        .collect()
}

fn model_from(c: &RunConfig, ckpt: &Checkpoint) -> Result<(Model, ParamStore<f32>)> {
    let mut params = ParamStore::new();
    let model = Model::new(&c.model, &mut params, &mut ChaCha8Rng::seed_from_u64(c.seed))?;
    params.load_from(&ckpt.params)?;
    Ok((model, params))
}

fn run_eval(checkpoint: &Path, views: &str, split: &str, common: &Common) -> Result<()> {
    let n_list = parse_views(views)?;
    eval::check_view_counts(&n_list, dataset::STORED_VIEWS).map_err(|e| usage(e.to_string()))?;
    let (c, ckpt) = checkpoint_config(checkpoint, common)?;
    let samples = dataset::read(&c.dataset)?;
    let chosen: Vec<&dataset::Sample> = match split {
        "val" => samples.iter().filter(|s| !s.is_train()).collect(),
        "train" => samples.iter().filter(|s| s.is_train()).collect(),
        "all" => samples.iter().collect(),
        other => return Err(usage(format!("unknown split {other:?}; valid: val, train, all"))),
    };
    let (model, params) = model_from(&c, &ckpt)?;
    let rows = eval::evaluate(&model, &params, &chosen, &n_list, &c)?;
    let summary = eval::summarize(&rows);
    eval::write_rows(create(&c.reports.join("eval_rows.csv"))?, &rows)?;
    eval::write_summary(create(&c.reports.join("eval_summary.csv"))?, &summary)?;
    eval::write_summary(std::io::stdout().lock(), &summary)?;
    Ok(())
}

fn parse_mutant(name: &str) -> Result<OpKind> {
    OpKind::DIFFERENTIABLE.into_iter().find(|k| k.name() == name).ok_or_else(|| {
        let valid: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
        usage(format!("unknown op {name:?}; valid ops: {}", valid.join(", ")))
    })
}

/// Returns whether every check passed.
fn run_verify(suites: &[String], mutant: Option<&str>, out: Option<&Path>) -> Result<bool> {
    let suites: Vec<Suite> = if suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        suites.iter().map(|s| s.parse::<Suite>().map_err(usage)).collect::<Result<_>>()?
    };
    let mutant = mutant.map(parse_mutant).transpose()?;
    let mut results = Vec::new();
    for s in suites {
        results.extend(verify::run(s, mutant));
    }
    verify::write_csv(std::io::stdout().lock(), &results)?;
    if let Some(p) = out {
        verify::write_csv(create(p)?, &results)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run_inspect(checkpoint: &Path, sample: u64, views: Option<usize>, common: &Common) -> Result<()> {
    let (c, ckpt) = checkpoint_config(checkpoint, common)?;
    let samples = dataset::read(&c.dataset)?;
    let s = samples
        .iter()
        .find(|s| s.seed == sample)
        .ok_or_else(|| usage(format!("sample {sample} is not in {}", c.dataset.display())))?;
    let n = views.unwrap_or(c.n_views_train);
    if n == 0 || n > s.views.len() {
        return Err(usage(format!("view count {n} outside 1..={}", s.views.len())));
    }
    let (model, params) = model_from(&c, &ckpt)?;
    let trace = inspect::trace(&model, &params, s, n)?;
    for p in inspect::write_reports(&c.reports.join("inspect").join(sample.to_string()), &model, &trace)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common } => gen_data(&common).map(|_| true),
        Command::Train { resume, common } => train(resume.as_deref(), &common).map(|_| true),
        Command::Eval { checkpoint, views, split, common } => run_eval(&checkpoint, &views, &split, &common).map(|_| true),
        Command::Verify { suite, mutant, out } => run_verify(&suite, mutant.as_deref(), out.as_deref()),
        Command::Inspect { checkpoint, sample, views, common } => run_inspect(&checkpoint, sample, views, &common).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
