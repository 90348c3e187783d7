//! `gamn run` and `gamn eval`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gamn::checkpoint::Checkpoint;
use gamn::data::{Prior, PriorKind, ToyDataset};
use gamn::mmd::KernelMixture;
use gamn::regularizers::{RegConfig, RegKind};
use gamn::tensor::Tensor;
use gamn::trainer::{
    generate, stream_rng, table1_metric, ModelKind, TrainConfig, Trainer, EXPORT_STREAM,
};

/// Rows in the exported sample files.
pub const EXPORT_ROWS: usize = 10_000;
/// Records averaged by the reported windowed metric.
pub const METRIC_WINDOW: usize = 1000;

/// Bad flags, config-file entries, or option values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "gamn",
    version,
    about = "GAMN and GMMN on 2-D toy distributions",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write metrics, samples, checkpoint and manifest.
    Run(Box<RunArgs>),
    /// Regenerate samples from a checkpoint and print the windowed metric.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// File of `key = value` lines using the long flag names; flags win.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint (only --iters and output options may change).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub flags: RunFlags,
}

/// Options that may also come from a config file.
#[derive(Args, Debug, Default, Clone)]
pub struct RunFlags {
    /// 8g, 25g or sr.
    #[arg(long)]
    pub dataset: Option<ToyDataset>,
    /// gamn or gmmn.
    #[arg(long)]
    pub model: Option<ModelKindArg>,
    /// gp, l1, l2, classical-l2 or none.
    #[arg(long)]
    pub reg: Option<RegKind>,
    /// Regularizer weight (default depends on --reg).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Outer training rounds.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub n_mapper: Option<usize>,
    #[arg(long)]
    pub n_generator: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training kernel bandwidths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sigma: Option<Vec<f64>>,
    /// Evaluation kernel bandwidths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub eval_sigma: Option<Vec<f64>>,
    /// Weight of the data-space MMD term in the generator loss (1.0 if no value).
    #[arg(long, num_args = 0..=1, default_missing_value = "1.0")]
    pub aux_mmd: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Rounds between logged metrics.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Rows per batch behind each logged metric.
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Add the regularizer to the mapper objective instead of subtracting it.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub literal_reg_sign: Option<bool>,
    /// normal or uniform.
    #[arg(long)]
    pub prior: Option<PriorKind>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Hidden width of both networks.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Hidden layers of both networks.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Mapper output dimension.
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Adam step size.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Rounds between rolling checkpoint writes (0 disables them).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

/// `gamn`/`gmmn` with clap-compatible parsing.
#[derive(Debug, Clone, Copy)]
pub struct ModelKindArg(pub ModelKind);

impl std::str::FromStr for ModelKindArg {
    type Err = gamn::Error;

    fn from_str(s: &str) -> gamn::Result<Self> {
        s.parse().map(ModelKindArg)
    }
}

#[derive(Parser, Debug)]
#[command(name = "config", no_binary_name = true, disable_help_flag = true)]
struct FileFlags {
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of samples to write.
    #[arg(long, default_value_t = EXPORT_ROWS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Output CSV path.
    #[arg(long, default_value = "samples.csv")]
    pub out: PathBuf,
    /// Sampling seed (defaults to the run's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = METRIC_WINDOW)]
    pub window: usize,
}

/// Turn `key = value` lines into `--key=value` tokens.
pub fn config_file_tokens(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" || key == "resume" {
            return Err(usage(format!(
                "config line {}: key '{key}' not allowed",
                i + 1
            )));
        }
        tokens.push(format!("--{key}={value}"));
    }
    Ok(tokens)
}

fn parse_config_file(path: &Path) -> Result<RunFlags> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tokens = config_file_tokens(&text)?;
    let parsed = FileFlags::command_for_file()
        .try_get_matches_from(tokens)
        .and_then(|m| <FileFlags as clap::FromArgMatches>::from_arg_matches(&m))
        .map_err(|e| usage(format!("config file {}: {}", path.display(), e.render())))?;
    Ok(parsed.flags)
}

impl FileFlags {
    fn command_for_file() -> clap::Command {
        <FileFlags as clap::CommandFactory>::command().args_override_self(true)
    }
}

macro_rules! fill_missing {
    ($dst:ident, $src:ident; $($field:ident),* $(,)?) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field; } )*
    };
}

impl RunFlags {
    fn or(mut self, file: RunFlags) -> RunFlags {
        fill_missing!(self, file;
            dataset, model, reg, lambda, iters, n_mapper, n_generator, batch_size, seed,
            sigma, eval_sigma, aux_mmd, out_dir, eval_every, eval_samples, literal_reg_sign,
            prior, latent_dim, hidden, depth, feature_dim, lr, beta1, beta2, checkpoint_every,
        );
        self
    }

    /// Whether any option that shapes training is present.
    fn touches_training(&self) -> bool {
        let RunFlags {
            dataset,
            model,
            reg,
            lambda,
            n_mapper,
            n_generator,
            batch_size,
            seed,
            sigma,
            eval_sigma,
            aux_mmd,
            eval_every,
            eval_samples,
            literal_reg_sign,
            prior,
            latent_dim,
            hidden,
            depth,
            feature_dim,
            lr,
            beta1,
            beta2,
            iters: _,
            out_dir: _,
            checkpoint_every: _,
        } = self;
        dataset.is_some()
            || model.is_some()
            || reg.is_some()
            || lambda.is_some()
            || n_mapper.is_some()
            || n_generator.is_some()
            || batch_size.is_some()
            || seed.is_some()
            || sigma.is_some()
            || eval_sigma.is_some()
            || aux_mmd.is_some()
            || eval_every.is_some()
            || eval_samples.is_some()
            || literal_reg_sign.is_some()
            || prior.is_some()
            || latent_dim.is_some()
            || hidden.is_some()
            || depth.is_some()
            || feature_dim.is_some()
            || lr.is_some()
            || beta1.is_some()
            || beta2.is_some()
    }

    /// Effective config: defaults overridden by every present option.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some(v) = self.model {
            c.model = v.0;
        }
        if let Some(v) = self.dataset {
            c.dataset = v;
        }
        if let Some(kind) = self.reg {
            c.reg = RegConfig::with_default_lambda(kind);
        }
        if let Some(l) = self.lambda {
            c.reg = RegConfig::new(c.reg.kind, l).map_err(|e| usage(e.to_string()))?;
        }
        let counts = [
            (self.iters, &mut c.total_iterations),
            (self.n_mapper, &mut c.n_mapper),
            (self.n_generator, &mut c.n_generator),
            (self.batch_size, &mut c.batch_size),
            (self.eval_every, &mut c.eval_every),
            (self.eval_samples, &mut c.eval_samples),
            (self.hidden, &mut c.hidden),
            (self.depth, &mut c.depth),
            (self.feature_dim, &mut c.feature_dim),
        ];
        for (value, slot) in counts {
            if let Some(v) = value {
                *slot = v;
            }
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(s) = &self.sigma {
            c.kernels =
                KernelMixture::new(s.clone()).map_err(|e| usage(format!("--sigma: {e}")))?;
        }
        if let Some(s) = &self.eval_sigma {
            c.eval_kernels =
                KernelMixture::new(s.clone()).map_err(|e| usage(format!("--eval-sigma: {e}")))?;
        }
        if let Some(v) = self.aux_mmd {
            c.aux_mmd_weight = v;
        }
        if let Some(v) = self.literal_reg_sign {
            c.literal_reg_sign = v;
        }
        if self.prior.is_some() || self.latent_dim.is_some() {
            let kind = self.prior.unwrap_or(c.prior.kind);
            let dim = self.latent_dim.unwrap_or(c.prior.dim);
            c.prior = Prior::new(kind, dim).map_err(|e| usage(e.to_string()))?;
        }
        if let Some(v) = self.lr {
            c.adam.alpha = v;
        }
        if let Some(v) = self.beta1 {
            c.adam.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            c.adam.beta2 = v;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }
}

fn unix_secs() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn points_csv(t: &Tensor) -> String {
    let mut out = String::with_capacity(t.rows() * 40 + 4);
    out.push_str("x,y\n");
    for r in 0..t.rows() {
        let p = t.row(r);
        out.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    out
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    c.save(path)
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn run(args: RunArgs) -> Result<()> {
    let started = unix_secs();
    let flags = match &args.config {
        Some(path) => args.flags.clone().or(parse_config_file(path)?),
        None => args.flags.clone(),
    };

    let mut trainer = match &args.resume {
        Some(path) => {
            if flags.touches_training() {
                return Err(usage(
                    "only --iters, --out-dir and --checkpoint-every may be given with --resume",
                ));
            }
            let ckpt = Checkpoint::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let mut t = ckpt.to_trainer()?;
            if let Some(iters) = flags.iters {
                if iters < t.iteration() {
                    return Err(usage(format!(
                        "--iters {iters} is below the checkpoint's iteration {}",
                        t.iteration()
                    )));
                }
                t.set_total_iterations(iters)
                    .map_err(|e| usage(e.to_string()))?;
            }
            t
        }
        None => Trainer::new(flags.resolve()?)?,
    };

    let config = trainer.config().clone();
    let out_dir = flags
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("gamn-out"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let checkpoint_every = flags.checkpoint_every.unwrap_or(1000);
    let metrics_path = out_dir.join("metrics.csv");
    let rolling_path = out_dir.join("checkpoint_latest.bin");
    let progress_every = (config.total_iterations / 20).max(1);

    let mut last_good = trainer.checkpoint();
    let mut wrote_rolling = false;
    while trainer.iteration() < config.total_iterations {
        if let Err(e) = trainer.round() {
            let saved = out_dir.join("checkpoint_last_good.bin");
            save_checkpoint(&last_good, &saved)?;
            write(&metrics_path, trainer.log().to_csv())?;
            return Err(anyhow::Error::new(e).context(format!(
                "round {} failed; last good state (iteration {}) saved to {}",
                trainer.iteration() + 1,
                last_good.iteration,
                saved.display()
            )));
        }
        let it = trainer.iteration();
        if checkpoint_every > 0 && it % checkpoint_every == 0 {
            last_good = trainer.checkpoint();
            save_checkpoint(&last_good, &rolling_path)?;
            wrote_rolling = true;
        }
        if !args.quiet && (it % progress_every == 0 || it == config.total_iterations) {
            if let Some(r) = trainer.log().records.last() {
                eprintln!(
                    "[{it}/{}] mmd_eval={:.5} mmd_train={:.5} reg={:.5} ({:.1}s)",
                    config.total_iterations,
                    r.mmd_eval,
                    r.mmd_train,
                    r.reg_value,
                    r.wall_clock_secs
                );
            }
        }
    }

    let final_ckpt = trainer.checkpoint();
    let ckpt_path = out_dir.join("checkpoint.bin");
    save_checkpoint(&final_ckpt, &ckpt_path)?;
    write(&metrics_path, trainer.log().to_csv())?;

    let mut export = stream_rng(config.seed, EXPORT_STREAM);
    let samples = generate(&final_ckpt, EXPORT_ROWS, &mut export)?;
    let real = config.dataset.sample(EXPORT_ROWS, &mut export)?;
    let samples_path = out_dir.join("samples.csv");
    let real_path = out_dir.join("real.csv");
    write(&samples_path, points_csv(&samples))?;
    write(&real_path, points_csv(&real))?;

    let metric = table1_metric(trainer.log(), METRIC_WINDOW)?;
    let mut checkpoints = vec![ckpt_path.clone()];
    if wrote_rolling {
        checkpoints.push(rolling_path);
    }
    let manifest = json!({
        "software": {"name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION")},
        "config": config,
        "config_hash": config.hash(),
        "resumed_from": args.resume,
        "out_dir": out_dir,
        "artifacts": {
            "metrics": metrics_path,
            "samples": samples_path,
            "real": real_path,
            "checkpoints": checkpoints,
        },
        "iterations": trainer.iteration(),
        "table1_metric": {
            "value": metric.value,
            "window": METRIC_WINDOW,
            "records_used": metric.records_used,
            "short_window": metric.short_window,
        },
        "started_at_unix": started,
        "finished_at_unix": unix_secs(),
    });
    write(
        &out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    println!("table1_metric={}", metric.value);
    println!(
        "records_used={} short_window={}",
        metric.records_used, metric.short_window
    );
    println!("out_dir={}", out_dir.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    if args.window == 0 {
        return Err(usage("--window must be at least 1"));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let seed = args.seed.unwrap_or(ckpt.config.seed);
    let mut rng = stream_rng(seed, EXPORT_STREAM);
    let samples = generate(&ckpt, args.n as usize, &mut rng)?;
    write(&args.out, points_csv(&samples))?;
    let metric = table1_metric(&ckpt.log, args.window)?;
    println!("table1_metric={}", metric.value);
    println!(
        "records_used={} short_window={}",
        metric.records_used, metric.short_window
    );
    println!("samples={}", args.out.display());
    Ok(())
}
