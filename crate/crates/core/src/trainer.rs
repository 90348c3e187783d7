//! Alternating GAMN training, the GMMN baseline, and metric logging.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{Prior, ToyDataset};
use crate::error::{Error, Result};
use crate::mmd::{mmd_eval, mmd_hat, KernelMixture};
use crate::nn::{build_generator, build_mapper, Mode, Network};
use crate::optim::{Adam, AdamConfig, Direction};
use crate::regularizers::{mapper_regularizer, RegConfig, RegKind};
use crate::tensor::Tensor;

/// RNG stream for initialization and training batches.
pub const TRAIN_STREAM: u64 = 0;
/// RNG stream for the batches behind logged metrics.
pub const EVAL_STREAM: u64 = 1;
/// RNG stream for exported sample files.
pub const EXPORT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gamn,
    Gmmn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gamn => "gamn",
            ModelKind::Gmmn => "gmmn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamn" => Ok(ModelKind::Gamn),
            "gmmn" => Ok(ModelKind::Gmmn),
            other => Err(Error::invalid(format!("unknown model '{other}'"))),
        }
    }
}

/// Every knob of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dataset: ToyDataset,
    pub prior: Prior,
    pub reg: RegConfig,
    pub n_mapper: usize,
    pub n_generator: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Kernels of the training loss (feature space for GAMN, data space
    /// for GMMN and the auxiliary term).
    pub kernels: KernelMixture,
    /// Kernels of the logged data-space metric.
    pub eval_kernels: KernelMixture,
    pub total_iterations: usize,
    pub aux_mmd_weight: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Rows of each batch behind a logged metric.
    pub eval_samples: usize,
    /// Add `+lambda * Reg` to the mapper's ascent objective instead of
    /// subtracting it.
    pub literal_reg_sign: bool,
    pub hidden: usize,
    pub depth: usize,
    /// Output dimension of the mapper.
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Gamn,
            dataset: ToyDataset::EightGaussians,
            prior: Prior::default(),
            reg: RegConfig::default(),
            n_mapper: 5,
            n_generator: 1,
            batch_size: 256,
            adam: AdamConfig::default(),
            kernels: KernelMixture::default(),
            eval_kernels: KernelMixture::default(),
            total_iterations: 20_000,
            aux_mmd_weight: 0.0,
            seed: 0,
            eval_every: 1,
            eval_samples: 256,
            literal_reg_sign: false,
            hidden: 512,
            depth: 4,
            feature_dim: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_mapper", self.n_mapper),
            ("n_generator", self.n_generator),
            ("total_iterations", self.total_iterations),
            ("eval_every", self.eval_every),
            ("hidden", self.hidden),
            ("depth", self.depth),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "batch size must be at least 2 (batch normalization)",
            ));
        }
        if self.eval_samples < 1 {
            return Err(Error::invalid("eval_samples must be at least 1"));
        }
        self.adam.validate()?;
        RegConfig::new(self.reg.kind, self.reg.lambda)?;
        if !(self.aux_mmd_weight.is_finite() && self.aux_mmd_weight >= 0.0) {
            return Err(Error::invalid("aux_mmd_weight must be a nonnegative real"));
        }
        if self.aux_mmd_weight > 0.0
            && (self.model != ModelKind::Gamn || self.reg.kind != RegKind::GradientPenalty)
        {
            return Err(Error::invalid(
                "the auxiliary data-space MMD term is only available for GAMN with the gradient penalty",
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Completed outer rounds.
    pub iteration: usize,
    /// Data-space MMD under the eval kernels.
    pub mmd_eval: f64,
    /// Training-loss MMD of the latest generator step (feature space for
    /// GAMN, data space for GMMN).
    pub mmd_train: f64,
    /// Regularizer value of the latest mapper step.
    pub reg_value: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return Err(Error::invalid(format!(
                    "metric iterations must increase ({} after {})",
                    record.iteration, last.iteration
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn mmd_eval_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mmd_eval).collect()
    }

    /// CSV with columns `iteration,mmd_eval_data_space,mmd_train_feature_space,reg_value`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iteration,mmd_eval_data_space,mmd_train_feature_space,reg_value\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration, r.mmd_eval, r.mmd_train, r.reg_value
            ));
        }
        out
    }
}

/// Mean of the trailing window of logged data-space MMDs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowedMetric {
    pub value: f64,
    pub records_used: usize,
    /// The log held fewer records than the window asked for.
    pub short_window: bool,
}

pub fn table1_metric(log: &MetricLog, window: usize) -> Result<WindowedMetric> {
    if log.is_empty() {
        return Err(Error::invalid("metric log is empty"));
    }
    if window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    let used = window.min(log.len());
    let tail = &log.records[log.len() - used..];
    let value = tail.iter().map(|r| r.mmd_eval).sum::<f64>() / used as f64;
    Ok(WindowedMetric {
        value,
        records_used: used,
        short_window: used < window,
    })
}

/// Values from one player step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub mmd: f64,
    pub reg: f64,
    pub objective: f64,
}

/// Complete mutable state of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub(crate) config: TrainConfig,
    pub(crate) generator: Network,
    pub(crate) mapper: Option<Network>,
    pub(crate) gen_opt: Adam,
    pub(crate) map_opt: Option<Adam>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) eval_rng: ChaCha8Rng,
    pub(crate) iteration: usize,
    pub(crate) log: MetricLog,
    pub(crate) last_mmd_train: f64,
    pub(crate) last_reg: f64,
    pub(crate) elapsed_secs: f64,
}

/// ChaCha8 generator for `seed` positioned at the start of `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    /// Fresh networks and optimizers; the iteration-0 metric is logged.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let mut trainer = Self::unlogged(config)?;
        trainer.log_metrics()?;
        Ok(trainer)
    }

    /// Fresh state without the initial log record.
    pub(crate) fn unlogged(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, TRAIN_STREAM);
        let generator =
            build_generator(config.prior.dim, config.hidden, config.depth, 2, &mut rng)?;
        let mapper = match config.model {
            ModelKind::Gamn => Some(build_mapper(
                2,
                config.hidden,
                config.depth,
                config.feature_dim,
                &mut rng,
            )?),
            ModelKind::Gmmn => None,
        };
        let mut gen_opt = Adam::new(config.adam);
        gen_opt.init(&generator.params());
        let map_opt = mapper.as_ref().map(|m| {
            let mut opt = Adam::new(config.adam);
            opt.init(&m.params());
            opt
        });
        Ok(Trainer {
            eval_rng: stream_rng(config.seed, EVAL_STREAM),
            config,
            generator,
            mapper,
            gen_opt,
            map_opt,
            rng,
            iteration: 0,
            log: MetricLog::default(),
            last_mmd_train: 0.0,
            last_reg: 0.0,
            elapsed_secs: 0.0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Change the round budget, e.g. to continue a finished run.
    pub fn set_total_iterations(&mut self, total: usize) -> Result<()> {
        if total == 0 {
            return Err(Error::invalid("total_iterations must be at least 1"));
        }
        self.config.total_iterations = total;
        Ok(())
    }

    pub fn log(&self) -> &MetricLog {
        &self.log
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn mapper(&self) -> Option<&Network> {
        self.mapper.as_ref()
    }

    /// Mutable access for tests that place networks in a known state.
    pub fn networks_mut(&mut self) -> (&mut Network, Option<&mut Network>) {
        (&mut self.generator, self.mapper.as_mut())
    }

    pub fn sample_real(&mut self) -> Result<Tensor> {
        self.config
            .dataset
            .sample(self.config.batch_size, &mut self.rng)
    }

    pub fn sample_latent(&mut self) -> Result<Tensor> {
        self.config
            .prior
            .sample(self.config.batch_size, &mut self.rng)
    }

    /// Train-mode generator output for a latent batch; running statistics
    /// are updated.
    pub fn generate_batch(&mut self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.generator.bind(&mut tape, false)?;
        let zn = tape.constant_tensor(z.clone())?;
        let y = self.generator.forward(&mut tape, &bound, zn, Mode::Train)?;
        Ok(tape.value(y).clone())
    }

    fn require_mapper(&self) -> Result<()> {
        if self.config.model != ModelKind::Gamn {
            return Err(Error::invalid("mapper steps exist only for GAMN"));
        }
        Ok(())
    }

    /// Mapper objective on fixed batches:
    /// `mmd(F(x), F(y)) - lambda * Reg` (or `+` with the literal sign).
    ///
    /// The regularizer draws its interpolation weights from `rng`.
    pub fn mapper_objective(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(StepReport, Vec<Tensor>)> {
        self.require_mapper()?;
        let kernels = self.config.kernels.clone();
        let reg_cfg = self.config.reg;
        let sign = if self.config.literal_reg_sign {
            1.0
        } else {
            -1.0
        };
        let mapper = self.mapper.as_mut().expect("GAMN has a mapper");

        let mut tape = Tape::new();
        let bound = mapper.bind(&mut tape, true)?;
        let xn = tape.constant_tensor(x.clone())?;
        let yn = tape.constant_tensor(y.clone())?;
        let fx = mapper.forward(&mut tape, &bound, xn, Mode::Train)?;
        let fy = mapper.forward(&mut tape, &bound, yn, Mode::Train)?;
        let mmd = mmd_hat(&mut tape, &kernels, fx, fy)?;
        let reg = if reg_cfg.lambda > 0.0 {
            mapper_regularizer(&mut tape, reg_cfg.kind, mapper, &bound, x, y, rng)?
        } else {
            None
        };
        let (objective, reg_value) = match reg {
            Some(r) => {
                let weighted = tape.scale(r, sign * reg_cfg.lambda)?;
                (tape.add(mmd, weighted)?, tape.item(r))
            }
            None => (mmd, 0.0),
        };
        let grads = tape.grad(objective, bound.parameters(), false)?;
        let grads = grads.iter().map(|g| tape.value(*g).clone()).collect();
        let report = StepReport {
            mmd: tape.item(mmd),
            reg: reg_value,
            objective: tape.item(objective),
        };
        check_finite(&report)?;
        Ok((report, grads))
    }

    /// One mapper update on given batches.
    pub fn mapper_step_on(&mut self, x: &Tensor, y: &Tensor) -> Result<StepReport> {
        let mut rng = self.rng.clone();
        let result = self.mapper_objective(x, y, &mut rng);
        self.rng = rng;
        let (report, grads) = result?;
        let mapper = self.mapper.as_mut().expect("GAMN has a mapper");
        let opt = self.map_opt.as_mut().expect("GAMN has a mapper optimizer");
        opt.step(&mut mapper.params_mut(), &grads, Direction::Ascend)?;
        self.last_reg = report.reg;
        Ok(report)
    }

    /// `n_mapper` ascent steps on freshly drawn batches; the generator's
    /// parameters are not touched.
    pub fn mapper_round(&mut self) -> Result<StepReport> {
        self.require_mapper()?;
        let mut last = None;
        for _ in 0..self.config.n_mapper {
            let x = self.sample_real()?;
            let z = self.sample_latent()?;
            let y = self.generate_batch(&z)?;
            last = Some(self.mapper_step_on(&x, &y)?);
        }
        Ok(last.expect("n_mapper >= 1"))
    }

    /// Generator loss on fixed batches and its parameter gradients.
    ///
    /// GAMN: `mmd(F(x), F(G(z))) + aux * mmd(x, G(z))`; GMMN: `mmd(x, G(z))`.
    pub fn generator_objective(
        &mut self,
        x: &Tensor,
        z: &Tensor,
    ) -> Result<(StepReport, Vec<Tensor>)> {
        let kernels = self.config.kernels.clone();
        let aux = self.config.aux_mmd_weight;
        let mut tape = Tape::new();
        let bound = self.generator.bind(&mut tape, true)?;
        let zn = tape.constant_tensor(z.clone())?;
        let xn = tape.constant_tensor(x.clone())?;
        let y = self.generator.forward(&mut tape, &bound, zn, Mode::Train)?;
        let (mmd, objective) = match self.mapper.as_mut() {
            Some(mapper) => {
                let mb = mapper.bind(&mut tape, false)?;
                let fx = mapper.forward(&mut tape, &mb, xn, Mode::Train)?;
                let fy = mapper.forward(&mut tape, &mb, y, Mode::Train)?;
                let feature = mmd_hat(&mut tape, &kernels, fx, fy)?;
                let objective = if aux > 0.0 {
                    let data = mmd_hat(&mut tape, &kernels, xn, y)?;
                    let weighted = tape.scale(data, aux)?;
                    tape.add(feature, weighted)?
                } else {
                    feature
                };
                (feature, objective)
            }
            None => {
                let data = mmd_hat(&mut tape, &kernels, xn, y)?;
                (data, data)
            }
        };
        let grads = tape.grad(objective, bound.parameters(), false)?;
        let grads = grads.iter().map(|g| tape.value(*g).clone()).collect();
        let report = StepReport {
            mmd: tape.item(mmd),
            reg: 0.0,
            objective: tape.item(objective),
        };
        check_finite(&report)?;
        Ok((report, grads))
    }

    /// One generator update on given batches.
    pub fn generator_step_on(&mut self, x: &Tensor, z: &Tensor) -> Result<StepReport> {
        let (report, grads) = self.generator_objective(x, z)?;
        self.gen_opt
            .step(&mut self.generator.params_mut(), &grads, Direction::Descend)?;
        self.last_mmd_train = report.mmd;
        Ok(report)
    }

    /// `n_generator` descent steps on fresh batches (GMMN: the only player).
    /// The mapper is not touched.
    pub fn generator_round(&mut self) -> Result<StepReport> {
        let mut last = None;
        for _ in 0..self.config.n_generator {
            let x = self.sample_real()?;
            let z = self.sample_latent()?;
            last = Some(self.generator_step_on(&x, &z)?);
        }
        Ok(last.expect("n_generator >= 1"))
    }

    /// One outer round; logs a record when the round count hits `eval_every`.
    pub fn round(&mut self) -> Result<()> {
        let start = Instant::now();
        if self.config.model == ModelKind::Gamn {
            self.mapper_round()?;
        }
        self.generator_round()?;
        self.iteration += 1;
        self.elapsed_secs += start.elapsed().as_secs_f64();
        if self.iteration.is_multiple_of(self.config.eval_every) {
            self.log_metrics()?;
        }
        Ok(())
    }

    fn log_metrics(&mut self) -> Result<()> {
        let n = self.config.eval_samples;
        let real = self.config.dataset.sample(n, &mut self.eval_rng)?;
        let z = self.config.prior.sample(n, &mut self.eval_rng)?;
        let fake = self.generator.predict(&z)?;
        let value = mmd_eval(&self.config.eval_kernels, &real, &fake)?;
        if self.iteration == 0 {
            self.last_mmd_train = self.initial_train_mmd(&real, &fake)?;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "mmd_eval" });
        }
        self.log.push(MetricRecord {
            iteration: self.iteration,
            mmd_eval: value,
            mmd_train: self.last_mmd_train,
            reg_value: self.last_reg,
            wall_clock_secs: self.elapsed_secs,
        })
    }

    fn initial_train_mmd(&self, real: &Tensor, fake: &Tensor) -> Result<f64> {
        match &self.mapper {
            Some(m) => mmd_eval(&self.config.kernels, &m.predict(real)?, &m.predict(fake)?),
            None => mmd_eval(&self.config.kernels, real, fake),
        }
    }

    /// Run rounds until `total_iterations` are complete.
    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    /// [`Trainer::run`] with a hook called after every round.
    pub fn run_with(&mut self, mut hook: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.total_iterations {
            self.round()?;
            hook(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }
}

fn check_finite(r: &StepReport) -> Result<()> {
    if r.mmd.is_finite() && r.reg.is_finite() && r.objective.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "loss" })
    }
}

/// A run that stopped on an error, with the most recent good state when
/// one exists.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.last_good {
            Some(c) => write!(
                f,
                "training stopped: {} (last good state at iteration {})",
                self.error, c.iteration
            ),
            None => write!(f, "training stopped: {}", self.error),
        }
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure {
            error,
            last_good: None,
        }
    }
}

/// Continue a trainer to its configured budget, keeping a good-state
/// snapshot every `snapshot_every` rounds (0: only the starting state).
pub fn resume(
    trainer: &mut Trainer,
    snapshot_every: usize,
) -> std::result::Result<(Checkpoint, MetricLog), TrainFailure> {
    let mut last_good = trainer.checkpoint();
    while trainer.iteration < trainer.config.total_iterations {
        if let Err(error) = trainer.round() {
            return Err(TrainFailure {
                error,
                last_good: Some(Box::new(last_good)),
            });
        }
        if snapshot_every > 0 && trainer.iteration.is_multiple_of(snapshot_every) {
            last_good = trainer.checkpoint();
        }
    }
    Ok((trainer.checkpoint(), trainer.log.clone()))
}

/// Train from scratch to `config.total_iterations`.
pub fn train(config: &TrainConfig) -> std::result::Result<(Checkpoint, MetricLog), TrainFailure> {
    let mut trainer = Trainer::new(config.clone())?;
    resume(&mut trainer, 1000)
}

/// Eval-mode samples from the checkpoint's generator.
pub fn generate(checkpoint: &Checkpoint, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let trainer = checkpoint.to_trainer()?;
    let z = trainer.config.prior.sample(n, rng)?;
    trainer.generator.predict(&z)
}
