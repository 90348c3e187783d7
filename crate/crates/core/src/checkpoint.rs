//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GAMNCKPT" | u32 version | u64 header length | JSON header | f64 arrays
//! ```
//!
//! The JSON header carries the config and its hash, the iteration counter,
//! RNG positions, optimizer step counts, the metric log, and the name and
//! shape of every array. The arrays follow in header order as raw `f64`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::trainer::{MetricLog, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"GAMNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    config_hash: String,
    iteration: usize,
    rng: RngState,
    eval_rng: RngState,
    generator_adam_step: u64,
    mapper_adam_step: Option<u64>,
    last_mmd_train: f64,
    last_reg: f64,
    elapsed_secs: f64,
    log: MetricLog,
    arrays: Vec<ArrayEntry>,
}

/// Complete saved training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub iteration: usize,
    pub log: MetricLog,
    rng: RngState,
    eval_rng: RngState,
    generator_adam_step: u64,
    mapper_adam_step: Option<u64>,
    last_mmd_train: f64,
    last_reg: f64,
    elapsed_secs: f64,
    arrays: Vec<(String, Tensor)>,
}

fn network_arrays(prefix: &str, net: &Network, out: &mut Vec<(String, Tensor)>) {
    for (name, t) in net.param_names().into_iter().zip(net.params()) {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
    for (i, layer) in net.layers.iter().enumerate() {
        if let Layer::BatchNorm(bn) = layer {
            let n = bn.running_mean.len();
            out.push((
                format!("{prefix}.layer{i}.running_mean"),
                Tensor::from_parts(1, n, bn.running_mean.clone()),
            ));
            out.push((
                format!("{prefix}.layer{i}.running_var"),
                Tensor::from_parts(1, n, bn.running_var.clone()),
            ));
        }
    }
}

fn adam_arrays(prefix: &str, net: &Network, opt: &Adam, out: &mut Vec<(String, Tensor)>) {
    let names = net.param_names();
    for (name, t) in names.iter().zip(opt.first_moments()) {
        out.push((format!("{prefix}.m.{name}"), t.clone()));
    }
    for (name, t) in names.iter().zip(opt.second_moments()) {
        out.push((format!("{prefix}.v.{name}"), t.clone()));
    }
}

struct ArrayTable(HashMap<String, Tensor>);

impl ArrayTable {
    fn take(&mut self, name: &str, shape: (usize, usize)) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    fn load_network(&mut self, prefix: &str, net: &mut Network) -> Result<()> {
        let names = net.param_names();
        for (name, slot) in names.iter().zip(net.params_mut()) {
            *slot = self.take(&format!("{prefix}.{name}"), slot.shape())?;
        }
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                let n = bn.running_mean.len();
                bn.running_mean = self
                    .take(&format!("{prefix}.layer{i}.running_mean"), (1, n))?
                    .into_data();
                bn.running_var = self
                    .take(&format!("{prefix}.layer{i}.running_var"), (1, n))?
                    .into_data();
                if bn.running_var.iter().any(|v| *v < 0.0) {
                    return Err(Error::Checkpoint("negative running variance".into()));
                }
            }
        }
        Ok(())
    }

    fn load_adam(&mut self, prefix: &str, net: &Network, opt: &Adam, step: u64) -> Result<Adam> {
        let names = net.param_names();
        let shapes: Vec<_> = net.params().iter().map(|t| t.shape()).collect();
        let mut first = Vec::with_capacity(names.len());
        let mut second = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            first.push(self.take(&format!("{prefix}.m.{name}"), *shape)?);
        }
        for (name, shape) in names.iter().zip(&shapes) {
            second.push(self.take(&format!("{prefix}.v.{name}"), *shape)?);
        }
        Adam::restore(opt.config, step, first, second)
    }
}

impl Checkpoint {
    pub(crate) fn from_trainer(t: &Trainer) -> Self {
        let mut arrays = Vec::new();
        network_arrays("generator", &t.generator, &mut arrays);
        adam_arrays("adam.generator", &t.generator, &t.gen_opt, &mut arrays);
        if let (Some(m), Some(opt)) = (&t.mapper, &t.map_opt) {
            network_arrays("mapper", m, &mut arrays);
            adam_arrays("adam.mapper", m, opt, &mut arrays);
        }
        Checkpoint {
            config: t.config.clone(),
            config_hash: t.config.hash(),
            iteration: t.iteration,
            log: t.log.clone(),
            rng: RngState::capture(&t.rng),
            eval_rng: RngState::capture(&t.eval_rng),
            generator_adam_step: t.gen_opt.step_count(),
            mapper_adam_step: t.map_opt.as_ref().map(Adam::step_count),
            last_mmd_train: t.last_mmd_train,
            last_reg: t.last_reg,
            elapsed_secs: t.elapsed_secs,
            arrays,
        }
    }

    /// Rebuild the full training state.
    pub fn to_trainer(&self) -> Result<Trainer> {
        if self.config.hash() != self.config_hash {
            return Err(Error::Checkpoint(
                "config hash does not match stored config".into(),
            ));
        }
        let mut t = Trainer::unlogged(self.config.clone())?;
        let mut table = ArrayTable(self.arrays.iter().cloned().collect());
        table.load_network("generator", &mut t.generator)?;
        t.gen_opt = table.load_adam(
            "adam.generator",
            &t.generator,
            &t.gen_opt,
            self.generator_adam_step,
        )?;
        if let (Some(mapper), Some(opt)) = (t.mapper.as_mut(), t.map_opt.as_ref()) {
            table.load_network("mapper", mapper)?;
            let step = self
                .mapper_adam_step
                .ok_or_else(|| Error::Checkpoint("missing mapper optimizer step".into()))?;
            let restored = table.load_adam("adam.mapper", mapper, opt, step)?;
            t.map_opt = Some(restored);
        }
        if let Some(extra) = table.0.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra}")));
        }
        t.rng = self.rng.restore()?;
        t.eval_rng = self.eval_rng.restore()?;
        t.iteration = self.iteration;
        t.log = self.log.clone();
        t.last_mmd_train = self.last_mmd_train;
        t.last_reg = self.last_reg;
        t.elapsed_secs = self.elapsed_secs;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            eval_rng: self.eval_rng.clone(),
            generator_adam_step: self.generator_adam_step,
            mapper_adam_step: self.mapper_adam_step,
            last_mmd_train: self.last_mmd_train,
            last_reg: self.last_reg,
            elapsed_secs: self.elapsed_secs,
            log: self.log.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.arrays.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(what.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

        let mut offset = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let n = entry.rows * entry.cols;
            let end = offset
                .checked_add(n * 8)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| corrupt("truncated array data"))?;
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((
                entry.name.clone(),
                Tensor::new(data, (entry.rows, entry.cols))?,
            ));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after array data"));
        }
        Ok(Checkpoint {
            config: header.config,
            config_hash: header.config_hash,
            iteration: header.iteration,
            log: header.log,
            rng: header.rng,
            eval_rng: header.eval_rng,
            generator_adam_step: header.generator_adam_step,
            mapper_adam_step: header.mapper_adam_step,
            last_mmd_train: header.last_mmd_train,
            last_reg: header.last_reg,
            elapsed_secs: header.elapsed_secs,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The generator network stored in this checkpoint.
    pub fn generator(&self) -> Result<Network> {
        Ok(self.to_trainer()?.generator)
    }
}
