//! Generator and mapper MLPs.
//!
//! Hidden blocks are `Linear -> Norm -> ReLU`; the generator normalizes with
//! batch normalization and the mapper with layer normalization. The final
//! `Linear` of either network has no normalization and no activation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Node, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Mapper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = x W + b`, with `W` stored `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        LinearLayer {
            weight: Tensor::from_parts(in_dim, out_dim, data),
            bias: Tensor::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new(features: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled(1, features, 1.0),
            beta: Tensor::zeros(1, features),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: BATCH_NORM_MOMENTUM,
            eps: BATCH_NORM_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new(features: usize) -> Self {
        LayerNormLayer {
            gamma: Tensor::filled(1, features, 1.0),
            beta: Tensor::zeros(1, features),
            eps: LAYER_NORM_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    BatchNorm(BatchNormLayer),
    LayerNorm(LayerNormLayer),
    Relu,
}

/// A feed-forward network together with its trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub role: Role,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
}

fn check_dims(dims: &[(&str, usize)]) -> Result<()> {
    for (name, v) in dims {
        if *v == 0 {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

fn build<R: Rng + ?Sized>(
    role: Role,
    in_dim: usize,
    hidden: usize,
    depth: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<Network> {
    check_dims(&[
        ("input dim", in_dim),
        ("hidden width", hidden),
        ("depth", depth),
        ("output dim", out_dim),
    ])?;
    let mut layers = Vec::with_capacity(3 * depth + 1);
    let mut width = in_dim;
    for _ in 0..depth {
        layers.push(Layer::Linear(LinearLayer::new(width, hidden, rng)));
        layers.push(match role {
            Role::Generator => Layer::BatchNorm(BatchNormLayer::new(hidden)),
            Role::Mapper => Layer::LayerNorm(LayerNormLayer::new(hidden)),
        });
        layers.push(Layer::Relu);
        width = hidden;
    }
    layers.push(Layer::Linear(LinearLayer::new(width, out_dim, rng)));
    Ok(Network {
        role,
        input_dim: in_dim,
        output_dim: out_dim,
        layers,
    })
}

/// Latent vectors to data space, batch-normalized hidden blocks.
pub fn build_generator<R: Rng + ?Sized>(
    z_dim: usize,
    hidden: usize,
    depth: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<Network> {
    build(Role::Generator, z_dim, hidden, depth, out_dim, rng)
}

/// Data space to the `out_dim`-dimensional feature space, layer-normalized
/// hidden blocks.
pub fn build_mapper<R: Rng + ?Sized>(
    in_dim: usize,
    hidden: usize,
    depth: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<Network> {
    build(Role::Mapper, in_dim, hidden, depth, out_dim, rng)
}

/// Parameter nodes of a network placed on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<Node>,
    is_norm: Vec<bool>,
}

impl Bound {
    /// Every parameter node, in the network's stable order.
    pub fn parameters(&self) -> &[Node] {
        &self.nodes
    }

    /// The scale/shift nodes of the normalization layers.
    pub fn norm_parameters(&self) -> Vec<Node> {
        self.nodes
            .iter()
            .zip(&self.is_norm)
            .filter(|(_, &n)| n)
            .map(|(&node, _)| node)
            .collect()
    }
}

struct BatchStats {
    layer: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Network {
    /// Parameter tensors in stable order: per layer, weight then bias or
    /// gamma then beta.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => out.extend([&l.weight, &l.bias]),
                Layer::BatchNorm(l) => out.extend([&l.gamma, &l.beta]),
                Layer::LayerNorm(l) => out.extend([&l.gamma, &l.beta]),
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => out.extend([&mut l.weight, &mut l.bias]),
                Layer::BatchNorm(l) => out.extend([&mut l.gamma, &mut l.beta]),
                Layer::LayerNorm(l) => out.extend([&mut l.gamma, &mut l.beta]),
                Layer::Relu => {}
            }
        }
        out
    }

    /// Names matching [`Network::params`], e.g. `layer3.gamma`.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let pair = match layer {
                Layer::Linear(_) => ["weight", "bias"],
                Layer::BatchNorm(_) | Layer::LayerNorm(_) => ["gamma", "beta"],
                Layer::Relu => continue,
            };
            out.extend(pair.iter().map(|p| format!("layer{i}.{p}")));
        }
        out
    }

    fn norm_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(_) => out.extend([false, false]),
                Layer::BatchNorm(_) | Layer::LayerNorm(_) => out.extend([true, true]),
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Place the parameters on `tape`, registered as trainable when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let nodes = self
            .params()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.parameter_tensor(t.clone())
                } else {
                    tape.constant_tensor(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound {
            nodes,
            is_norm: self.norm_mask(),
        })
    }

    /// Forward pass. In [`Mode::Train`] batch normalization uses batch
    /// statistics and updates its running statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        input: Node,
        mode: Mode,
    ) -> Result<Node> {
        let mut stats = Vec::new();
        let out = self.forward_impl(tape, bound, input, mode, &mut stats)?;
        for s in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[s.layer] {
                let mom = bn.momentum;
                for (r, m) in bn.running_mean.iter_mut().zip(&s.mean) {
                    *r = (1.0 - mom) * *r + mom * m;
                }
                for (r, v) in bn.running_var.iter_mut().zip(&s.var) {
                    *r = (1.0 - mom) * *r + mom * v;
                }
            }
        }
        Ok(out)
    }

    /// Eval-mode forward on plain arrays.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant_tensor(input.clone())?;
        let y = self.forward_impl(&mut tape, &bound, x, Mode::Eval, &mut Vec::new())?;
        Ok(tape.value(y).clone())
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Node,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Node> {
        if input.cols() != self.input_dim {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has {} columns, network expects {}",
                    input.cols(),
                    self.input_dim
                ),
            ));
        }
        let rows = input.rows();
        let mut params = bound.parameters().iter().copied();
        let mut next = || {
            params
                .next()
                .expect("bound parameters match network layout")
        };
        let mut h = input;
        for (index, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Linear(_) => {
                    let (w, b) = (next(), next());
                    let xw = tape.matmul(h, w)?;
                    tape.add(xw, b)?
                }
                Layer::BatchNorm(bn) => {
                    let (gamma, beta) = (next(), next());
                    let normalized = match mode {
                        Mode::Train => {
                            if rows < 2 {
                                return Err(Error::invalid(
                                    "batch normalization in train mode needs at least 2 rows",
                                ));
                            }
                            let (xhat, mean, var) = batch_normalize(tape, h, bn.eps)?;
                            let unbiased = rows as f64 / (rows as f64 - 1.0);
                            stats.push(BatchStats {
                                layer: index,
                                mean,
                                var: var.iter().map(|v| v * unbiased).collect(),
                            });
                            xhat
                        }
                        Mode::Eval => {
                            let n = bn.running_mean.len();
                            let shift = Tensor::from_parts(1, n, bn.running_mean.clone());
                            let inv_std = Tensor::from_parts(
                                1,
                                n,
                                bn.running_var
                                    .iter()
                                    .map(|v| 1.0 / (v + bn.eps).sqrt())
                                    .collect(),
                            );
                            let shift = tape.constant_tensor(shift)?;
                            let inv_std = tape.constant_tensor(inv_std)?;
                            let c = tape.sub(h, shift)?;
                            tape.mul(c, inv_std)?
                        }
                    };
                    affine(tape, normalized, gamma, beta)?
                }
                Layer::LayerNorm(ln) => {
                    let (gamma, beta) = (next(), next());
                    let xhat = layer_normalize(tape, h, ln.eps)?;
                    affine(tape, xhat, gamma, beta)?
                }
                Layer::Relu => tape.relu(h)?,
            };
        }
        Ok(h)
    }
}

fn affine(tape: &mut Tape, x: Node, gamma: Node, beta: Node) -> Result<Node> {
    let scaled = tape.mul(x, gamma)?;
    tape.add(scaled, beta)
}

/// Normalize each column by its batch mean and biased batch variance.
fn batch_normalize(tape: &mut Tape, x: Node, eps: f64) -> Result<(Node, Vec<f64>, Vec<f64>)> {
    let rows = x.rows();
    let inv = 1.0 / rows as f64;
    let sum = tape.sum_rows(x)?;
    let mean = tape.scale(sum, inv)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let sq_sum = tape.sum_rows(sq)?;
    let var = tape.scale(sq_sum, inv)?;
    let std = tape.sqrt_eps(var, eps)?;
    let one = tape.scalar(1.0)?;
    let inv_std = tape.div(one, std)?;
    let xhat = tape.mul(centered, inv_std)?;
    let mean_v = tape.value(mean).data().to_vec();
    let var_v = tape.value(var).data().to_vec();
    Ok((xhat, mean_v, var_v))
}

/// Normalize each row by its own mean and biased variance.
fn layer_normalize(tape: &mut Tape, x: Node, eps: f64) -> Result<Node> {
    let cols = x.cols();
    let inv = 1.0 / cols as f64;
    let sum = tape.sum_cols(x)?;
    let mean = tape.scale(sum, inv)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let sq_sum = tape.sum_cols(sq)?;
    let var = tape.scale(sq_sum, inv)?;
    let std = tape.sqrt_eps(var, eps)?;
    let one = tape.scalar(1.0)?;
    let inv_std = tape.div(one, std)?;
    tape.mul(centered, inv_std)
}
