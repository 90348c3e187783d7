//! Mapper regularizers: gradient penalty, L1/L2 on normalization-layer
//! parameters, and L2 on every mapper parameter.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Node, Tape};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mode, Network};
use crate::tensor::Tensor;

/// Epsilon in the per-sample gradient norm of the penalty.
pub const GP_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegKind {
    #[serde(rename = "gp")]
    GradientPenalty,
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "classical-l2")]
    ClassicalL2,
    #[serde(rename = "none")]
    None,
}

impl RegKind {
    pub fn default_lambda(self) -> f64 {
        match self {
            RegKind::GradientPenalty => 10.0,
            RegKind::L1 | RegKind::L2 | RegKind::ClassicalL2 => 1e-3,
            RegKind::None => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegKind::GradientPenalty => "gp",
            RegKind::L1 => "l1",
            RegKind::L2 => "l2",
            RegKind::ClassicalL2 => "classical-l2",
            RegKind::None => "none",
        }
    }
}

impl fmt::Display for RegKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gp" => RegKind::GradientPenalty,
            "l1" => RegKind::L1,
            "l2" => RegKind::L2,
            "classical-l2" => RegKind::ClassicalL2,
            "none" => RegKind::None,
            other => return Err(Error::invalid(format!("unknown regularizer '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub kind: RegKind,
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig::with_default_lambda(RegKind::GradientPenalty)
    }
}

impl RegConfig {
    pub fn new(kind: RegKind, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be a nonnegative real, got {lambda}"
            )));
        }
        Ok(RegConfig { kind, lambda })
    }

    pub fn with_default_lambda(kind: RegKind) -> Self {
        RegConfig {
            kind,
            lambda: kind.default_lambda(),
        }
    }
}

/// Points `eps_i x_i + (1 - eps_i) y_i`, one uniform `eps_i` per row.
pub fn interpolate<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    rng: &mut R,
) -> Result<Node> {
    let eps: Vec<f64> = (0..x.rows()).map(|_| rng.random::<f64>()).collect();
    interpolate_with(tape, x, y, &eps)
}

/// [`interpolate`] with the mixing weights supplied.
pub fn interpolate_with(tape: &mut Tape, x: &Tensor, y: &Tensor, eps: &[f64]) -> Result<Node> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    if eps.len() != x.rows() {
        return Err(Error::shape("interpolate", "one weight per row required"));
    }
    let mut data = Vec::with_capacity(x.len());
    for (r, &e) in eps.iter().enumerate() {
        data.extend(
            x.row(r)
                .iter()
                .zip(y.row(r))
                .map(|(a, b)| e * a + (1.0 - e) * b),
        );
    }
    tape.variable(Tensor::new(data, x.shape())?)
}

/// Mean over rows of `(|grad_x sum_i F(x)[i]| - 1)^2`, differentiable in
/// the mapper parameters.
pub fn gradient_penalty(
    tape: &mut Tape,
    mapper: &mut Network,
    bound: &Bound,
    xhat: Node,
) -> Result<Node> {
    if mapper.output_dim == 0 {
        return Err(Error::invalid("mapper has no outputs"));
    }
    let features = mapper.forward(tape, bound, xhat, Mode::Train)?;
    let total = tape.sum_all(features)?;
    let g = tape.grad(total, &[xhat], true)?[0];
    let sq = tape.square(g)?;
    let sq_norm = tape.sum_cols(sq)?;
    let norm = tape.sqrt_eps(sq_norm, GP_NORM_EPS)?;
    let one = tape.scalar(1.0)?;
    let dev = tape.sub(norm, one)?;
    let dev_sq = tape.square(dev)?;
    tape.mean_all(dev_sq)
}

fn sum_over(
    tape: &mut Tape,
    params: &[Node],
    f: fn(&mut Tape, Node) -> Result<Node>,
) -> Result<Node> {
    if params.is_empty() {
        return Err(Error::invalid("regularizer needs at least one parameter"));
    }
    let mut total: Option<Node> = None;
    for &p in params {
        let v = f(tape, p)?;
        let s = tape.sum_all(v)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Sum of squares of the normalization-layer parameters.
pub fn l2_reg(tape: &mut Tape, norm_params: &[Node]) -> Result<Node> {
    sum_over(tape, norm_params, Tape::square)
}

/// Sum of absolute values of the normalization-layer parameters.
pub fn l1_reg(tape: &mut Tape, norm_params: &[Node]) -> Result<Node> {
    sum_over(tape, norm_params, Tape::abs)
}

/// Sum of squares of every mapper parameter.
pub fn classical_l2(tape: &mut Tape, all_params: &[Node]) -> Result<Node> {
    sum_over(tape, all_params, Tape::square)
}

/// The configured regularizer for one mapper step, or `None` when the run
/// has no regularizer. `x` and `y` are the real and generated batches used
/// to draw interpolation points.
pub fn mapper_regularizer<R: Rng + ?Sized>(
    tape: &mut Tape,
    kind: RegKind,
    mapper: &mut Network,
    bound: &Bound,
    x: &Tensor,
    y: &Tensor,
    rng: &mut R,
) -> Result<Option<Node>> {
    Ok(Some(match kind {
        RegKind::None => return Ok(None),
        RegKind::GradientPenalty => {
            let xhat = interpolate(tape, x, y, rng)?;
            gradient_penalty(tape, mapper, bound, xhat)?
        }
        RegKind::L1 => l1_reg(tape, &bound.norm_parameters())?,
        RegKind::L2 => l2_reg(tape, &bound.norm_parameters())?,
        RegKind::ClassicalL2 => classical_l2(tape, bound.parameters())?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mapper, Layer, LinearLayer, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_mapper(w: f64) -> Network {
        Network {
            role: Role::Mapper,
            input_dim: 1,
            output_dim: 1,
            layers: vec![Layer::Linear(LinearLayer {
                weight: Tensor::scalar(w),
                bias: Tensor::zeros(1, 1),
            })],
        }
    }

    fn gp_of(mut net: Network, points: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true).unwrap();
        let x = tape
            .variable(Tensor::new(points.to_vec(), (points.len(), 1)).unwrap())
            .unwrap();
        let gp = gradient_penalty(&mut tape, &mut net, &bound, x).unwrap();
        tape.item(gp)
    }

    #[test]
    fn gp_linear_examples() {
        assert!(gp_of(linear_mapper(1.0), &[0.3, -2.0, 1.5]) < 1e-20);
        assert!((gp_of(linear_mapper(2.0), &[0.3, -2.0, 1.5]) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn interpolation_endpoints_and_segment() {
        let x = Tensor::new(vec![1.0, 2.0, -3.0, 4.0], (2, 2)).unwrap();
        let y = Tensor::new(vec![0.0, -1.0, 5.0, 4.5], (2, 2)).unwrap();
        let mut tape = Tape::new();
        let a = interpolate_with(&mut tape, &x, &y, &[1.0, 1.0]).unwrap();
        assert_eq!(tape.value(a), &x);
        let b = interpolate_with(&mut tape, &x, &y, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(b), &y);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = interpolate(&mut tape, &x, &y, &mut rng).unwrap();
        assert!(tape.requires_grad(c));
        let v = tape.value(c);
        for r in 0..2 {
            // same mixing weight for both coordinates
            let e0 = (v.get(r, 0) - y.get(r, 0)) / (x.get(r, 0) - y.get(r, 0));
            let e1 = (v.get(r, 1) - y.get(r, 1)) / (x.get(r, 1) - y.get(r, 1));
            assert!((e0 - e1).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&e0));
        }
        let bad = Tensor::zeros(3, 2);
        assert!(interpolate(&mut tape, &x, &bad, &mut rng).is_err());
    }

    #[test]
    fn norm_penalty_hand_values() {
        let mut tape = Tape::new();
        let p = tape.parameter(vec![1.0, 2.0], (1, 2)).unwrap();
        let l2 = l2_reg(&mut tape, &[p]).unwrap();
        let l1 = l1_reg(&mut tape, &[p]).unwrap();
        assert_eq!(tape.item(l2), 5.0);
        assert_eq!(tape.item(l1), 3.0);
        let z = tape.parameter(vec![0.0; 3], (1, 3)).unwrap();
        for f in [l1_reg, l2_reg, classical_l2] {
            let v = f(&mut tape, &[z]).unwrap();
            assert_eq!(tape.item(v), 0.0);
        }
        assert!(l2_reg(&mut tape, &[]).is_err());
    }

    #[test]
    fn classical_dominates_norm_l2() {
        let mapper = build_mapper(2, 6, 2, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let b = mapper.bind(&mut tape, true).unwrap();
        let norm = l2_reg(&mut tape, &b.norm_parameters()).unwrap();
        let all = classical_l2(&mut tape, b.parameters()).unwrap();
        assert!(tape.item(all) >= tape.item(norm));
    }

    #[test]
    fn reg_kind_parsing() {
        for k in ["gp", "l1", "l2", "classical-l2", "none"] {
            assert_eq!(k.parse::<RegKind>().unwrap().as_str(), k);
        }
        assert!("spectral".parse::<RegKind>().is_err());
        assert!(RegConfig::new(RegKind::L1, -1.0).is_err());
    }
}
