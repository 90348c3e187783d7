//! Gaussian-kernel-mixture maximum mean discrepancy.
//!
//! The estimator keeps the diagonal kernel terms, so the quantity under the
//! square root is the squared distance between the two empirical mean
//! embeddings:
//!
//! ```text
//! mmd(X, Y) = sqrt( (sum k(x_i, x_i') - 2 sum k(x_i, y_j) + sum k(y_j, y_j')) / m^2 )
//! ```
//!
//! with `k(a, b) = sum_q exp(-|a - b|^2 / (2 sigma_q^2))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{exp_mixture_values, Node, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crate::autodiff::pairwise_sqdist;

/// Epsilon inside the outer square root of the estimator.
pub const MMD_SQRT_EPS: f64 = 1e-12;

/// Bandwidths of a sum of Gaussian kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMixture {
    bandwidths: Vec<f64>,
}

impl Default for KernelMixture {
    fn default() -> Self {
        KernelMixture {
            bandwidths: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

impl KernelMixture {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::invalid(
                "kernel mixture needs at least one bandwidth",
            ));
        }
        if let Some(bad) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::invalid(format!(
                "bandwidth must be positive, got {bad}"
            )));
        }
        Ok(KernelMixture { bandwidths })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma])
    }

    /// Bandwidths set to `multipliers` times the median pairwise distance
    /// between distinct rows of `reference`.
    pub fn median_heuristic(reference: &Tensor, multipliers: &[f64]) -> Result<Self> {
        if reference.rows() < 2 {
            return Err(Error::invalid("median heuristic needs at least two points"));
        }
        let d = pairwise_sqdist(reference, reference)?;
        let n = reference.rows();
        let mut dists: Vec<f64> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| d.get(i, j).sqrt())
            .collect();
        dists.sort_by(f64::total_cmp);
        let median = dists[dists.len() / 2];
        if median <= 0.0 {
            return Err(Error::invalid(
                "reference points coincide; median distance is 0",
            ));
        }
        Self::new(multipliers.iter().map(|m| m * median).collect())
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// `(1, -1 / (2 sigma^2))` per bandwidth, as exponential-mixture terms.
    fn terms(&self) -> Vec<(f64, f64)> {
        self.bandwidths
            .iter()
            .map(|s| (1.0, -1.0 / (2.0 * s * s)))
            .collect()
    }
}

/// `sum_q exp(-|a_i - b_j|^2 / (2 sigma_q^2))` for every pair of rows.
pub fn kernel_matrix(kernels: &KernelMixture, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = pairwise_sqdist(a, b)?;
    Ok(exp_mixture_values(&d, &kernels.terms()))
}

fn check_batches(x: (usize, usize), y: (usize, usize)) -> Result<()> {
    if x.0 != y.0 {
        return Err(Error::shape(
            "mmd",
            format!(
                "batch sizes differ ({} vs {}); both batches need m rows",
                x.0, y.0
            ),
        ));
    }
    if x.1 != y.1 {
        return Err(Error::shape(
            "mmd",
            format!("feature dims differ ({} vs {})", x.1, y.1),
        ));
    }
    Ok(())
}

/// Mixture kernel matrix between the rows of `a` and `b` as a tape node.
fn kernel_node(tape: &mut Tape, kernels: &KernelMixture, a: Node, b: Node) -> Result<Node> {
    let d = tape.sqdist(a, b)?;
    tape.exp_mixture(d, &kernels.terms())
}

// The cross term is summed once in each orientation, so that swapping the
// two batches permutes only commutative additions and the estimate is
// exactly symmetric.

/// The squared estimator (before the outer root), differentiable in `x`
/// and `y`.
pub fn mmd_squared_hat(tape: &mut Tape, kernels: &KernelMixture, x: Node, y: Node) -> Result<Node> {
    check_batches(x.shape(), y.shape())?;
    let m = x.rows() as f64;
    let kxx = kernel_node(tape, kernels, x, x)?;
    let kyy = kernel_node(tape, kernels, y, y)?;
    let kxy = kernel_node(tape, kernels, x, y)?;
    let kyx = tape.transpose(kxy)?;
    let sxx = tape.sum_all(kxx)?;
    let syy = tape.sum_all(kyy)?;
    let sxy = tape.sum_all(kxy)?;
    let syx = tape.sum_all(kyx)?;
    let within = tape.add(sxx, syy)?;
    let cross = tape.add(sxy, syx)?;
    let s = tape.sub(within, cross)?;
    tape.scale(s, 1.0 / (m * m))
}

/// Differentiable MMD estimate between two equally sized batches.
pub fn mmd_hat(tape: &mut Tape, kernels: &KernelMixture, x: Node, y: Node) -> Result<Node> {
    let sq = mmd_squared_hat(tape, kernels, x, y)?;
    tape.sqrt_eps(sq, MMD_SQRT_EPS)
}

/// Plain-number version of [`mmd_squared_hat`], bit-identical to it.
pub fn mmd_squared_eval(kernels: &KernelMixture, x: &Tensor, y: &Tensor) -> Result<f64> {
    check_batches(x.shape(), y.shape())?;
    let m = x.rows() as f64;
    let kxy = kernel_matrix(kernels, x, y)?;
    let within = kernel_matrix(kernels, x, x)?.sum() + kernel_matrix(kernels, y, y)?.sum();
    let cross = kxy.sum() + kxy.transpose().sum();
    Ok((within - cross) * (1.0 / (m * m)))
}

/// Plain-number MMD for logging; same value as [`mmd_hat`].
pub fn mmd_eval(kernels: &KernelMixture, x: &Tensor, y: &Tensor) -> Result<f64> {
    let sq = mmd_squared_eval(kernels, x, y)?;
    Ok((sq.max(0.0) + MMD_SQRT_EPS).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sqdist_examples() {
        let a = t(&[&[0.0], &[1.0]]);
        assert_eq!(
            pairwise_sqdist(&a, &a).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0]
        );
        let d = pairwise_sqdist(&t(&[&[1.0, 0.0]]), &t(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(d.data(), &[2.0]);
        assert!(pairwise_sqdist(&t(&[&[1.0, 0.0]]), &t(&[&[0.0]])).is_err());
    }

    #[test]
    fn kernel_examples() {
        let k1 = KernelMixture::single(1.0).unwrap();
        let zero = t(&[&[0.0]]);
        let one = t(&[&[1.0]]);
        assert_eq!(kernel_matrix(&k1, &zero, &zero).unwrap().data(), &[1.0]);
        let v = kernel_matrix(&k1, &zero, &one).unwrap().data()[0];
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
        let k2 = KernelMixture::single(2.0).unwrap();
        let mix = KernelMixture::new(vec![1.0, 2.0]).unwrap();
        let sum = v + kernel_matrix(&k2, &zero, &one).unwrap().data()[0];
        assert!((kernel_matrix(&mix, &zero, &one).unwrap().data()[0] - sum).abs() < 1e-15);
    }

    #[test]
    fn invalid_mixtures() {
        assert!(KernelMixture::new(vec![]).is_err());
        assert!(KernelMixture::new(vec![1.0, 0.0]).is_err());
        assert!(KernelMixture::new(vec![-2.0]).is_err());
    }

    #[test]
    fn single_point_hand_value() {
        let k = KernelMixture::single(1.0).unwrap();
        let expected = (2.0 - 2.0 * (-0.5f64).exp()).sqrt();
        let v = mmd_eval(&k, &t(&[&[0.0]]), &t(&[&[1.0]])).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.8871).abs() < 1e-4);
    }

    #[test]
    fn unequal_batches_rejected() {
        let k = KernelMixture::default();
        let x = t(&[&[0.0, 1.0], &[1.0, 1.0]]);
        let y = t(&[&[0.0, 1.0]]);
        assert!(mmd_eval(&k, &x, &y).is_err());
        let mut tape = Tape::new();
        let xn = tape.constant_tensor(x).unwrap();
        let yn = tape.constant_tensor(y).unwrap();
        assert!(mmd_hat(&mut tape, &k, xn, yn).is_err());
    }

    #[test]
    fn identical_samples_give_root_eps() {
        let k = KernelMixture::default();
        let x = t(&[&[0.3, -1.0], &[2.0, 0.5], &[-0.7, 0.1]]);
        let mut tape = Tape::new();
        let a = tape.constant_tensor(x.clone()).unwrap();
        let b = tape.constant_tensor(x.clone()).unwrap();
        let v = mmd_hat(&mut tape, &k, a, b).unwrap();
        assert!(tape.item(v) <= MMD_SQRT_EPS.sqrt() + 1e-9);
        assert!((tape.item(v) - mmd_eval(&k, &x, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn median_heuristic_scales_median() {
        let r = t(&[&[0.0, 0.0], &[3.0, 4.0], &[0.0, 1.0]]);
        // distances 5, 1, sqrt(18); median is sqrt(18)
        let k = KernelMixture::median_heuristic(&r, &[1.0, 0.5]).unwrap();
        assert!((k.bandwidths()[0] - 18f64.sqrt()).abs() < 1e-12);
        assert!((k.bandwidths()[1] - 0.5 * 18f64.sqrt()).abs() < 1e-12);
    }
}
