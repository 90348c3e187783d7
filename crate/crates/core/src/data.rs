//! Toy 2-D target distributions and the latent prior.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EIGHT_RADIUS: f64 = 2.0;
const EIGHT_STD: f64 = 0.02;
const EIGHT_SCALE: f64 = 1.414;
const GRID_STD: f64 = 0.05;
const GRID_SCALE: f64 = 2.828;
const ROLL_DIVISOR: f64 = 7.5;
const ROLL_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyDataset {
    #[serde(rename = "8g")]
    EightGaussians,
    #[serde(rename = "25g")]
    TwentyFiveGaussians,
    #[serde(rename = "sr")]
    SwissRoll,
}

impl ToyDataset {
    pub const ALL: [ToyDataset; 3] = [
        ToyDataset::EightGaussians,
        ToyDataset::TwentyFiveGaussians,
        ToyDataset::SwissRoll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToyDataset::EightGaussians => "8g",
            ToyDataset::TwentyFiveGaussians => "25g",
            ToyDataset::SwissRoll => "sr",
        }
    }

    /// Mixture centers after scaling; `None` for the swiss roll.
    pub fn centers(self) -> Option<Vec<[f64; 2]>> {
        match self {
            ToyDataset::EightGaussians => Some(
                (0..8)
                    .map(|k| {
                        let a = k as f64 * PI / 4.0;
                        [
                            EIGHT_RADIUS * a.cos() / EIGHT_SCALE,
                            EIGHT_RADIUS * a.sin() / EIGHT_SCALE,
                        ]
                    })
                    .collect(),
            ),
            ToyDataset::TwentyFiveGaussians => {
                let grid = [-4.0, -2.0, 0.0, 2.0, 4.0];
                Some(
                    grid.iter()
                        .flat_map(|&x| grid.iter().map(move |&y| [x / GRID_SCALE, y / GRID_SCALE]))
                        .collect(),
                )
            }
            ToyDataset::SwissRoll => None,
        }
    }

    /// `m` independent draws, one per row.
    pub fn sample<R: Rng + ?Sized>(self, m: usize, rng: &mut R) -> Result<Tensor> {
        if m == 0 {
            return Err(Error::invalid("sample size must be at least 1"));
        }
        let mut data = Vec::with_capacity(2 * m);
        match self {
            ToyDataset::EightGaussians => {
                for _ in 0..m {
                    let a = rng.random_range(0..8) as f64 * PI / 4.0;
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    data.push((EIGHT_RADIUS * a.cos() + EIGHT_STD * nx) / EIGHT_SCALE);
                    data.push((EIGHT_RADIUS * a.sin() + EIGHT_STD * ny) / EIGHT_SCALE);
                }
            }
            ToyDataset::TwentyFiveGaussians => {
                for _ in 0..m {
                    let cx = (rng.random_range(0..5) as f64 - 2.0) * 2.0;
                    let cy = (rng.random_range(0..5) as f64 - 2.0) * 2.0;
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    data.push((cx + GRID_STD * nx) / GRID_SCALE);
                    data.push((cy + GRID_STD * ny) / GRID_SCALE);
                }
            }
            ToyDataset::SwissRoll => {
                for _ in 0..m {
                    let t = rng.random_range(1.5 * PI..4.5 * PI);
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    data.push(t * t.cos() / ROLL_DIVISOR + ROLL_STD * nx);
                    data.push(t * t.sin() / ROLL_DIVISOR + ROLL_STD * ny);
                }
            }
        }
        Tensor::new(data, (m, 2))
    }
}

/// Nearest-center assignment of generated points.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeCoverage {
    /// Fraction of points assigned to each center.
    pub mass: Vec<f64>,
    /// Fraction of points within the radius of their assigned center.
    pub within: f64,
}

impl ModeCoverage {
    pub fn compute(points: &Tensor, centers: &[[f64; 2]], radius: f64) -> Result<Self> {
        if points.cols() != 2 || centers.is_empty() {
            return Err(Error::invalid(
                "mode coverage needs 2-D points and at least one center",
            ));
        }
        let mut counts = vec![0usize; centers.len()];
        let mut close = 0usize;
        for r in 0..points.rows() {
            let p = points.row(r);
            let (best, d2) = centers
                .iter()
                .map(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |acc, (i, d)| if d < acc.1 { (i, d) } else { acc },
                );
            counts[best] += 1;
            if d2.sqrt() <= radius {
                close += 1;
            }
        }
        let n = points.rows() as f64;
        Ok(ModeCoverage {
            mass: counts.iter().map(|&c| c as f64 / n).collect(),
            within: close as f64 / n,
        })
    }

    /// Centers holding at least `min_mass` of the points.
    pub fn modes_hit(&self, min_mass: f64) -> usize {
        self.mass.iter().filter(|&&m| m >= min_mass).count()
    }
}

impl fmt::Display for ToyDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToyDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "8g" => Ok(ToyDataset::EightGaussians),
            "25g" => Ok(ToyDataset::TwentyFiveGaussians),
            "sr" => Ok(ToyDataset::SwissRoll),
            other => Err(Error::invalid(format!(
                "unknown dataset '{other}' (expected 8g, 25g or sr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Normal,
    Uniform,
}

/// Latent distribution `p(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prior {
    pub kind: PriorKind,
    pub dim: usize,
}

impl Default for Prior {
    fn default() -> Self {
        Prior {
            kind: PriorKind::Normal,
            dim: 2,
        }
    }
}

impl Prior {
    pub fn new(kind: PriorKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("prior dimension must be at least 1"));
        }
        Ok(Prior { kind, dim })
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Tensor> {
        if m == 0 {
            return Err(Error::invalid("sample size must be at least 1"));
        }
        let n = m * self.dim;
        let data = match self.kind {
            PriorKind::Normal => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            PriorKind::Uniform => (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        };
        Tensor::new(data, (m, self.dim))
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(PriorKind::Normal),
            "uniform" => Ok(PriorKind::Uniform),
            other => Err(Error::invalid(format!("unknown prior '{other}'"))),
        }
    }
}
