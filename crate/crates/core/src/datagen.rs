//! Synthetic benchmark generators: a two-dimensional toy design whose class
//! structure is invisible in the raw responses, and a sparse
//! higher-dimensional design with class-specific precision and coefficient
//! supports.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_mixture, ClassParams, Dataset, MixtureParams};
use crate::seeding::derive_seed;

/// A generated benchmark: observations, the class each row was drawn from,
/// and the generating parameters.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub data: Dataset,
    pub labels: Vec<usize>,
    pub truth: MixtureParams,
}

/// Two classes in the plane with a scalar covariate. Regression vectors sit
/// opposite each other and are rotated off the axes; the two precision
/// matrices are axis-aligned with swapped strong directions, so the classes
/// overlap pairwise in raw response space and differ only once the covariate
/// effect is removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n: usize,
    pub beta1: [f64; 2],
    pub beta2: [f64; 2],
    pub rotation_deg: f64,
    pub lambda1_diag: [f64; 2],
    pub lambda2_diag: [f64; 2],
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n: 500,
            beta1: [2.5, 0.0],
            beta2: [-2.5, 0.0],
            rotation_deg: 45.0,
            lambda1_diag: [1.0, 4.0],
            lambda2_diag: [4.0, 1.0],
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("toy n must be positive".into()));
        }
        let diags = self
            .lambda1_diag
            .iter()
            .chain(self.lambda2_diag.iter());
        for d in diags {
            if !(d.is_finite() && *d > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "precision diagonals must be positive, got {d}"
                )));
            }
        }
        if !(self.rotation_deg.is_finite()
            && self.beta1.iter().chain(self.beta2.iter()).all(|v| v.is_finite()))
        {
            return Err(Error::InvalidConfig("toy parameters must be finite".into()));
        }
        Ok(())
    }
}

/// The toy design: x is a Rademacher sign, the class a fair coin, and
/// y = beta_z x + noise with classwise precision. The coefficient matrix of
/// the equivalent conditional model is `theta_z = -(lambda_z beta_z)^T`.
pub fn gen_toy_2d(cfg: &ToyConfig, seed: u64) -> Result<GeneratedData> {
    cfg.validate()?;
    let rad = cfg.rotation_deg.to_radians();
    let rot = DMatrix::from_row_slice(2, 2, &[rad.cos(), -rad.sin(), rad.sin(), rad.cos()]);
    let mut classes = Vec::with_capacity(2);
    for (beta, diag) in [
        (cfg.beta1, cfg.lambda1_diag),
        (cfg.beta2, cfg.lambda2_diag),
    ] {
        let beta = &rot * DVector::from_row_slice(&beta);
        let lambda = DMatrix::from_diagonal(&DVector::from_row_slice(&diag));
        let neg_lb = -(&lambda * beta);
        let theta = DMatrix::from_row_slice(1, neg_lb.len(), neg_lb.as_slice());
        classes.push(ClassParams::new(lambda, theta)?);
    }
    let truth = MixtureParams::new(classes, vec![0.5, 0.5])?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let xs = DMatrix::from_fn(cfg.n, 1, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 });
    let (y, labels) = sample_mixture(&truth, &xs, derive_seed(seed, 2))?;
    Ok(GeneratedData {
        data: Dataset::new(y, xs)?,
        labels,
        truth,
    })
}

/// Higher-dimensional design with classwise sparse precisions and sparse
/// coefficient supports; covariates are Rademacher signs plus a trailing
/// constant-one column acting as an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighDimConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    /// Off-diagonal pairs that are nonzero in each class's precision.
    pub lambda_pair_counts: Vec<usize>,
    /// Nonzero entries in each class's coefficient matrix, including the
    /// forced leading diagonal.
    pub theta_support_counts: Vec<usize>,
    pub lambda_magnitude: [f64; 2],
    pub theta_magnitude: [f64; 2],
}

impl Default for HighDimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 10,
            q: 5,
            k: 3,
            lambda_pair_counts: vec![7, 16, 2],
            theta_support_counts: vec![11, 14, 4],
            lambda_magnitude: [0.2, 0.6],
            theta_magnitude: [0.5, 1.5],
        }
    }
}

impl HighDimConfig {
    fn forced_diag(&self) -> usize {
        4.min(self.q).min(self.p)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.q == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("n, p, q, k must all be positive".into()));
        }
        if self.lambda_pair_counts.len() != self.k || self.theta_support_counts.len() != self.k {
            return Err(Error::InvalidConfig(format!(
                "need {} per-class counts, got {} precision and {} coefficient entries",
                self.k,
                self.lambda_pair_counts.len(),
                self.theta_support_counts.len()
            )));
        }
        let max_pairs = self.p * (self.p - 1) / 2;
        if let Some(&c) = self.lambda_pair_counts.iter().find(|&&c| c > max_pairs) {
            return Err(Error::InvalidConfig(format!(
                "precision pair count {c} exceeds {max_pairs} available pairs"
            )));
        }
        let forced = self.forced_diag();
        for &c in &self.theta_support_counts {
            if c < forced || c > self.q * self.p {
                return Err(Error::InvalidConfig(format!(
                    "coefficient support {c} outside [{forced}, {}]",
                    self.q * self.p
                )));
            }
        }
        for [lo, hi] in [self.lambda_magnitude, self.theta_magnitude] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "magnitude range [{lo}, {hi}] must satisfy 0 < lo <= hi"
                )));
            }
        }
        Ok(())
    }
}

/// Draws `magnitude in [lo, hi]` with a random sign.
fn signed_magnitude(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    sign * rng.gen_range(range[0]..=range[1])
}

/// Sparse symmetric positive definite precision matrix: `n_pairs` distinct
/// off-diagonal pairs get signed magnitudes from `magnitude`, then each
/// diagonal entry is set to 1 + (absolute off-diagonal row sum) + 0.1, which
/// makes the matrix strictly diagonally dominant and hence SPD.
pub fn gen_sparse_spd_precision(
    p: usize,
    n_pairs: usize,
    magnitude: [f64; 2],
    seed: u64,
) -> Result<DMatrix<f64>> {
    if p == 0 {
        return Err(Error::InvalidConfig("p must be positive".into()));
    }
    let max_pairs = p * (p - 1) / 2;
    if n_pairs > max_pairs {
        return Err(Error::InvalidConfig(format!(
            "{n_pairs} pairs requested but only {max_pairs} exist for p = {p}"
        )));
    }
    if !(magnitude[0].is_finite() && magnitude[1].is_finite())
        || magnitude[0] <= 0.0
        || magnitude[0] > magnitude[1]
    {
        return Err(Error::InvalidConfig(format!(
            "magnitude range [{}, {}] must satisfy 0 < lo <= hi",
            magnitude[0], magnitude[1]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
        .collect();
    for t in 0..n_pairs {
        let j = rng.gen_range(t..pairs.len());
        pairs.swap(t, j);
    }
    let mut m = DMatrix::zeros(p, p);
    for &(i, j) in pairs.iter().take(n_pairs) {
        let v = signed_magnitude(&mut rng, magnitude);
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    for i in 0..p {
        let row_abs: f64 = (0..p).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
        m[(i, i)] = 1.0 + row_abs + 0.1;
    }
    Ok(m)
}

pub fn gen_highdim(cfg: &HighDimConfig, seed: u64) -> Result<GeneratedData> {
    cfg.validate()?;
    let (p, q, k) = (cfg.p, cfg.q, cfg.k);
    let forced = cfg.forced_diag();
    let mut classes = Vec::with_capacity(k);
    for kk in 0..k {
        let lambda = gen_sparse_spd_precision(
            p,
            cfg.lambda_pair_counts[kk],
            cfg.lambda_magnitude,
            derive_seed(seed, 100 + kk as u64),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 200 + kk as u64));
        let mut theta = DMatrix::zeros(q, p);
        for i in 0..forced {
            theta[(i, i)] = signed_magnitude(&mut rng, cfg.theta_magnitude);
        }
        let mut free: Vec<(usize, usize)> = (0..q)
            .flat_map(|i| (0..p).map(move |j| (i, j)))
            .filter(|&(i, j)| !(i == j && i < forced))
            .collect();
        let extra = cfg.theta_support_counts[kk] - forced;
        for t in 0..extra {
            let j = rng.gen_range(t..free.len());
            free.swap(t, j);
        }
        for &(i, j) in free.iter().take(extra) {
            theta[(i, j)] = signed_magnitude(&mut rng, cfg.theta_magnitude);
        }
        classes.push(ClassParams::new(lambda, theta)?);
    }
    let truth = MixtureParams::new(classes, vec![1.0 / k as f64; k])?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let xs = DMatrix::from_fn(cfg.n, q, |_, j| {
        if j + 1 == q {
            1.0
        } else if rng.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    });
    let (y, labels) = sample_mixture(&truth, &xs, derive_seed(seed, 2))?;
    Ok(GeneratedData {
        data: Dataset::new(y, xs)?,
        labels,
        truth,
    })
}
