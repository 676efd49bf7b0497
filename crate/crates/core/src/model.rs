//! Parameter types and densities for conditional Gaussian graphical models.
//!
//! A class is parameterised by a precision matrix `lambda` (p x p, SPD) and a
//! coefficient matrix `theta` (q x p). Conditionally on covariates x, the
//! response is Gaussian with mean `-lambda^-1 theta^T x` and covariance
//! `lambda^-1`. A mixture adds a weight simplex over K such classes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::penalty;

const LN_2PI: f64 = 1.8378770664093453;

/// Maximum relative row asymmetry accepted before a precision matrix is
/// rejected instead of silently symmetrised.
const ASYMMETRY_TOL: f64 = 1e-8;

/// Observed sample: responses `y` (n x p) paired with covariates `x` (n x q).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(Error::TooFewRows { need: 1, got: 0 });
        }
        if y.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "y has {} rows but x has {}",
                y.nrows(),
                x.nrows()
            )));
        }
        if y.ncols() == 0 || x.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "y and x must each have at least one column".into(),
            ));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("y".into()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("x".into()));
        }
        Ok(Self { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Dataset restricted to the given row indices (used by subsampling).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return Err(Error::DimensionMismatch(format!(
                "row index {bad} out of range for {} rows",
                self.n()
            )));
        }
        Dataset::new(self.y.select_rows(rows), self.x.select_rows(rows))
    }
}

/// Parameters of a single conditional Gaussian class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassParams {
    lambda: DMatrix<f64>,
    theta: DMatrix<f64>,
}

impl ClassParams {
    /// Validates shapes, finiteness, symmetry, and positive definiteness.
    /// Asymmetry up to `1e-8` relative is averaged away; larger is an error.
    pub fn new(lambda: DMatrix<f64>, theta: DMatrix<f64>) -> Result<Self> {
        if lambda.nrows() != lambda.ncols() || lambda.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "lambda must be square and nonempty, got {}x{}",
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        if theta.ncols() != lambda.nrows() || theta.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "theta must be q x p with p = {}, got {}x{}",
                lambda.nrows(),
                theta.nrows(),
                theta.ncols()
            )));
        }
        if !lambda.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("lambda".into()));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        let asym = linalg::max_relative_asymmetry(&lambda);
        if asym > ASYMMETRY_TOL {
            return Err(Error::NotSymmetric {
                context: "lambda".into(),
                max_asym: asym,
            });
        }
        let mut lambda = lambda;
        linalg::symmetrize(&mut lambda);
        linalg::cholesky(&lambda, "lambda")?;
        Ok(Self { lambda, theta })
    }

    pub fn p(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn q(&self) -> usize {
        self.theta.nrows()
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }
}

/// A K-class mixture: per-class parameters plus a weight simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    classes: Vec<ClassParams>,
    weights: Vec<f64>,
}

impl MixtureParams {
    pub fn new(classes: Vec<ClassParams>, weights: Vec<f64>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidConfig("mixture needs at least one class".into()));
        }
        let (p, q) = (classes[0].p(), classes[0].q());
        if let Some((k, c)) = classes
            .iter()
            .enumerate()
            .find(|(_, c)| c.p() != p || c.q() != q)
        {
            return Err(Error::DimensionMismatch(format!(
                "class {k} has shape p={}, q={} but class 0 has p={p}, q={q}",
                c.p(),
                c.q()
            )));
        }
        if weights.len() != classes.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} classes",
                weights.len(),
                classes.len()
            )));
        }
        if !weights.iter().all(|w| w.is_finite() && (0.0..=1.0).contains(w)) {
            return Err(Error::InvalidWeights("weights must lie in [0, 1]".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self { classes, weights })
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn p(&self) -> usize {
        self.classes[0].p()
    }

    pub fn q(&self) -> usize {
        self.classes[0].q()
    }

    pub fn classes(&self) -> &[ClassParams] {
        &self.classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mixture parameters serialise")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidParams(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct ClassParamsRepr {
    lambda: Vec<Vec<f64>>,
    theta: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MixtureParamsRepr {
    p: usize,
    q: usize,
    weights: Vec<f64>,
    classes: Vec<ClassParamsRepr>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn rows_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidParams(format!("{what} has no rows")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidParams(format!("{what} rows are ragged or empty")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl Serialize for MixtureParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = MixtureParamsRepr {
            p: self.p(),
            q: self.q(),
            weights: self.weights.clone(),
            classes: self
                .classes
                .iter()
                .map(|c| ClassParamsRepr {
                    lambda: matrix_rows(c.lambda()),
                    theta: matrix_rows(c.theta()),
                })
                .collect(),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MixtureParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let repr = MixtureParamsRepr::deserialize(deserializer)?;
        let mut classes = Vec::with_capacity(repr.classes.len());
        for (k, c) in repr.classes.iter().enumerate() {
            let lambda = rows_matrix(&c.lambda, &format!("class {k} lambda"))
                .map_err(D::Error::custom)?;
            let theta =
                rows_matrix(&c.theta, &format!("class {k} theta")).map_err(D::Error::custom)?;
            if lambda.nrows() != repr.p || theta.nrows() != repr.q || theta.ncols() != repr.p {
                return Err(D::Error::custom(format!(
                    "class {k} shapes disagree with declared p={}, q={}",
                    repr.p, repr.q
                )));
            }
            classes.push(ClassParams::new(lambda, theta).map_err(D::Error::custom)?);
        }
        MixtureParams::new(classes, repr.weights).map_err(D::Error::custom)
    }
}

/// Group graphical lasso weights. `l1` terms penalise entries class by class,
/// `l2` terms penalise each entry's vector across classes. Precision weights
/// never touch the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub l1_precision: f64,
    pub l2_precision: f64,
    pub l1_regression: f64,
    pub l2_regression: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            l1_precision: 0.0,
            l2_precision: 0.0,
            l1_regression: 0.0,
            l2_regression: 0.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.l1_precision,
            self.l2_precision,
            self.l1_regression,
            self.l2_regression,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "penalty weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// `-lambda^-1 theta^T x`, the conditional response mean of one class.
pub fn conditional_mean(x: &DVector<f64>, class: &ClassParams) -> Result<DVector<f64>> {
    if x.len() != class.q() {
        return Err(Error::DimensionMismatch(format!(
            "x has length {} but theta has {} rows",
            x.len(),
            class.q()
        )));
    }
    let chol = linalg::cholesky(class.lambda(), "lambda")?;
    let u = class.theta().transpose() * x;
    Ok(-chol.solve(&u))
}

/// Log density of one response under one class, conditionally on x.
///
/// Works through the Cholesky factor of lambda: the log determinant comes from
/// the factor diagonal and the quadratic form from triangular solves, so the
/// precision matrix is never inverted.
pub fn log_density_cggm(y: &DVector<f64>, x: &DVector<f64>, class: &ClassParams) -> Result<f64> {
    if y.len() != class.p() {
        return Err(Error::DimensionMismatch(format!(
            "y has length {} but lambda is {p}x{p}",
            y.len(),
            p = class.p()
        )));
    }
    if x.len() != class.q() {
        return Err(Error::DimensionMismatch(format!(
            "x has length {} but theta has {} rows",
            x.len(),
            class.q()
        )));
    }
    let p = class.p() as f64;
    let chol = linalg::cholesky(class.lambda(), "lambda")?;
    let logdet = linalg::logdet_from_cholesky(&chol);
    let m = y + chol.solve(&(class.theta().transpose() * x));
    let w = chol.l().transpose() * m;
    Ok(0.5 * logdet - 0.5 * p * LN_2PI - 0.5 * w.norm_squared())
}

/// Per-row, per-class log densities for a whole dataset (n x K).
pub fn log_density_matrix(data: &Dataset, params: &MixtureParams) -> Result<DMatrix<f64>> {
    if params.p() != data.p() || params.q() != data.q() {
        return Err(Error::DimensionMismatch(format!(
            "data has p={}, q={} but parameters have p={}, q={}",
            data.p(),
            data.q(),
            params.p(),
            params.q()
        )));
    }
    let n = data.n();
    let k = params.k();
    let p = data.p() as f64;
    let mut out = DMatrix::zeros(n, k);
    for (kk, class) in params.classes().iter().enumerate() {
        let chol = linalg::cholesky(class.lambda(), &format!("lambda[{kk}]"))?;
        let logdet = linalg::logdet_from_cholesky(&chol);
        let base = 0.5 * logdet - 0.5 * p * LN_2PI;
        // Columns of m hold y_i + lambda^-1 theta^T x_i.
        let u = (data.x() * class.theta()).transpose();
        let m = data.y().transpose() + chol.solve(&u);
        let w = chol.l().transpose() * m;
        for i in 0..n {
            out[(i, kk)] = base - 0.5 * w.column(i).norm_squared();
        }
    }
    Ok(out)
}

/// Penalised negative observed log likelihood, averaged over rows:
/// `-(1/n) sum_i ln sum_k pi_k p_k(y_i | x_i) + pen(theta)`.
///
/// Mixture terms are combined in the log domain through log-sum-exp; classes
/// with zero weight drop out exactly.
pub fn penalised_observed_neg_loglik(
    data: &Dataset,
    params: &MixtureParams,
    pen: &PenaltyConfig,
) -> Result<f64> {
    pen.validate()?;
    let dens = log_density_matrix(data, params)?;
    let log_w: Vec<f64> = params.weights().iter().map(|w| w.ln()).collect();
    let mut total = 0.0;
    let mut row = vec![0.0; params.k()];
    for i in 0..data.n() {
        for k in 0..params.k() {
            row[k] = log_w[k] + dens[(i, k)];
        }
        total += log_sum_exp(&row);
    }
    Ok(-total / data.n() as f64 + penalty::ggl_penalty(params.classes(), pen)?)
}

/// log(sum exp(v)) with the max factored out; -inf entries drop out.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Draws one response row per covariate row. Class labels are sampled from
/// the weight simplex, then y from the class conditional law via a Cholesky
/// factor of the covariance. Returns (y, labels), labels 0-based.
pub fn sample_mixture(
    params: &MixtureParams,
    xs: &DMatrix<f64>,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if xs.ncols() != params.q() {
        return Err(Error::DimensionMismatch(format!(
            "xs has {} columns but parameters have q={}",
            xs.ncols(),
            params.q()
        )));
    }
    if !xs.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("xs".into()));
    }
    let p = params.p();
    let m = xs.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    struct Sampler {
        // -lambda^-1 theta^T, maps x to the conditional mean
        mean_map: DMatrix<f64>,
        // lower Cholesky factor of the covariance lambda^-1
        cov_factor: DMatrix<f64>,
    }
    let mut samplers = Vec::with_capacity(params.k());
    for (kk, class) in params.classes().iter().enumerate() {
        let chol = linalg::cholesky(class.lambda(), &format!("lambda[{kk}]"))?;
        let mean_map = -chol.solve(&class.theta().transpose());
        let cov = chol.inverse();
        let cov_chol = linalg::cholesky(&cov, &format!("covariance[{kk}]"))?;
        samplers.push(Sampler {
            mean_map,
            cov_factor: cov_chol.l(),
        });
    }

    let mut y = DMatrix::zeros(m, p);
    let mut labels = Vec::with_capacity(m);
    let mut eps = DVector::zeros(p);
    for i in 0..m {
        let u: f64 = rng.gen();
        let mut z = params.k() - 1;
        let mut acc = 0.0;
        for (kk, w) in params.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                z = kk;
                break;
            }
        }
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let x_i = DVector::from_iterator(params.q(), xs.row(i).iter().copied());
        let draw = &samplers[z].mean_map * x_i + &samplers[z].cov_factor * &eps;
        y.row_mut(i).copy_from(&draw.transpose());
        labels.push(z);
    }
    Ok((y, labels))
}
