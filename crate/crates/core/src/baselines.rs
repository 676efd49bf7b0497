//! Reference methods the conditional mixture is compared against: a plain
//! Gaussian graphical mixture on the raw responses, and the same mixture on
//! residuals of a single pooled linear regression.

use nalgebra::DMatrix;

use crate::em::{em_fit, EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::Dataset;

/// Pooled ordinary least squares fit of the responses on the covariates.
#[derive(Debug, Clone)]
pub struct OlsFit {
    /// q x p coefficient matrix.
    pub beta: DMatrix<f64>,
    /// n x p residuals y - x beta.
    pub residuals: DMatrix<f64>,
}

/// Least squares through a QR factorisation of the design matrix. The
/// normal equations are never formed.
pub fn ols_fit(data: &Dataset) -> Result<OlsFit> {
    let (n, q) = (data.n(), data.q());
    if n < q {
        return Err(Error::TooFewRows { need: q, got: n });
    }
    let qr = data.x().clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || r.diagonal().iter().any(|v| v.abs() < 1e-10 * scale) {
        return Err(Error::RankDeficient);
    }
    let mut beta = qr.q().transpose() * data.y();
    if !r.solve_upper_triangular_mut(&mut beta) {
        return Err(Error::RankDeficient);
    }
    let residuals = data.y() - data.x() * &beta;
    Ok(OlsFit { beta, residuals })
}

/// Strips the covariates and fits an unconditional Gaussian graphical
/// mixture: the design is replaced by a single constant column, so each
/// class's coefficient row is (minus) its scaled mean, and the regression
/// penalty is forced to zero to leave means unpenalised.
pub fn ggm_mixture_fit(y: &DMatrix<f64>, k: usize, cfg: &EmConfig) -> Result<FitResult> {
    let ones = DMatrix::from_element(y.nrows(), 1, 1.0);
    let data = Dataset::new(y.clone(), ones)?;
    let mut cfg = cfg.clone();
    cfg.pen.l1_regression = 0.0;
    cfg.pen.l2_regression = 0.0;
    em_fit(&data, k, &cfg)
}

/// Two-stage baseline result: the pooled regression and the mixture fitted
/// on its residuals.
#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub ols: OlsFit,
    pub fit: FitResult,
}

/// Regress once over the pooled data, then fit an unconditional mixture on
/// the residuals.
pub fn residual_ggm_mixture_fit(data: &Dataset, k: usize, cfg: &EmConfig) -> Result<ResidualFit> {
    let ols = ols_fit(data)?;
    let fit = ggm_mixture_fit(&ols.residuals, k, cfg)?;
    Ok(ResidualFit { ols, fit })
}
