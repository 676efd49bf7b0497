//! Group graphical lasso penalty, its proximal operator, and the
//! proximal-gradient solver for the penalised M step.
//!
//! The smooth M-step objective is, summed over classes,
//!
//! ```text
//! g = -(n_k/n) ln det(lambda_k) + <lambda_k, S_yy_k>
//!     + 2 tr(theta_k S_yx_k) + <theta_k lambda_k^-1 theta_k^T, S_xx_k>
//! ```
//!
//! which is twice the responsibility-weighted average negative log likelihood
//! up to an additive constant; its stationary point at zero penalty is the
//! classwise conditional Gaussian MLE.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ClassParams, PenaltyConfig};

/// The smooth objective `g` is twice the average complete-data negative log
/// likelihood, so the penalty enters the M step doubled. This keeps the
/// penalised observed objective tracked by the EM loop monotone: the M step
/// then descends on 2 x (average NLL + penalty).
pub const M_STEP_PENALTY_SCALE: f64 = 2.0;

/// Responsibility-weighted second moments for one class, all scaled by 1/n:
/// `s_yy = (1/n) sum_i r_i y_i y_i^T` and so on, `n_k = sum_i r_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    n_k: f64,
    s_yy: DMatrix<f64>,
    s_yx: DMatrix<f64>,
    s_xx: DMatrix<f64>,
}

impl ClassStats {
    pub fn new(
        n_k: f64,
        s_yy: DMatrix<f64>,
        s_yx: DMatrix<f64>,
        s_xx: DMatrix<f64>,
    ) -> Result<Self> {
        if !(n_k.is_finite() && n_k >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "class weight n_k must be finite and nonnegative, got {n_k}"
            )));
        }
        let (p, q) = (s_yy.nrows(), s_xx.nrows());
        if s_yy.ncols() != p || s_xx.ncols() != q || s_yx.nrows() != p || s_yx.ncols() != q {
            return Err(Error::DimensionMismatch(format!(
                "moment shapes disagree: s_yy {}x{}, s_yx {}x{}, s_xx {}x{}",
                s_yy.nrows(),
                s_yy.ncols(),
                s_yx.nrows(),
                s_yx.ncols(),
                s_xx.nrows(),
                s_xx.ncols()
            )));
        }
        for (name, m) in [("s_yy", &s_yy), ("s_yx", &s_yx), ("s_xx", &s_xx)] {
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        for (name, m) in [("s_yy", &s_yy), ("s_xx", &s_xx)] {
            let asym = linalg::max_relative_asymmetry(m);
            if asym > 1e-8 {
                return Err(Error::NotSymmetric {
                    context: name.into(),
                    max_asym: asym,
                });
            }
            psd_check(m, name)?;
        }
        let mut s_yy = s_yy;
        let mut s_xx = s_xx;
        linalg::symmetrize(&mut s_yy);
        linalg::symmetrize(&mut s_xx);
        Ok(Self { n_k, s_yy, s_yx, s_xx })
    }

    pub fn n_k(&self) -> f64 {
        self.n_k
    }

    pub fn s_yy(&self) -> &DMatrix<f64> {
        &self.s_yy
    }

    pub fn s_yx(&self) -> &DMatrix<f64> {
        &self.s_yx
    }

    pub fn s_xx(&self) -> &DMatrix<f64> {
        &self.s_xx
    }
}

/// PSD within floating-point tolerance: a tiny diagonal ridge must make the
/// Cholesky succeed.
fn psd_check(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let scale = m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let ridged = m + DMatrix::identity(m.nrows(), m.ncols()) * (1e-9 * scale);
    if nalgebra::Cholesky::new(ridged).is_none() {
        return Err(Error::NotPositiveDefinite {
            context: format!("{name} (PSD check)"),
        });
    }
    Ok(())
}

/// Weighted moments for all classes of one dataset; `n` is the row count.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    n: f64,
    classes: Vec<ClassStats>,
}

impl SufficientStats {
    pub fn new(n: f64, classes: Vec<ClassStats>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidConfig("no class statistics".into()));
        }
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidConfig(format!("row count must be positive, got {n}")));
        }
        let (p, q) = (classes[0].s_yy.nrows(), classes[0].s_xx.nrows());
        if classes.iter().any(|c| c.s_yy.nrows() != p || c.s_xx.nrows() != q) {
            return Err(Error::DimensionMismatch(
                "class statistics have inconsistent shapes".into(),
            ));
        }
        let total: f64 = classes.iter().map(|c| c.n_k).sum();
        if (total - n).abs() > 1e-8 * n.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "class weights sum to {total} but n = {n}"
            )));
        }
        Ok(Self { n, classes })
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn p(&self) -> usize {
        self.classes[0].s_yy.nrows()
    }

    pub fn q(&self) -> usize {
        self.classes[0].s_xx.nrows()
    }

    pub fn classes(&self) -> &[ClassStats] {
        &self.classes
    }
}

/// Step-size and stopping controls for the proximal-gradient M step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProxConfig {
    pub alpha0: f64,
    pub beta: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub obj_tol: f64,
}

impl Default for ProxConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            beta: 0.5,
            max_iters: 500,
            grad_tol: 1e-6,
            obj_tol: 1e-10,
        }
    }
}

impl ProxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0.is_finite() && self.alpha0 > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidConfig(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.grad_tol.is_finite() && self.grad_tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("grad_tol must be nonnegative, got {}", self.grad_tol)));
        }
        if !(self.obj_tol.is_finite() && self.obj_tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("obj_tol must be nonnegative, got {}", self.obj_tol)));
        }
        Ok(())
    }
}

/// sign(x) * max(|x| - lam, 0)
pub fn soft_threshold(x: f64, lam: f64) -> f64 {
    if x > lam {
        x - lam
    } else if x < -lam {
        x + lam
    } else {
        0.0
    }
}

/// Group graphical lasso penalty over a stack of classes.
///
/// Precision matrices contribute over off-diagonal entries only (both (i,j)
/// and (j,i) count); coefficient matrices contribute over every entry. Each
/// position pays `l1 * sum_k |v_k| + l2 * sqrt(sum_k v_k^2)`.
pub fn ggl_penalty(classes: &[ClassParams], pen: &PenaltyConfig) -> Result<f64> {
    pen.validate()?;
    if classes.is_empty() {
        return Err(Error::InvalidConfig("no classes".into()));
    }
    let (p, q) = (classes[0].p(), classes[0].q());
    if classes.iter().any(|c| c.p() != p || c.q() != q) {
        return Err(Error::DimensionMismatch("classes have mixed shapes".into()));
    }
    let lambdas: Vec<&DMatrix<f64>> = classes.iter().map(|c| c.lambda()).collect();
    let thetas: Vec<&DMatrix<f64>> = classes.iter().map(|c| c.theta()).collect();
    Ok(ggl_penalty_raw(&lambdas, &thetas, pen))
}

fn group_terms(values: impl Iterator<Item = f64> + Clone, l1: f64, l2: f64) -> f64 {
    let abs_sum: f64 = values.clone().map(f64::abs).sum();
    let sq_sum: f64 = values.map(|v| v * v).sum();
    l1 * abs_sum + l2 * sq_sum.sqrt()
}

pub(crate) fn ggl_penalty_raw(
    lambdas: &[&DMatrix<f64>],
    thetas: &[&DMatrix<f64>],
    pen: &PenaltyConfig,
) -> f64 {
    let p = lambdas[0].nrows();
    let q = thetas[0].nrows();
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            total += group_terms(
                lambdas.iter().map(move |l| l[(i, j)]),
                pen.l1_precision,
                pen.l2_precision,
            );
        }
    }
    for i in 0..q {
        for j in 0..p {
            total += group_terms(
                thetas.iter().map(move |t| t[(i, j)]),
                pen.l1_regression,
                pen.l2_regression,
            );
        }
    }
    total
}

/// Closed-form proximal operator of `alpha * (l1 sum_k |.| + l2 ||.||_2)`
/// applied independently to each entry position across the stack.
///
/// Per position: soft-threshold each class value by `l1 * alpha`, then shrink
/// the surviving vector by `max(1 - l2 * alpha / ||a||, 0)`; a group whose
/// thresholded norm is at most `l2 * alpha` is zeroed outright, so the 0/0
/// case never produces NaN.
pub fn prox_ggl(stack: &[DMatrix<f64>], alpha: f64, l1: f64, l2: f64) -> Result<Vec<DMatrix<f64>>> {
    if stack.is_empty() {
        return Err(Error::InvalidConfig("empty stack".into()));
    }
    let shape = stack[0].shape();
    if stack.iter().any(|m| m.shape() != shape) {
        return Err(Error::DimensionMismatch("stack matrices have mixed shapes".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    if !(l1.is_finite() && l1 >= 0.0 && l2.is_finite() && l2 >= 0.0) {
        return Err(Error::InvalidConfig("penalty weights must be finite and nonnegative".into()));
    }
    let mut out: Vec<DMatrix<f64>> = stack.to_vec();
    let mut group = vec![0.0; stack.len()];
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            for (k, m) in stack.iter().enumerate() {
                group[k] = soft_threshold(m[(i, j)], l1 * alpha);
            }
            let norm = group.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm <= l2 * alpha { 0.0 } else { 1.0 - l2 * alpha / norm };
            for (k, m) in out.iter_mut().enumerate() {
                m[(i, j)] = group[k] * scale;
            }
        }
    }
    Ok(out)
}

fn check_stats_shapes(stats: &SufficientStats, lambdas: &[DMatrix<f64>], thetas: &[DMatrix<f64>]) -> Result<()> {
    if lambdas.len() != stats.k() || thetas.len() != stats.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter classes for {} statistics classes",
            lambdas.len(),
            stats.k()
        )));
    }
    let (p, q) = (stats.p(), stats.q());
    if lambdas.iter().any(|l| l.nrows() != p || l.ncols() != p)
        || thetas.iter().any(|t| t.nrows() != q || t.ncols() != p)
    {
        return Err(Error::DimensionMismatch(
            "parameter shapes disagree with statistics shapes".into(),
        ));
    }
    Ok(())
}

/// tr(a b) for a: m x n, b: n x m.
fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.nrows(), b.ncols());
    debug_assert_eq!(a.ncols(), b.nrows());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Smooth part of the M-step objective; `+inf` when any precision candidate
/// fails its Cholesky, which the line search treats as out of domain.
pub(crate) fn smooth_objective_raw(
    lambdas: &[DMatrix<f64>],
    thetas: &[DMatrix<f64>],
    stats: &SufficientStats,
) -> f64 {
    let mut total = 0.0;
    for (k, cs) in stats.classes().iter().enumerate() {
        let chol = match nalgebra::Cholesky::new(lambdas[k].clone()) {
            Some(c) => c,
            None => return f64::INFINITY,
        };
        let logdet = linalg::logdet_from_cholesky(&chol);
        let b = chol.solve(&thetas[k].transpose());
        total += -(cs.n_k / stats.n) * logdet
            + linalg::frob_dot(&lambdas[k], &cs.s_yy)
            + 2.0 * trace_prod(&thetas[k], &cs.s_yx)
            + linalg::frob_dot(&(&thetas[k] * &b), &cs.s_xx);
    }
    total
}

/// Typed wrapper over the raw smooth objective.
pub fn smooth_objective(classes: &[ClassParams], stats: &SufficientStats) -> Result<f64> {
    let lambdas: Vec<DMatrix<f64>> = classes.iter().map(|c| c.lambda().clone()).collect();
    let thetas: Vec<DMatrix<f64>> = classes.iter().map(|c| c.theta().clone()).collect();
    check_stats_shapes(stats, &lambdas, &thetas)?;
    Ok(smooth_objective_raw(&lambdas, &thetas, stats))
}

pub(crate) fn smooth_gradient_raw(
    lambdas: &[DMatrix<f64>],
    thetas: &[DMatrix<f64>],
    stats: &SufficientStats,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let mut grads = Vec::with_capacity(stats.k());
    for (k, cs) in stats.classes().iter().enumerate() {
        let chol = linalg::cholesky(&lambdas[k], &format!("lambda[{k}]"))?;
        let lambda_inv = chol.inverse();
        // b = lambda^-1 theta^T, shared by both blocks
        let b = chol.solve(&thetas[k].transpose());
        let mut grad_lambda = -(cs.n_k / stats.n) * &lambda_inv + &cs.s_yy - &b * &cs.s_xx * b.transpose();
        linalg::symmetrize(&mut grad_lambda);
        let grad_theta = 2.0 * (cs.s_yx.transpose() + &cs.s_xx * b.transpose());
        grads.push((grad_lambda, grad_theta));
    }
    Ok(grads)
}

/// Gradient of the smooth objective for each class: the precision block is
/// `-(n_k/n) lambda^-1 + s_yy - lambda^-1 theta^T s_xx theta lambda^-1`
/// (symmetrised) and the coefficient block is
/// `2 s_yx^T + 2 s_xx theta lambda^-1`.
pub fn smooth_gradient(
    classes: &[ClassParams],
    stats: &SufficientStats,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let lambdas: Vec<DMatrix<f64>> = classes.iter().map(|c| c.lambda().clone()).collect();
    let thetas: Vec<DMatrix<f64>> = classes.iter().map(|c| c.theta().clone()).collect();
    check_stats_shapes(stats, &lambdas, &thetas)?;
    smooth_gradient_raw(&lambdas, &thetas, stats)
}

/// Exact minimiser of the smooth objective for each class (no penalty):
/// the classwise conditional Gaussian MLE. With rescaled moments
/// `sb = (n/n_k) s`, the precision solves
/// `lambda^-1 = sb_yy - sb_yx sb_xx^-1 sb_yx^T` and
/// `theta = -sb_xx^-1 sb_yx^T lambda`.
pub fn unpenalized_mle(stats: &SufficientStats) -> Result<Vec<ClassParams>> {
    let mut out = Vec::with_capacity(stats.k());
    for (k, cs) in stats.classes().iter().enumerate() {
        if cs.n_k <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "class {k} has zero responsibility mass; its MLE is undefined"
            )));
        }
        let scale = stats.n / cs.n_k;
        let sb_yy = &cs.s_yy * scale;
        let sb_yx = &cs.s_yx * scale;
        let sb_xx = &cs.s_xx * scale;
        let xx_chol = linalg::cholesky(&sb_xx, &format!("class {k} s_xx"))?;
        // w = sb_xx^-1 sb_yx^T, q x p
        let w = xx_chol.solve(&sb_yx.transpose());
        let mut cond_cov = sb_yy - &sb_yx * &w;
        linalg::symmetrize(&mut cond_cov);
        let cov_chol = linalg::cholesky(&cond_cov, &format!("class {k} conditional covariance"))?;
        let lambda = cov_chol.inverse();
        let theta = -(&w * &lambda);
        out.push(ClassParams::new(lambda, theta)?);
    }
    Ok(out)
}

struct Candidate {
    lambdas: Vec<DMatrix<f64>>,
    thetas: Vec<DMatrix<f64>>,
    /// `<grad g, G>` for the generalised gradient `G = (cur - candidate)/alpha`.
    step_dot: f64,
    /// `||G||^2` summed over every parameter block.
    step_norm_sq: f64,
}

fn propose(
    lambdas: &[DMatrix<f64>],
    thetas: &[DMatrix<f64>],
    grads: &[(DMatrix<f64>, DMatrix<f64>)],
    alpha: f64,
    pen: &PenaltyConfig,
) -> Result<Candidate> {
    let k = lambdas.len();
    let mut lambda_steps = Vec::with_capacity(k);
    let mut theta_steps = Vec::with_capacity(k);
    for i in 0..k {
        lambda_steps.push(&lambdas[i] - alpha * &grads[i].0);
        theta_steps.push(&thetas[i] - alpha * &grads[i].1);
    }
    let mut new_lambdas = prox_ggl(
        &lambda_steps,
        alpha,
        M_STEP_PENALTY_SCALE * pen.l1_precision,
        M_STEP_PENALTY_SCALE * pen.l2_precision,
    )?;
    // The penalty never touches precision diagonals: they take the plain
    // gradient step. Re-symmetrise to wash out floating-point drift.
    for (nl, step) in new_lambdas.iter_mut().zip(&lambda_steps) {
        for d in 0..nl.nrows() {
            nl[(d, d)] = step[(d, d)];
        }
        linalg::symmetrize(nl);
    }
    let new_thetas = prox_ggl(
        &theta_steps,
        alpha,
        M_STEP_PENALTY_SCALE * pen.l1_regression,
        M_STEP_PENALTY_SCALE * pen.l2_regression,
    )?;

    let mut step_dot = 0.0;
    let mut step_norm_sq = 0.0;
    for i in 0..k {
        let gl = (&lambdas[i] - &new_lambdas[i]) / alpha;
        let gt = (&thetas[i] - &new_thetas[i]) / alpha;
        step_dot += linalg::frob_dot(&grads[i].0, &gl) + linalg::frob_dot(&grads[i].1, &gt);
        step_norm_sq += gl.norm_squared() + gt.norm_squared();
    }
    Ok(Candidate {
        lambdas: new_lambdas,
        thetas: new_thetas,
        step_dot,
        step_norm_sq,
    })
}

/// Penalised M step: proximal gradient descent with backtracking line search,
/// warm-started from `init`. Minimises
/// `smooth_objective + M_STEP_PENALTY_SCALE * ggl_penalty`.
///
/// Each iteration proposes `prox_alpha(theta - alpha grad g)`, halving alpha
/// until the candidate both keeps every precision matrix positive definite
/// (a failed Cholesky counts as objective +inf) and satisfies the sufficient
/// decrease condition
/// `g(cand) <= g(cur) - alpha <grad, G> + (alpha/2) ||G||^2`
/// for the generalised gradient `G = (cur - cand)/alpha`. The accepted step
/// size carries over to the next iteration, where it may grow by one
/// backtracking factor. Stops when `||G||` falls below `grad_tol`, the
/// relative objective decrease falls below `obj_tol`, or `max_iters` is
/// reached. The penalised objective never increases along accepted steps.
pub fn solve_m_step(
    init: &[ClassParams],
    stats: &SufficientStats,
    pen: &PenaltyConfig,
    cfg: &ProxConfig,
) -> Result<Vec<ClassParams>> {
    pen.validate()?;
    cfg.validate()?;
    let mut lambdas: Vec<DMatrix<f64>> = init.iter().map(|c| c.lambda().clone()).collect();
    let mut thetas: Vec<DMatrix<f64>> = init.iter().map(|c| c.theta().clone()).collect();
    check_stats_shapes(stats, &lambdas, &thetas)?;

    const MAX_HALVINGS: u32 = 60;
    // The smooth part can be very flat (its curvature shrinks as the fitted
    // precisions grow), so the useful step size may be orders of magnitude
    // above `alpha0`. The accepted step is carried between iterations and
    // allowed to grow by `1/beta` per iteration; backtracking still shrinks
    // it whenever the sufficient-decrease test fails, so every accepted step
    // decreases the penalised objective.
    const ALPHA_MAX: f64 = 1e9;
    let penalty_of = |ls: &[DMatrix<f64>], ts: &[DMatrix<f64>]| {
        let lr: Vec<&DMatrix<f64>> = ls.iter().collect();
        let tr: Vec<&DMatrix<f64>> = ts.iter().collect();
        M_STEP_PENALTY_SCALE * ggl_penalty_raw(&lr, &tr, pen)
    };

    let mut g_cur = smooth_objective_raw(&lambdas, &thetas, stats);
    if !g_cur.is_finite() {
        return Err(Error::NotPositiveDefinite {
            context: "initial precision matrices".into(),
        });
    }
    let mut f_cur = g_cur + penalty_of(&lambdas, &thetas);

    let mut alpha_trial = cfg.alpha0;
    for _ in 0..cfg.max_iters {
        let grads = smooth_gradient_raw(&lambdas, &thetas, stats)?;
        let mut alpha = alpha_trial;
        let mut halvings = 0u32;
        let (cand, g_new) = loop {
            let cand = propose(&lambdas, &thetas, &grads, alpha, pen)?;
            let g_new = smooth_objective_raw(&cand.lambdas, &cand.thetas, stats);
            let bound = g_cur - alpha * cand.step_dot + 0.5 * alpha * cand.step_norm_sq;
            let slack = 1e-12 * (1.0 + g_cur.abs());
            if g_new.is_finite() && g_new <= bound + slack {
                break (cand, g_new);
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(Error::LineSearchFailed {
                    halvings,
                    objective: f_cur,
                });
            }
            alpha *= cfg.beta;
        };
        alpha_trial = (alpha / cfg.beta).min(ALPHA_MAX);

        lambdas = cand.lambdas;
        thetas = cand.thetas;
        let f_new = g_new + penalty_of(&lambdas, &thetas);
        debug_assert!(
            f_new <= f_cur + 1e-9 * (1.0 + f_cur.abs()),
            "penalised M-step objective rose from {f_cur} to {f_new}"
        );
        let grad_norm = cand.step_norm_sq.sqrt();
        let rel_decrease = (f_cur - f_new) / f_cur.abs().max(1.0);
        g_cur = g_new;
        f_cur = f_new;
        if grad_norm <= cfg.grad_tol || rel_decrease.abs() <= cfg.obj_tol {
            break;
        }
    }

    lambdas
        .into_iter()
        .zip(thetas)
        .map(|(l, t)| ClassParams::new(l, t))
        .collect()
}
