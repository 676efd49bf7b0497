//! Quality metrics for fitted mixtures — label-matched misclassification
//! rates, per-class parameter distances, a simulation-based closeness score —
//! and information-criterion model selection over the number of classes.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::em::{em_fit, EmConfig, FitResult, Responsibilities};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, frob_dot, logdet_from_cholesky};
use crate::model::{
    penalised_observed_neg_loglik, sample_mixture, Dataset, MixtureParams, PenaltyConfig,
};
use crate::seeding::derive_seed;

/// Largest class count for which the exhaustive permutation search runs.
const MAX_MATCH_CLASSES: usize = 10;

/// Outcome of matching fitted classes to reference labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatching {
    /// `permutation[j]` is the reference class assigned to fitted class `j`.
    pub permutation: Vec<usize>,
    /// Average probability mass placed on the wrong class, in `[0, 1]`.
    pub soft_error: f64,
    /// Fraction of rows whose most probable class is wrong, in `[0, 1]`.
    pub hard_error: f64,
}

/// Calls `f` with every permutation of `0..k` in lexicographic order.
fn for_each_permutation(k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(k: usize, perm: &mut Vec<usize>, used: &mut [bool], f: &mut impl FnMut(&[usize])) {
        if perm.len() == k {
            f(perm);
            return;
        }
        for j in 0..k {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                rec(k, perm, used, f);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let mut perm = Vec::with_capacity(k);
    let mut used = vec![false; k];
    rec(k, &mut perm, &mut used, f);
}

/// Soft and hard misclassification rates under the class relabelling that
/// minimises the hard rate. Fitted classes carry no inherent order, so all
/// permutations are tried; the first lexicographic minimiser wins ties.
pub fn misclassification(
    true_labels: &[usize],
    resp: &Responsibilities,
) -> Result<LabelMatching> {
    let (n, k) = (resp.n(), resp.k());
    if true_labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} responsibility rows",
            true_labels.len(),
            n
        )));
    }
    if k > MAX_MATCH_CLASSES {
        return Err(Error::TooManyClasses {
            got: k,
            max: MAX_MATCH_CLASSES,
        });
    }
    if let Some(&bad) = true_labels.iter().find(|&&z| z >= k) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {k} classes"
        )));
    }

    // soft_mass[(t, j)] = total probability rows of reference class t put on
    // fitted class j; hard_hits[(t, j)] = rows of class t whose argmax is j.
    let probs = resp.probs();
    let hard = resp.hard_labels();
    let mut soft_mass = DMatrix::<f64>::zeros(k, k);
    let mut hard_hits = DMatrix::<f64>::zeros(k, k);
    for (i, &t) in true_labels.iter().enumerate() {
        for j in 0..k {
            soft_mass[(t, j)] += probs[(i, j)];
        }
        hard_hits[(t, hard[i])] += 1.0;
    }

    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    for_each_permutation(k, &mut |perm| {
        let mut hard_correct = 0.0;
        let mut soft_correct = 0.0;
        for (j, &t) in perm.iter().enumerate() {
            hard_correct += hard_hits[(t, j)];
            soft_correct += soft_mass[(t, j)];
        }
        let hard_err = 1.0 - hard_correct / n as f64;
        if best.as_ref().map_or(true, |(h, _, _)| hard_err < *h) {
            let soft_err = (1.0 - soft_correct / n as f64).max(0.0);
            best = Some((hard_err, soft_err, perm.to_vec()));
        }
    });
    let (hard_error, soft_error, permutation) =
        best.expect("permutation search always visits at least one candidate");
    Ok(LabelMatching {
        permutation,
        soft_error,
        hard_error,
    })
}

/// Kullback–Leibler divergence between two centred Gaussians given by their
/// precision matrices: `KL(N(0, truth^-1) || N(0, est^-1))`.
pub fn kl_gaussian_precision(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> Result<f64> {
    if truth.nrows() != est.nrows() || truth.ncols() != est.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "precision shapes {}x{} vs {}x{}",
            truth.nrows(),
            truth.ncols(),
            est.nrows(),
            est.ncols()
        )));
    }
    let p = truth.nrows() as f64;
    let chol_truth = cholesky(truth, "divergence reference precision")?;
    let chol_est = cholesky(est, "divergence estimated precision")?;
    let logdet_truth = logdet_from_cholesky(&chol_truth);
    let logdet_est = logdet_from_cholesky(&chol_est);
    let trace = frob_dot(est, &chol_truth.inverse());
    Ok(0.5 * (trace - p + logdet_truth - logdet_est))
}

/// Squared Frobenius distance between two equally shaped matrices.
pub fn frobenius_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "matrix shapes {}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok((a - b).norm_squared())
}

/// Simulation-based closeness score: covariate rows are resampled with
/// replacement, responses are drawn from `params` at those covariates, and
/// each synthetic response is scored by its Euclidean distance to the nearest
/// observed response. Returns the `m` distances; small values mean the fitted
/// model generates data resembling what was observed.
pub fn abc_like_metric(
    data: &Dataset,
    params: &MixtureParams,
    m: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidConfig("need at least one synthetic draw".into()));
    }
    if data.p() != params.p() || data.q() != params.q() {
        return Err(Error::DimensionMismatch(format!(
            "data is p={}, q={} but parameters are p={}, q={}",
            data.p(),
            data.q(),
            params.p(),
            params.q()
        )));
    }
    let n = data.n();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let rows: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    let xs = DMatrix::from_fn(m, data.q(), |i, j| data.x()[(rows[i], j)]);
    let (ys, _) = sample_mixture(params, &xs, derive_seed(seed, 2))?;

    Ok(nearest_distances(&ys, data.y()))
}

/// For each row of `samples`, the Euclidean distance to the closest row of
/// `observed` (exhaustive search).
pub fn nearest_distances(samples: &DMatrix<f64>, observed: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(
        samples.ncols(),
        observed.ncols(),
        "rows must live in the same space"
    );
    let mut dists = Vec::with_capacity(samples.nrows());
    for i in 0..samples.nrows() {
        let mut best = f64::INFINITY;
        for r in 0..observed.nrows() {
            let mut d2 = 0.0;
            for c in 0..samples.ncols() {
                let diff = samples[(i, c)] - observed[(r, c)];
                d2 += diff * diff;
            }
            best = best.min(d2);
        }
        dists.push(best.sqrt());
    }
    dists
}

/// Free parameters of a `k`-class model: per class, a symmetric `p x p`
/// precision and a dense `q x p` coefficient matrix.
pub fn degrees_of_freedom(k: usize, p: usize, q: usize) -> usize {
    k * (p * (p + 1) / 2 + q * p)
}

/// Complexity penalties for model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionCriterion {
    Aic,
    Bic,
    Aicc,
}

impl std::fmt::Display for SelectionCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SelectionCriterion::Aic => "aic",
            SelectionCriterion::Bic => "bic",
            SelectionCriterion::Aicc => "aicc",
        };
        f.write_str(s)
    }
}

/// Complexity term added to `n` times the per-row negative log likelihood.
/// On that scale AIC costs `df`, BIC costs `df ln(n) / 2`, and the
/// small-sample corrected AIC costs `df + df(df + 1) / (n - df - 1)`.
pub fn criterion_value(crit: SelectionCriterion, n: usize, df: usize) -> Result<f64> {
    let dff = df as f64;
    match crit {
        SelectionCriterion::Aic => Ok(dff),
        SelectionCriterion::Bic => Ok(dff * (n as f64).ln() / 2.0),
        SelectionCriterion::Aicc => {
            if n <= df + 1 {
                return Err(Error::AiccUndefined { n, df });
            }
            Ok(dff + dff * (dff + 1.0) / (n as f64 - dff - 1.0))
        }
    }
}

/// Model-selection loss: `n` times the penalised per-row negative log
/// likelihood plus the criterion's complexity term. Lower is better.
pub fn selection_loss(
    data: &Dataset,
    params: &MixtureParams,
    pen: &PenaltyConfig,
    crit: SelectionCriterion,
) -> Result<f64> {
    let df = degrees_of_freedom(params.k(), params.p(), params.q());
    let nll = penalised_observed_neg_loglik(data, params, pen)?;
    Ok(data.n() as f64 * nll + criterion_value(crit, data.n(), df)?)
}

/// One evaluated class count in a selection sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCandidate {
    pub k: usize,
    pub loss: f64,
    /// Final penalised objective of the best restart.
    pub objective: f64,
    pub converged: bool,
    pub degenerate: bool,
}

/// Result of sweeping class counts: the winning count, every candidate's
/// loss, and the fitted model behind the winner.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub chosen_k: usize,
    pub candidates: Vec<SelectionCandidate>,
    pub best_fit: FitResult,
}

/// Fits every class count in `k_grid` (best of `restarts` seeded runs each,
/// judged by final penalised objective) and picks the count with the lowest
/// selection loss. Ties go to the smaller count.
pub fn select_k(
    data: &Dataset,
    k_grid: &[usize],
    cfg: &EmConfig,
    crit: SelectionCriterion,
    restarts: usize,
) -> Result<SelectionOutcome> {
    if k_grid.is_empty() {
        return Err(Error::InvalidConfig("class-count grid is empty".into()));
    }
    if restarts == 0 {
        return Err(Error::InvalidConfig("need at least one restart".into()));
    }
    let mut grid = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid[0] == 0 {
        return Err(Error::InvalidConfig("class counts must be positive".into()));
    }

    let mut candidates = Vec::with_capacity(grid.len());
    let mut chosen: Option<(f64, usize, FitResult)> = None;
    for &k in &grid {
        let mut best: Option<FitResult> = None;
        for restart in 0..restarts {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = derive_seed(cfg.seed, ((k as u64) << 32) | restart as u64);
            let fit = em_fit(data, k, &run_cfg)?;
            let obj = *fit
                .objective_trace
                .last()
                .expect("objective trace is never empty");
            let better = best.as_ref().map_or(true, |b| {
                obj < *b
                    .objective_trace
                    .last()
                    .expect("objective trace is never empty")
            });
            if better {
                best = Some(fit);
            }
        }
        let best = best.expect("at least one restart ran");
        let loss = selection_loss(data, &best.params, &cfg.pen, crit)?;
        candidates.push(SelectionCandidate {
            k,
            loss,
            objective: *best.objective_trace.last().unwrap(),
            converged: best.converged,
            degenerate: best.degenerate,
        });
        // Strict improvement over an ascending grid keeps the smallest count
        // among ties.
        if chosen.as_ref().map_or(true, |(l, _, _)| loss < *l) {
            chosen = Some((loss, k, best));
        }
    }
    let (_, chosen_k, best_fit) = chosen.expect("grid is non-empty");
    Ok(SelectionOutcome {
        chosen_k,
        candidates,
        best_fit,
    })
}
