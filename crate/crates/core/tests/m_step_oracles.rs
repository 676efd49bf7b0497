//! Independent checks of the M-step machinery: analytic gradients against
//! finite differences, the proximal-gradient solver against the closed-form
//! unpenalised optimum, the proximal operator against its optimality
//! conditions and a derivative-free numerical minimiser, and first-order
//! stationarity of penalised solutions.

use cggm_mix::em::sufficient_stats;
use cggm_mix::em::Responsibilities;
use cggm_mix::penalty::{
    ggl_penalty, prox_ggl, smooth_gradient, smooth_objective, soft_threshold, solve_m_step,
    unpenalized_mle, ProxConfig, SufficientStats, M_STEP_PENALTY_SCALE,
};
use cggm_mix::{ClassParams, Dataset, PenaltyConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random positive-definite precision of the form `c I + A A^T / p`.
fn random_precision(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, p, p, 0.4);
    DMatrix::identity(p, p) * (0.6 + rng.gen::<f64>()) + &a * a.transpose() / p as f64
}

fn random_classes(rng: &mut ChaCha8Rng, k: usize, p: usize, q: usize) -> Vec<ClassParams> {
    (0..k)
        .map(|_| {
            ClassParams::new(random_precision(rng, p), normal_matrix(rng, q, p, 0.6)).unwrap()
        })
        .collect()
}

/// Moments of a random dataset under random soft assignments — guaranteed to
/// be a consistent, positive semidefinite set of statistics.
fn random_stats(rng: &mut ChaCha8Rng, n: usize, p: usize, q: usize, k: usize) -> SufficientStats {
    let y = normal_matrix(rng, n, p, 1.0);
    let x = normal_matrix(rng, n, q, 1.0);
    let data = Dataset::new(y, x).unwrap();
    let mut probs = DMatrix::from_fn(n, k, |_, _| rng.gen::<f64>() + 0.05);
    for i in 0..n {
        let s: f64 = probs.row(i).iter().sum();
        for j in 0..k {
            probs[(i, j)] /= s;
        }
    }
    let resp = Responsibilities::new(probs).unwrap();
    sufficient_stats(&data, &resp).unwrap()
}

#[test]
fn gradients_match_central_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (p, q, k) = (3, 2, 2);
    let h = 1e-5;
    for _ in 0..50 {
        let stats = random_stats(&mut rng, 40, p, q, k);
        let classes = random_classes(&mut rng, k, p, q);
        let grads = smooth_gradient(&classes, &stats).unwrap();

        let eval = |classes: &[ClassParams]| smooth_objective(classes, &stats).unwrap();
        for c in 0..k {
            let lambda = classes[c].lambda();
            let theta = classes[c].theta();
            // Precision entries move as a symmetric pair, so the finite
            // difference sees d/dl_ij + d/dl_ji = 2 grad_ij off the diagonal.
            for i in 0..p {
                for j in i..p {
                    let mut plus = classes.clone();
                    let mut minus = classes.clone();
                    let mut lp = lambda.clone();
                    let mut lm = lambda.clone();
                    lp[(i, j)] += h;
                    lm[(i, j)] -= h;
                    if i != j {
                        lp[(j, i)] += h;
                        lm[(j, i)] -= h;
                    }
                    plus[c] = ClassParams::new(lp, theta.clone()).unwrap();
                    minus[c] = ClassParams::new(lm, theta.clone()).unwrap();
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = if i == j {
                        grads[c].0[(i, i)]
                    } else {
                        2.0 * grads[c].0[(i, j)]
                    };
                    assert!(
                        (fd - an).abs() <= 1e-5 * an.abs().max(1.0),
                        "precision grad ({i},{j}) class {c}: fd {fd} vs analytic {an}"
                    );
                }
            }
            for i in 0..q {
                for j in 0..p {
                    let mut plus = classes.clone();
                    let mut minus = classes.clone();
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[(i, j)] += h;
                    tm[(i, j)] -= h;
                    plus[c] = ClassParams::new(lambda.clone(), tp).unwrap();
                    minus[c] = ClassParams::new(lambda.clone(), tm).unwrap();
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = grads[c].1[(i, j)];
                    assert!(
                        (fd - an).abs() <= 1e-5 * an.abs().max(1.0),
                        "coefficient grad ({i},{j}) class {c}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }
}

fn identity_init(k: usize, p: usize, q: usize) -> Vec<ClassParams> {
    (0..k)
        .map(|_| ClassParams::new(DMatrix::identity(p, p), DMatrix::zeros(q, p)).unwrap())
        .collect()
}

fn tight_cfg() -> ProxConfig {
    ProxConfig {
        max_iters: 20_000,
        grad_tol: 1e-11,
        obj_tol: 0.0,
        ..Default::default()
    }
}

#[test]
fn zero_penalty_solver_matches_closed_form_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let start = std::time::Instant::now();
    for trial in 0..100u64 {
        let p = 1 + (trial % 5) as usize;
        let q = 1 + (trial % 3) as usize;
        let k = 1 + (trial % 2) as usize;
        let stats = random_stats(&mut rng, 60, p, q, k);
        let closed = unpenalized_mle(&stats).unwrap();
        let solved = solve_m_step(
            &identity_init(k, p, q),
            &stats,
            &PenaltyConfig::default(),
            &tight_cfg(),
        )
        .unwrap();
        for (s, c) in solved.iter().zip(&closed) {
            let dl = (s.lambda() - c.lambda()).norm() / c.lambda().norm().max(1.0);
            let dt = (s.theta() - c.theta()).norm() / c.theta().norm().max(1.0);
            assert!(
                dl <= 1e-4 && dt <= 1e-4,
                "trial {trial} (p={p}, q={q}, k={k}): precision off by {dl}, coefficients by {dt}"
            );
        }
    }
    assert!(
        start.elapsed().as_secs() < 30,
        "closed-form comparison exceeded its time budget"
    );
}

/// Gathers the cross-class vector at one matrix position.
fn group_at(stack: &[DMatrix<f64>], i: usize, j: usize) -> Vec<f64> {
    stack.iter().map(|m| m[(i, j)]).collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn prox_output_satisfies_optimality_conditions() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let alphas = [0.1, 1.0, 7.0];
    let lams = [0.0, 0.3, 2.0, 10.0];
    for trial in 0..1000 {
        let k = 1 + trial % 4;
        let (r, c) = (2, 3);
        let stack: Vec<DMatrix<f64>> = (0..k)
            .map(|_| normal_matrix(&mut rng, r, c, 3.0))
            .collect();
        let alpha = alphas[trial % alphas.len()];
        let l1 = lams[rng.gen_range(0..lams.len())];
        let l2 = lams[rng.gen_range(0..lams.len())];
        let out = prox_ggl(&stack, alpha, l1, l2).unwrap();
        for i in 0..r {
            for j in 0..c {
                let d = group_at(&stack, i, j);
                let v = group_at(&out, i, j);
                let vn = norm2(&v);
                if vn > 0.0 {
                    for kk in 0..k {
                        if v[kk] != 0.0 {
                            let resid = (v[kk] - d[kk]) / alpha
                                + l1 * v[kk].signum()
                                + l2 * v[kk] / vn;
                            assert!(
                                resid.abs() <= 1e-8 * (1.0 + d[kk].abs() / alpha),
                                "nonzero coordinate residual {resid} (trial {trial})"
                            );
                        } else {
                            assert!(
                                d[kk].abs() <= l1 * alpha + 1e-8,
                                "zero coordinate in live group violates threshold (trial {trial})"
                            );
                        }
                    }
                } else {
                    let shrunk: Vec<f64> =
                        d.iter().map(|x| soft_threshold(*x, l1 * alpha)).collect();
                    assert!(
                        norm2(&shrunk) <= l2 * alpha + 1e-8,
                        "zeroed group fails its optimality bound (trial {trial})"
                    );
                }
            }
        }
    }
}

/// Compass search over the plane with diagonal moves; adequate for convex
/// objectives whose kinks lie on the axes.
fn pattern_search_2d(h: impl Fn(f64, f64) -> f64, starts: &[(f64, f64)]) -> (f64, f64) {
    const DIRS: [(f64, f64); 8] = [
        (1.0, 0.0),
        (-1.0, 0.0),
        (0.0, 1.0),
        (0.0, -1.0),
        (1.0, 1.0),
        (1.0, -1.0),
        (-1.0, 1.0),
        (-1.0, -1.0),
    ];
    let mut best_pt = starts[0];
    let mut best_val = h(best_pt.0, best_pt.1);
    for &(sx, sy) in starts {
        let (mut x, mut y) = (sx, sy);
        let mut val = h(x, y);
        let mut step = 1.0;
        while step > 1e-11 {
            let mut moved = false;
            for (dx, dy) in DIRS {
                let cand = h(x + step * dx, y + step * dy);
                if cand < val {
                    x += step * dx;
                    y += step * dy;
                    val = cand;
                    moved = true;
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if val < best_val {
            best_val = val;
            best_pt = (x, y);
        }
    }
    best_pt
}

#[test]
fn prox_matches_numerical_minimiser_on_two_class_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for trial in 0..100 {
        let d0 = rng.gen_range(-5.0..5.0);
        let d1 = rng.gen_range(-5.0..5.0);
        let alpha = rng.gen_range(0.2..2.0);
        let l1 = rng.gen_range(0.0..3.0);
        let l2 = rng.gen_range(0.0..3.0);
        let stack = [
            DMatrix::from_element(1, 1, d0),
            DMatrix::from_element(1, 1, d1),
        ];
        let out = prox_ggl(&stack, alpha, l1, l2).unwrap();
        let (v0, v1) = (out[0][(0, 0)], out[1][(0, 0)]);

        let h = |a: f64, b: f64| {
            ((a - d0).powi(2) + (b - d1).powi(2)) / (2.0 * alpha)
                + l1 * (a.abs() + b.abs())
                + l2 * (a * a + b * b).sqrt()
        };
        let starts = [(0.0, 0.0), (d0, d1), (d0, 0.0), (0.0, d1)];
        let (n0, n1) = pattern_search_2d(h, &starts);
        assert!(
            h(v0, v1) <= h(n0, n1) + 1e-9,
            "trial {trial}: closed form {} worse than numerical {}",
            h(v0, v1),
            h(n0, n1)
        );
        assert!(
            ((v0 - n0).powi(2) + (v1 - n1).powi(2)).sqrt() <= 1e-5,
            "trial {trial}: minimisers disagree: ({v0}, {v1}) vs ({n0}, {n1})"
        );
    }
}

/// First-order optimality of the penalised solution. At a minimiser, for each
/// penalised position the cross-class group `v` with smooth gradient `g`
/// must satisfy (with `s = M_STEP_PENALTY_SCALE`):
///   nonzero coordinate: `g_k + s l1 sign(v_k) + s l2 v_k/||v|| = 0`;
///   zero coordinate, live group: `|g_k| <= s l1`;
///   zeroed group: `|| soft(g, s l1) ||_2 <= s l2`;
/// and unpenalised precision diagonals need `g_kk = 0`.
#[test]
fn penalised_solution_is_stationary() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (p, q, k) = (3, 2, 2);
    for trial in 0..30 {
        let stats = random_stats(&mut rng, 50, p, q, k);
        let pen = PenaltyConfig {
            l1_precision: rng.gen_range(0.01..0.3),
            l2_precision: rng.gen_range(0.01..0.3),
            l1_regression: rng.gen_range(0.01..0.3),
            l2_regression: rng.gen_range(0.01..0.3),
        };
        let solved = solve_m_step(&identity_init(k, p, q), &stats, &pen, &tight_cfg()).unwrap();
        let grads = smooth_gradient(&solved, &stats).unwrap();
        let lambdas: Vec<&DMatrix<f64>> = solved.iter().map(|c| c.lambda()).collect();
        let thetas: Vec<&DMatrix<f64>> = solved.iter().map(|c| c.theta()).collect();
        let tol = 2e-5;

        let check_group = |d: &[f64], g: &[f64], l1: f64, l2: f64, what: &str| {
            let dn = norm2(d);
            if dn > 0.0 {
                for kk in 0..k {
                    if d[kk] != 0.0 {
                        let r = g[kk] + l1 * d[kk].signum() + l2 * d[kk] / dn;
                        assert!(
                            r.abs() <= tol * (1.0 + g[kk].abs()),
                            "trial {trial} {what}: stationarity residual {r}"
                        );
                    } else {
                        assert!(
                            g[kk].abs() <= l1 + tol,
                            "trial {trial} {what}: zero coordinate gradient {} exceeds {l1}",
                            g[kk]
                        );
                    }
                }
            } else {
                let shrunk: Vec<f64> = g.iter().map(|x| soft_threshold(*x, l1)).collect();
                assert!(
                    norm2(&shrunk) <= l2 + tol,
                    "trial {trial} {what}: zeroed group violates its bound"
                );
            }
        };

        let grad_l: Vec<DMatrix<f64>> = grads.iter().map(|g| g.0.clone()).collect();
        let grad_t: Vec<DMatrix<f64>> = grads.iter().map(|g| g.1.clone()).collect();
        for i in 0..p {
            assert!(
                (0..k).all(|kk| grad_l[kk][(i, i)].abs() <= tol * (1.0 + lambdas[kk][(i, i)])),
                "trial {trial}: unpenalised diagonal ({i},{i}) not stationary"
            );
            for j in 0..p {
                if i == j {
                    continue;
                }
                let d: Vec<f64> = lambdas.iter().map(|m| m[(i, j)]).collect();
                let g: Vec<f64> = grad_l.iter().map(|m| m[(i, j)]).collect();
                check_group(
                    &d,
                    &g,
                    M_STEP_PENALTY_SCALE * pen.l1_precision,
                    M_STEP_PENALTY_SCALE * pen.l2_precision,
                    &format!("precision ({i},{j})"),
                );
            }
        }
        for i in 0..q {
            for j in 0..p {
                let d: Vec<f64> = thetas.iter().map(|m| m[(i, j)]).collect();
                let g: Vec<f64> = grad_t.iter().map(|m| m[(i, j)]).collect();
                check_group(
                    &d,
                    &g,
                    M_STEP_PENALTY_SCALE * pen.l1_regression,
                    M_STEP_PENALTY_SCALE * pen.l2_regression,
                    &format!("coefficient ({i},{j})"),
                );
            }
        }

        // Local-minimality probe: random feasible perturbations never improve
        // the penalised objective.
        let f = |classes: &[ClassParams]| {
            smooth_objective(classes, &stats).unwrap()
                + M_STEP_PENALTY_SCALE * ggl_penalty(classes, &pen).unwrap()
        };
        let f_star = f(&solved);
        for _ in 0..20 {
            let mut pert = Vec::with_capacity(k);
            for cpar in &solved {
                let mut l = cpar.lambda().clone();
                let mut bump = normal_matrix(&mut rng, p, p, 1e-3);
                bump = (&bump + bump.transpose()) * 0.5;
                l += bump;
                let t = cpar.theta() + normal_matrix(&mut rng, q, p, 1e-3);
                match ClassParams::new(l, t) {
                    Ok(cp) => pert.push(cp),
                    Err(_) => break,
                }
            }
            if pert.len() == k {
                assert!(
                    f(&pert) >= f_star - 1e-9 * (1.0 + f_star.abs()),
                    "trial {trial}: a nearby point beats the returned solution"
                );
            }
        }
    }
}

#[test]
fn overwhelming_group_penalty_zeroes_its_block_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (p, q, k) = (4, 2, 2);
    let stats = random_stats(&mut rng, 80, p, q, k);
    let scale = stats
        .classes()
        .iter()
        .flat_map(|c| c.s_yy().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    // Crush the precision off-diagonals only: solution is exactly diagonal.
    let pen = PenaltyConfig {
        l2_precision: 1e3 * scale,
        ..Default::default()
    };
    let solved = solve_m_step(&identity_init(k, p, q), &stats, &pen, &ProxConfig::default())
        .unwrap();
    for (kk, cpar) in solved.iter().enumerate() {
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    assert_eq!(
                        cpar.lambda()[(i, j)],
                        0.0,
                        "class {kk} precision ({i},{j}) escaped the penalty"
                    );
                }
            }
        }
        assert!(
            cpar.theta().iter().any(|v| *v != 0.0),
            "unpenalised coefficients should stay in play"
        );
    }

    // Crush the coefficients only: they vanish, off-diagonals survive.
    let pen = PenaltyConfig {
        l2_regression: 1e3 * scale,
        ..Default::default()
    };
    let solved = solve_m_step(&identity_init(k, p, q), &stats, &pen, &ProxConfig::default())
        .unwrap();
    for cpar in &solved {
        assert!(
            cpar.theta().iter().all(|v| *v == 0.0),
            "coefficients should be exactly zero under an overwhelming penalty"
        );
    }
}
