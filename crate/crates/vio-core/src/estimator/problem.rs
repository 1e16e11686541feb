//! The window optimizer: assembles prior, inertial, and visual factors into
//! dense normal equations over `[keyframe error states | inverse depths]`
//! and runs Levenberg-Marquardt with multiplicative damping.
//!
//! Robustness: visual residuals pass through an IRLS Huber weight; the
//! accept/reject decision always uses the true robust cost, so accepted
//! steps never increase it. Determinism: factors are linearized in their
//! stored order with sequential accumulation.

use nalgebra::{DMatrix, DVector};

use crate::geometry::Vec3;
use crate::preintegration::NavState;

use super::imu_factor::ImuFactor;
use super::marginal::GaussianPrior;
use super::visual::{visual_residual, Extrinsics};
use super::{EstimatorError, MIN_INVERSE_DEPTH};

/// One term of the window objective.
#[derive(Debug, Clone)]
pub enum Factor {
    Imu(ImuFactor),
    Visual {
        /// Index into `WindowProblem::inv_depths`.
        feature: usize,
        anchor: usize,
        target: usize,
        bearing_anchor: Vec3,
        bearing_target: Vec3,
    },
    Prior(GaussianPrior),
}

/// Mutable optimization state plus the factors constraining it.
#[derive(Debug, Clone)]
pub struct WindowProblem {
    pub states: Vec<NavState>,
    pub inv_depths: Vec<f64>,
    pub extrinsics: Extrinsics,
    pub factors: Vec<Factor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Accepted-step relative cost decrease below this stops iterating.
    pub cost_rel_tol: f64,
    pub step_tol: f64,
    /// Huber threshold on the whitened visual residual norm; `None` = L2.
    pub huber_delta: Option<f64>,
    /// Isotropic bearing noise (unit-sphere radians); 1.5 px at fx = 320.
    pub bearing_sigma: f64,
    pub initial_mu: f64,
    pub mu_cap: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            cost_rel_tol: 1e-8,
            step_tol: 1e-10,
            huber_delta: Some(1.0),
            bearing_sigma: 1.5 / 320.0,
            initial_mu: 1e-6,
            mu_cap: 1e12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    /// Cost after each accepted iterate, starting with the initial cost.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Damping cap reached; the best iterate so far was kept.
    pub diverged: bool,
    /// Features whose transformed point collapsed; excluded this solve.
    pub degenerate_features: Vec<usize>,
}

/// Huber ρ(s) on the whitened residual norm; quadratic core, linear tail.
fn robust_cost(s: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if s > d => d * (2.0 * s - d),
        _ => s * s,
    }
}

/// IRLS weight w(s) with √w applied to residual and Jacobian.
pub(super) fn robust_weight(s: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if s > d => d / s,
        _ => 1.0,
    }
}

struct Linearization {
    cost: f64,
    h: DMatrix<f64>,
    g: DVector<f64>,
    degenerate: Vec<usize>,
}

fn evaluate(
    problem: &WindowProblem,
    config: &SolverConfig,
    with_matrices: bool,
) -> Linearization {
    let n = problem.states.len();
    let dim = 15 * n + problem.inv_depths.len();
    let mut h = DMatrix::zeros(if with_matrices { dim } else { 0 }, if with_matrices { dim } else { 0 });
    let mut g = DVector::zeros(if with_matrices { dim } else { 0 });
    let mut cost = 0.0;
    let mut degenerate = Vec::new();

    for factor in &problem.factors {
        match factor {
            Factor::Imu(f) => {
                let (r, j_k, j_k1) = f.linearize(&problem.states[f.from], &problem.states[f.to]);
                let r_w = f.whiten_vec(&r);
                cost += r_w.norm_squared();
                if with_matrices {
                    let jk_w = f.whiten_mat(&j_k);
                    let jk1_w = f.whiten_mat(&j_k1);
                    let (a, b) = (15 * f.from, 15 * f.to);
                    scatter_block(&mut h, a, a, &(jk_w.transpose() * jk_w));
                    scatter_block(&mut h, a, b, &(jk_w.transpose() * jk1_w));
                    scatter_block(&mut h, b, a, &(jk1_w.transpose() * jk_w));
                    scatter_block(&mut h, b, b, &(jk1_w.transpose() * jk1_w));
                    scatter_vec(&mut g, a, &(jk_w.transpose() * r_w));
                    scatter_vec(&mut g, b, &(jk1_w.transpose() * r_w));
                }
            }
            Factor::Visual {
                feature,
                anchor,
                target,
                bearing_anchor,
                bearing_target,
            } => {
                let lambda = problem.inv_depths[*feature];
                let eval = match visual_residual(
                    *bearing_anchor,
                    *bearing_target,
                    &problem.states[*anchor],
                    &problem.states[*target],
                    lambda.max(MIN_INVERSE_DEPTH),
                    &problem.extrinsics,
                ) {
                    Some(e) => e,
                    None => {
                        degenerate.push(*feature);
                        continue;
                    }
                };
                let inv_sigma = 1.0 / config.bearing_sigma;
                let r_w = eval.residual * inv_sigma;
                let s = r_w.norm();
                cost += robust_cost(s, config.huber_delta);
                if with_matrices {
                    let sw = robust_weight(s, config.huber_delta).sqrt();
                    let r_s = r_w * sw;
                    let ji = eval.j_pose_i * (inv_sigma * sw);
                    let jj = eval.j_pose_j * (inv_sigma * sw);
                    let jl = eval.j_lambda * (inv_sigma * sw);
                    let (a, b) = (15 * anchor, 15 * target);
                    let l = 15 * n + feature;

                    scatter_block(&mut h, a, a, &(ji.transpose() * ji));
                    scatter_block(&mut h, a, b, &(ji.transpose() * jj));
                    scatter_block(&mut h, b, a, &(jj.transpose() * ji));
                    scatter_block(&mut h, b, b, &(jj.transpose() * jj));
                    let jil = ji.transpose() * jl;
                    let jjl = jj.transpose() * jl;
                    for row in 0..6 {
                        h[(a + row, l)] += jil[row];
                        h[(l, a + row)] += jil[row];
                        h[(b + row, l)] += jjl[row];
                        h[(l, b + row)] += jjl[row];
                    }
                    h[(l, l)] += jl.dot(&jl);
                    scatter_vec(&mut g, a, &(ji.transpose() * r_s));
                    scatter_vec(&mut g, b, &(jj.transpose() * r_s));
                    g[l] += jl.dot(&r_s);
                }
            }
            Factor::Prior(prior) => {
                let r = prior.residual(&problem.states);
                cost += r.norm_squared();
                if with_matrices {
                    // Column chunk i of the prior Jacobian belongs to the
                    // keyframe in slot prior.keyframes[i].
                    for (bi, &slot_i) in prior.keyframes.iter().enumerate() {
                        let j_i = prior.jacobian.columns(15 * bi, 15);
                        for (bj, &slot_j) in prior.keyframes.iter().enumerate() {
                            let j_j = prior.jacobian.columns(15 * bj, 15);
                            let block = j_i.transpose() * j_j;
                            for r_ in 0..15 {
                                for c_ in 0..15 {
                                    h[(15 * slot_i + r_, 15 * slot_j + c_)] += block[(r_, c_)];
                                }
                            }
                        }
                        let gv = j_i.transpose() * &r;
                        for r_ in 0..15 {
                            g[15 * slot_i + r_] += gv[r_];
                        }
                    }
                }
            }
        }
    }
    degenerate.sort_unstable();
    degenerate.dedup();
    Linearization {
        cost,
        h,
        g,
        degenerate,
    }
}

fn scatter_block<const R: usize, const C: usize>(
    h: &mut DMatrix<f64>,
    row: usize,
    col: usize,
    block: &nalgebra::SMatrix<f64, R, C>,
) {
    for r in 0..R {
        for c in 0..C {
            h[(row + r, col + c)] += block[(r, c)];
        }
    }
}

fn scatter_vec<const R: usize>(
    g: &mut DVector<f64>,
    row: usize,
    block: &nalgebra::SVector<f64, R>,
) {
    for r in 0..R {
        g[row + r] += block[r];
    }
}

/// Applies an error-state step to every keyframe and inverse depth.
fn apply_step(problem: &WindowProblem, dx: &DVector<f64>) -> (Vec<NavState>, Vec<f64>) {
    let n = problem.states.len();
    let states = problem
        .states
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let d = dx.rows(15 * i, 15);
            x.retract(
                Vec3::new(d[0], d[1], d[2]),
                Vec3::new(d[3], d[4], d[5]),
                Vec3::new(d[6], d[7], d[8]),
                Vec3::new(d[9], d[10], d[11]),
                Vec3::new(d[12], d[13], d[14]),
            )
        })
        .collect();
    let inv_depths = problem
        .inv_depths
        .iter()
        .enumerate()
        .map(|(i, &l)| (l + dx[15 * n + i]).max(MIN_INVERSE_DEPTH))
        .collect();
    (states, inv_depths)
}

/// Total robust cost of the problem at its current states.
pub fn total_cost(problem: &WindowProblem, config: &SolverConfig) -> f64 {
    evaluate(problem, config, false).cost
}

/// Levenberg-Marquardt on the window. Mutates `problem` in place toward the
/// minimum and reports the accepted-cost trace.
pub fn solve_window(
    problem: &mut WindowProblem,
    config: &SolverConfig,
) -> Result<SolveOutcome, EstimatorError> {
    if problem.states.len() < 2 {
        return Err(EstimatorError::TooFewKeyframes {
            found: problem.states.len(),
        });
    }

    let mut mu = config.initial_mu;
    let mut lin = evaluate(problem, config, true);
    let mut costs = vec![lin.cost];
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;

    'outer: for _ in 0..config.max_iterations {
        iterations += 1;
        let dim = lin.h.nrows();
        let step = loop {
            let damped = &lin.h + DMatrix::identity(dim, dim) * mu;
            match nalgebra::Cholesky::new(damped) {
                Some(chol) => {
                    let dx = chol.solve(&(-&lin.g));
                    let (states, inv_depths) = apply_step(problem, &dx);
                    let candidate = WindowProblem {
                        states,
                        inv_depths,
                        extrinsics: problem.extrinsics,
                        factors: problem.factors.clone(),
                    };
                    let cand_cost = evaluate(&candidate, config, false).cost;
                    if cand_cost < lin.cost {
                        break (dx, candidate, cand_cost);
                    }
                }
                None => {}
            }
            mu *= 10.0;
            if mu > config.mu_cap {
                diverged = true;
                break 'outer;
            }
        };
        let (dx, candidate, cand_cost) = step;
        problem.states = candidate.states;
        problem.inv_depths = candidate.inv_depths;
        mu = (mu / 3.0).max(1e-12);

        let prev = *costs.last().unwrap();
        costs.push(cand_cost);
        lin = evaluate(problem, config, true);

        if (prev - cand_cost) < config.cost_rel_tol * prev.max(1e-300)
            || dx.norm() < config.step_tol
        {
            converged = true;
            break;
        }
    }

    for l in &mut problem.inv_depths {
        *l = l.max(MIN_INVERSE_DEPTH);
    }

    Ok(SolveOutcome {
        costs,
        iterations,
        converged,
        diverged,
        degenerate_features: lin.degenerate,
    })
}
