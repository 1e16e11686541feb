//! Schur-complement marginalization. Factors touching the states being
//! dropped are linearized once, their information is condensed onto the
//! retained states, and the result is carried forward as a dense Gaussian
//! prior in square-root form: residual `r₀ + J·(x ⊟ x_lin)`.
//!
//! The prior's Jacobian stays frozen at the linearization point (the usual
//! first-estimates compromise); only the residual is re-evaluated as the
//! retained states move.

use nalgebra::{DMatrix, DVector};

use crate::preintegration::{NavState, Vec15};

/// Error-state difference `x ⊟ lin` in the keyframe layout
/// `[δp, δθ, δv, δb_f, δb_ω]`.
pub fn nav_boxminus(x: &NavState, lin: &NavState) -> Vec15 {
    let mut d = Vec15::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&(x.p - lin.p));
    d.fixed_rows_mut::<3>(3).copy_from(&x.q.boxminus(&lin.q));
    d.fixed_rows_mut::<3>(6).copy_from(&(x.v - lin.v));
    d.fixed_rows_mut::<3>(9)
        .copy_from(&(x.bias_accel - lin.bias_accel));
    d.fixed_rows_mut::<3>(12)
        .copy_from(&(x.bias_gyro - lin.bias_gyro));
    d
}

/// Dense Gaussian prior over a set of keyframes, in square-root form.
/// Serves both as the marginalization carrier and as the initial anchor
/// that fixes the gauge at startup.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    /// Window slots covered, ascending; each contributes 15 error columns.
    pub keyframes: Vec<usize>,
    /// Linearization point per covered keyframe, same order.
    pub lin_points: Vec<NavState>,
    /// rows × (15·keyframes.len()); JᵀJ is the carried information.
    pub jacobian: DMatrix<f64>,
    pub residual0: DVector<f64>,
}

impl GaussianPrior {
    pub fn dim(&self) -> usize {
        15 * self.keyframes.len()
    }

    /// Residual at the current states: r₀ + J·(x ⊟ lin).
    pub fn residual(&self, states: &[NavState]) -> DVector<f64> {
        let mut delta = DVector::zeros(self.dim());
        for (i, (&slot, lin)) in self.keyframes.iter().zip(&self.lin_points).enumerate() {
            let d = nav_boxminus(&states[slot], lin);
            delta.rows_mut(15 * i, 15).copy_from(&d);
        }
        &self.residual0 + &self.jacobian * delta
    }

    /// Anchor prior on a single keyframe: independent 1/σ weights per
    /// error-state component, linearized at `x`.
    pub fn anchor(
        slot: usize,
        x: &NavState,
        sigma_p: f64,
        sigma_theta: f64,
        sigma_v: f64,
        sigma_bias: f64,
    ) -> Self {
        let mut jacobian = DMatrix::zeros(15, 15);
        let w = [
            sigma_p, sigma_p, sigma_p, sigma_theta, sigma_theta, sigma_theta, sigma_v, sigma_v,
            sigma_v, sigma_bias, sigma_bias, sigma_bias, sigma_bias, sigma_bias, sigma_bias,
        ];
        for (i, s) in w.iter().enumerate() {
            jacobian[(i, i)] = 1.0 / s;
        }
        Self {
            keyframes: vec![slot],
            lin_points: vec![x.clone()],
            jacobian,
            residual0: DVector::zeros(15),
        }
    }

    /// Rewrites slot indices after the window dropped its oldest keyframe.
    pub fn shift_slots_down(&mut self) {
        for slot in &mut self.keyframes {
            *slot -= 1;
        }
    }
}

/// Outcome of a Schur elimination.
pub struct MarginalizeOutcome {
    pub prior: GaussianPrior,
    /// The eliminated block was not positive definite and the elimination
    /// fell back to a scaled diagonal bump or a spectral pseudo-inverse.
    pub regularized: bool,
}

/// Eliminates the leading `marg_dim` rows/columns of the information system
/// `(h, g)` and packages the retained quadratic as a square-root prior over
/// `retained` (slot indices and linearization points, matching the retained
/// column order).
pub fn marginalize(
    mut h: DMatrix<f64>,
    g: DVector<f64>,
    marg_dim: usize,
    retained: Vec<usize>,
    lin_points: Vec<NavState>,
) -> MarginalizeOutcome {
    let total = h.nrows();
    let keep = total - marg_dim;
    assert_eq!(g.len(), total);
    assert_eq!(retained.len(), lin_points.len());
    assert_eq!(15 * retained.len(), keep, "retained blocks must cover keep");

    // Symmetrize; assembly rounding must not leak into the eigensolve.
    h = (&h + h.transpose()) * 0.5;

    let h_mm = h.view((0, 0), (marg_dim, marg_dim)).into_owned();
    let h_mr = h.view((0, marg_dim), (marg_dim, keep)).into_owned();
    let h_rr = h.view((marg_dim, marg_dim), (keep, keep)).into_owned();
    let g_m = g.rows(0, marg_dim).into_owned();
    let g_r = g.rows(marg_dim, keep).into_owned();

    let (inv_mm_times_mr, inv_mm_times_gm, regularized) =
        match nalgebra::Cholesky::new(h_mm.clone()) {
            Some(chol) => (chol.solve(&h_mr), chol.solve(&g_m), false),
            None => {
                // The block is PSD in exact arithmetic, but when factor
                // weights differ by many orders of magnitude (a strongly
                // overconfident process noise against pixel-level visual
                // terms) assembly rounding leaves negative pivots whose size
                // scales with the block norm, so the bump must scale too.
                let bump = h_mm.diagonal().amax().max(1.0) * 1e-9;
                let bumped = &h_mm + DMatrix::identity(marg_dim, marg_dim) * bump;
                match nalgebra::Cholesky::new(bumped) {
                    Some(chol) => (chol.solve(&h_mr), chol.solve(&g_m), true),
                    None => {
                        // Still indefinite: eliminate through the spectral
                        // pseudo-inverse with the same relative eigenvalue
                        // floor the retained prior uses.
                        let eig = nalgebra::SymmetricEigen::new(h_mm.clone());
                        let max_eig =
                            eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
                        let floor = max_eig.max(1.0) * 1e-12;
                        let mut inv = DVector::zeros(marg_dim);
                        for i in 0..marg_dim {
                            if eig.eigenvalues[i] > floor {
                                inv[i] = 1.0 / eig.eigenvalues[i];
                            }
                        }
                        let pinv = &eig.eigenvectors
                            * DMatrix::from_diagonal(&inv)
                            * eig.eigenvectors.transpose();
                        (&pinv * &h_mr, &pinv * &g_m, true)
                    }
                }
            }
        };

    let h_schur = &h_rr - h_mr.transpose() * &inv_mm_times_mr;
    let g_schur = &g_r - h_mr.transpose() * &inv_mm_times_gm;

    MarginalizeOutcome {
        prior: prior_from_information(h_schur, g_schur, retained, lin_points),
        regularized,
    }
}

/// Converts an information pair (H, g) into square-root form with
/// eigenvalue flooring at zero: J = S^{1/2} Vᵀ, r₀ = S^{-1/2} Vᵀ g
/// (pseudo-inverse on the floored part).
pub fn prior_from_information(
    h: DMatrix<f64>,
    g: DVector<f64>,
    keyframes: Vec<usize>,
    lin_points: Vec<NavState>,
) -> GaussianPrior {
    let n = h.nrows();
    let sym = (&h + h.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let floor = max_eig.max(1.0) * 1e-12;

    let mut sqrt_s = DVector::zeros(n);
    let mut inv_sqrt_s = DVector::zeros(n);
    for i in 0..n {
        let lam = eig.eigenvalues[i];
        if lam > floor {
            sqrt_s[i] = lam.sqrt();
            inv_sqrt_s[i] = 1.0 / lam.sqrt();
        }
        // Negative or negligible eigenvalues are floored to zero: the
        // corresponding directions carry no information.
    }
    let vt = eig.eigenvectors.transpose();
    let jacobian = DMatrix::from_diagonal(&sqrt_s) * &vt;
    let residual0 = DMatrix::from_diagonal(&inv_sqrt_s) * (vt * g);

    GaussianPrior {
        keyframes,
        lin_points,
        jacobian,
        residual0,
    }
}
