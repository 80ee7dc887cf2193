//! Parametric sensitivity of the footstep QP to DCM measurement errors.
//!
//! The measured DCM is modelled as `zeta_hat = zeta + theta`. Holding the
//! true DCM fixed, the equality rows become `h_j(x) + theta_j c_j(x) = 0`
//! with `c_j(x) = -exp(-omega0 t) gamma`. Differentiating the KKT system
//!
//! ```text
//!     grad f - G u + sum_j w_j (grad h_j + theta_j grad c_j) = 0
//!     u_i g_i(x)                                               = 0
//!     h_j(x) + theta_j c_j(x)                                  = 0
//! ```
//!
//! at `theta = 0` gives `d(x, u, w)/d theta = -J_state^{-1} J_theta`.
//! Row order of every 13-row quantity is
//! `(p_x, p_y, gamma, b_x, b_y, u_1..u_6, w_1, w_2)`.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::qp::{reciprocal_condition, QpSolution, STRICT_COMPLEMENTARITY_TOL};
use crate::sequencer::{
    self, SequencerError, SequencerParams, StanceContext, IDX_GAMMA, NUM_EQ, NUM_INEQ, NUM_VARS,
};

/// Size of the stacked KKT unknown `(x, u, w)`.
pub const KKT_DIM: usize = NUM_VARS + NUM_INEQ + NUM_EQ;

/// Labels of the rows of [`SensitivityResult::d_full`].
pub const ROW_LABELS: [&str; KKT_DIM] = [
    "p_x", "p_y", "gamma", "b_x", "b_y", "u1", "u2", "u3", "u4", "u5", "u6", "w1", "w2",
];

/// Central-difference step used by the re-solve oracle (m).
pub const FD_STEP: f64 = 1e-6;

const INDEPENDENCE_RCOND: f64 = 1e-12;
const JACOBIAN_RCOND: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error(transparent)]
    Sequencer(#[from] SequencerError),
    #[error(
        "constraint {index} is weakly active (g = {value:.3e}, u = {multiplier:.3e}); strict complementarity fails"
    )]
    WeakActivity {
        index: usize,
        value: f64,
        multiplier: f64,
    },
    #[error("KKT jacobian is singular ({reason}); condition number {condition_number:.3e}")]
    SingularJacobian {
        reason: String,
        condition_number: f64,
    },
    #[error("finite-difference stencil crosses an active-set change along axis {axis}")]
    ActiveSetChange { axis: usize },
}

/// Optimal primal/dual point of the footstep QP at `theta = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub params: SequencerParams,
    pub context: StanceContext,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    /// `g_i(x)` for the six inequalities.
    pub constraint_values: DVector<f64>,
    pub active_set: Vec<usize>,
}

impl KktPoint {
    pub fn solve(params: &SequencerParams, ctx: &StanceContext) -> Result<Self, SensitivityError> {
        let problem = sequencer::build_problem(params, ctx)?;
        let QpSolution {
            x,
            u,
            w,
            active_set,
            ..
        } = crate::qp::solve(&problem).map_err(SequencerError::from)?;
        let constraint_values = problem.ineq_values(&x);
        Ok(Self {
            params: *params,
            context: *ctx,
            x,
            u,
            w,
            constraint_values,
            active_set,
        })
    }

    /// Objective Hessian, `2 diag(a1, a1, a2, a3, a3)`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let p = &self.params;
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            2.0 * p.alpha1,
            2.0 * p.alpha1,
            2.0 * p.alpha2,
            2.0 * p.alpha3,
            2.0 * p.alpha3,
        ]))
    }

    /// Inequality gradients as columns (`G`, 5 x 6).
    pub fn inequality_gradients(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(NUM_VARS, NUM_INEQ);
        for (i, var) in [0, 0, 1, 1, 2, 2].into_iter().enumerate() {
            g[(var, i)] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        g
    }

    /// Residual of the stationarity rows, infinity norm.
    pub fn stationarity_residual(&self) -> f64 {
        let terms = perturbed_equality_terms(&self.params, &self.context);
        let grad_f = self.objective_gradient();
        let r = grad_f - self.inequality_gradients() * &self.u + terms.h_jacobian() * &self.w;
        r.amax()
    }

    fn objective_gradient(&self) -> DVector<f64> {
        let problem = sequencer::build_problem(&self.params, &self.context)
            .expect("context was valid when the point was solved");
        &problem.hessian * &self.x + &problem.linear
    }
}

/// Equality rows split into the DCM-dynamics part `h_j` and the
/// perturbation coefficient `c_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedEqualities {
    pub support: Vector2<f64>,
    /// True DCM `zeta`.
    pub dcm: Vector2<f64>,
    /// `exp(-omega0 t)`.
    pub decay: f64,
}

/// Perturbation terms at a stance, taking the context's DCM as the true one.
pub fn perturbed_equality_terms(
    params: &SequencerParams,
    ctx: &StanceContext,
) -> PerturbedEqualities {
    PerturbedEqualities {
        support: ctx.support,
        dcm: ctx.dcm,
        decay: (-params.omega0() * ctx.elapsed).exp(),
    }
}

impl PerturbedEqualities {
    pub fn h(&self, x: &DVector<f64>) -> Vector2<f64> {
        let p = Vector2::new(x[0], x[1]);
        let b = Vector2::new(x[3], x[4]);
        p + b - self.support - (self.dcm - self.support) * self.decay * x[IDX_GAMMA]
    }

    pub fn c(&self, x: &DVector<f64>) -> Vector2<f64> {
        let v = -self.decay * x[IDX_GAMMA];
        Vector2::new(v, v)
    }

    /// `h_j + theta_j c_j`.
    pub fn perturbed(&self, x: &DVector<f64>, theta: &Vector2<f64>) -> Vector2<f64> {
        self.h(x) + self.c(x).component_mul(theta)
    }

    pub fn h_gradient(&self, j: usize) -> DVector<f64> {
        let mut g = DVector::zeros(NUM_VARS);
        g[j] = 1.0;
        g[3 + j] = 1.0;
        g[IDX_GAMMA] = -(self.dcm[j] - self.support[j]) * self.decay;
        g
    }

    pub fn c_gradient(&self, _j: usize) -> DVector<f64> {
        let mut g = DVector::zeros(NUM_VARS);
        g[IDX_GAMMA] = -self.decay;
        g
    }

    /// `H = (grad h_1, grad h_2)`, 5 x 2.
    pub fn h_jacobian(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&[self.h_gradient(0), self.h_gradient(1)])
    }

    /// `C = (grad c_1, grad c_2)`, 5 x 2.
    pub fn c_jacobian(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&[self.c_gradient(0), self.c_gradient(1)])
    }
}

/// Jacobians of the KKT map with respect to `(x, u, w)` and `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktJacobians {
    /// 13 x 13.
    pub state: DMatrix<f64>,
    /// 13 x 2.
    pub theta: DMatrix<f64>,
    pub condition_number: f64,
}

fn check_regularity(point: &KktPoint) -> Result<(), SensitivityError> {
    for i in 0..NUM_INEQ {
        let g = point.constraint_values[i];
        let u = point.u[i];
        if !(g > STRICT_COMPLEMENTARITY_TOL || u > STRICT_COMPLEMENTARITY_TOL) {
            return Err(SensitivityError::WeakActivity {
                index: i,
                value: g,
                multiplier: u,
            });
        }
    }

    // linear independence of active inequality and equality gradients
    let terms = perturbed_equality_terms(&point.params, &point.context);
    let grads = point.inequality_gradients();
    let mut cols: Vec<DVector<f64>> = point
        .active_set
        .iter()
        .map(|&i| grads.column(i).into_owned())
        .collect();
    cols.push(terms.h_gradient(0));
    cols.push(terms.h_gradient(1));
    let active = DMatrix::from_columns(&cols);
    if cols.len() > NUM_VARS || reciprocal_condition(&active) < INDEPENDENCE_RCOND {
        return Err(SensitivityError::SingularJacobian {
            reason: "active constraint gradients are linearly dependent".into(),
            condition_number: 1.0 / reciprocal_condition(&active),
        });
    }

    // second-order sufficiency: hessian positive definite on the tangent space
    // tangent basis: eigenvectors of the projector onto the complement of
    // the active gradients
    if cols.len() < NUM_VARS {
        let gram_inv = (active.transpose() * &active)
            .try_inverse()
            .ok_or_else(|| SensitivityError::SingularJacobian {
                reason: "active constraint gradients are linearly dependent".into(),
                condition_number: f64::INFINITY,
            })?;
        let projector =
            DMatrix::identity(NUM_VARS, NUM_VARS) - &active * gram_inv * active.transpose();
        let eig = projector.symmetric_eigen();
        let basis: Vec<DVector<f64>> = (0..NUM_VARS)
            .filter(|&k| eig.eigenvalues[k] > 0.5)
            .map(|k| eig.eigenvectors.column(k).into_owned())
            .collect();
        let null_space = DMatrix::from_columns(&basis);
        let reduced = null_space.transpose() * point.hessian() * &null_space;
        let min_eig = reduced.symmetric_eigenvalues().min();
        if !(min_eig > 0.0) {
            return Err(SensitivityError::SingularJacobian {
                reason: format!(
                    "reduced hessian not positive definite (min eigenvalue {min_eig:.3e})"
                ),
                condition_number: f64::INFINITY,
            });
        }
    }
    Ok(())
}

/// Assemble `J_state` and `J_theta` at a KKT point.
pub fn assemble_kkt_jacobians(point: &KktPoint) -> Result<KktJacobians, SensitivityError> {
    check_regularity(point)?;
    let terms = perturbed_equality_terms(&point.params, &point.context);
    let g = point.inequality_gradients();
    let h = terms.h_jacobian();
    let c = terms.c_jacobian();
    let (n, m, e) = (NUM_VARS, NUM_INEQ, NUM_EQ);

    let mut state = DMatrix::zeros(KKT_DIM, KKT_DIM);
    state.view_mut((0, 0), (n, n)).copy_from(&point.hessian());
    state.view_mut((0, n), (n, m)).copy_from(&(-&g));
    state.view_mut((0, n + m), (n, e)).copy_from(&h);
    let u_diag = DMatrix::from_diagonal(&point.u);
    state
        .view_mut((n, 0), (m, n))
        .copy_from(&(u_diag * g.transpose()));
    state
        .view_mut((n, n), (m, m))
        .copy_from(&DMatrix::from_diagonal(&point.constraint_values));
    state.view_mut((n + m, 0), (e, n)).copy_from(&h.transpose());

    let mut theta = DMatrix::zeros(KKT_DIM, e);
    theta
        .view_mut((0, 0), (n, e))
        .copy_from(&(c * DMatrix::from_diagonal(&point.w)));
    let c_values = terms.c(&point.x);
    for j in 0..e {
        theta[(n + m + j, j)] = c_values[j];
    }

    let rcond = reciprocal_condition(&state);
    if !(rcond > JACOBIAN_RCOND) {
        return Err(SensitivityError::SingularJacobian {
            reason: "KKT jacobian".into(),
            condition_number: 1.0 / rcond,
        });
    }
    Ok(KktJacobians {
        state,
        theta,
        condition_number: 1.0 / rcond,
    })
}

/// Derivatives of the optimal primal/dual point with respect to `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    /// `d(x, u, w)/d theta`, 13 x 2.
    pub d_full: DMatrix<f64>,
    /// Primal block `dx/d theta`, 5 x 2.
    pub d_primal: DMatrix<f64>,
    /// 2-norm condition number of `J_state`.
    pub kkt_condition_number: f64,
    pub point: KktPoint,
}

impl SensitivityResult {
    /// `d x_var / d theta_axis`.
    pub fn primal(&self, var: usize, axis: usize) -> f64 {
        self.d_primal[(var, axis)]
    }
}

/// Sensitivity of the footstep solution to DCM measurement perturbations.
///
/// Rows of inactive multipliers are decoupled in `J_state` (`g_i du_i = 0`
/// with `g_i > 0`), so they are fixed to zero and the remaining block is
/// solved directly.
pub fn dcm_sensitivity(
    params: &SequencerParams,
    ctx: &StanceContext,
) -> Result<SensitivityResult, SensitivityError> {
    let point = KktPoint::solve(params, ctx)?;
    sensitivity_at(point)
}

pub fn sensitivity_at(point: KktPoint) -> Result<SensitivityResult, SensitivityError> {
    let jac = assemble_kkt_jacobians(&point)?;
    let keep: Vec<usize> = (0..KKT_DIM)
        .filter(|&r| {
            !(NUM_VARS..NUM_VARS + NUM_INEQ).contains(&r)
                || point.active_set.contains(&(r - NUM_VARS))
        })
        .collect();
    let k = keep.len();
    let reduced = DMatrix::from_fn(k, k, |i, j| jac.state[(keep[i], keep[j])]);
    let rhs = DMatrix::from_fn(k, NUM_EQ, |i, j| -jac.theta[(keep[i], j)]);
    let lu = reduced.clone().lu();
    let mut sol = lu
        .solve(&rhs)
        .ok_or_else(|| SensitivityError::SingularJacobian {
            reason: "reduced KKT jacobian".into(),
            condition_number: jac.condition_number,
        })?;
    let residual = &rhs - &reduced * &sol;
    if let Some(correction) = lu.solve(&residual) {
        sol += correction;
    }

    let mut d_full = DMatrix::zeros(KKT_DIM, NUM_EQ);
    for (i, &r) in keep.iter().enumerate() {
        d_full.row_mut(r).copy_from(&sol.row(i));
    }
    let d_primal = d_full.rows(0, NUM_VARS).into_owned();
    Ok(SensitivityResult {
        d_full,
        d_primal,
        kkt_condition_number: jac.condition_number,
        point,
    })
}

fn shifted(ctx: &StanceContext, theta: Vector2<f64>) -> StanceContext {
    let mut c = *ctx;
    c.dcm += theta;
    c
}

/// Central finite differences of re-solved QPs, `dx/d theta` (5 x 2).
///
/// Fails with [`SensitivityError::ActiveSetChange`] when the perturbed
/// solves do not share the active set of the nominal one.
pub fn finite_difference_primal(
    params: &SequencerParams,
    ctx: &StanceContext,
    step: f64,
) -> Result<DMatrix<f64>, SensitivityError> {
    let base = sequencer::solve_qp(params, ctx)?;
    let mut d = DMatrix::zeros(NUM_VARS, NUM_EQ);
    for axis in 0..NUM_EQ {
        let mut e = Vector2::zeros();
        e[axis] = step;
        let plus = sequencer::solve_qp(params, &shifted(ctx, e))?;
        let minus = sequencer::solve_qp(params, &shifted(ctx, -e))?;
        if plus.active_set != base.active_set || minus.active_set != base.active_set {
            return Err(SensitivityError::ActiveSetChange { axis });
        }
        d.set_column(axis, &((plus.x - minus.x) / (2.0 * step)));
    }
    Ok(d)
}

/// Largest entrywise deviation between two derivative matrices, relative
/// to `max(|reference|, floor / rel_tol)`.
///
/// The result is below `rel_tol` exactly when every entry agrees within
/// `rel_tol` relative or `floor` absolute.
pub fn max_relative_deviation(
    analytic: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    rel_tol: f64,
    floor: f64,
) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, r)| (a - r).abs() / r.abs().max(floor / rel_tol))
        .fold(0.0, f64::max)
}

/// Draw `n` perturbations with independent `N(0, sigma)` components.
pub fn sample_thetas(n: usize, sigma: f64, seed: u64) -> Vec<Vector2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and nonnegative");
    (0..n)
        .map(|_| Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect()
}

/// One perturbed re-solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceRow {
    pub theta: Vector2<f64>,
    /// Optimal `x(theta)`, absent when the perturbed problem failed.
    pub solution: Option<DVector<f64>>,
    pub active_set: Vec<usize>,
    /// Active set differs from the `theta = 0` one.
    pub active_set_changed: bool,
    pub error: Option<String>,
}

/// Solve the footstep QP at every perturbation. Rows keep sample order.
pub fn solution_surface(
    params: &SequencerParams,
    ctx: &StanceContext,
    thetas: &[Vector2<f64>],
) -> Result<Vec<SurfaceRow>, SensitivityError> {
    let nominal = sequencer::solve_qp(params, ctx)?;
    Ok(thetas
        .par_iter()
        .map(
            |&theta| match sequencer::solve_qp(params, &shifted(ctx, theta)) {
                Ok(sol) => SurfaceRow {
                    theta,
                    active_set_changed: sol.active_set != nominal.active_set,
                    active_set: sol.active_set,
                    solution: Some(sol.x),
                    error: None,
                },
                Err(e) => SurfaceRow {
                    theta,
                    solution: None,
                    active_set: Vec::new(),
                    active_set_changed: true,
                    error: Some(e.to_string()),
                },
            },
        )
        .collect())
}

/// Least-squares plane `value = intercept + slope . theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub intercept: f64,
    pub slope: Vector2<f64>,
}

/// Fit a plane through the solved rows for one decision variable.
pub fn fit_plane(rows: &[SurfaceRow], var: usize) -> Option<PlaneFit> {
    let pts: Vec<(Vector2<f64>, f64)> = rows
        .iter()
        .filter_map(|r| r.solution.as_ref().map(|x| (r.theta, x[var])))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let a = DMatrix::from_fn(pts.len(), 3, |i, j| match j {
        0 => 1.0,
        _ => pts[i].0[j - 1],
    });
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    let coef = a.svd(true, true).solve(&b, 1e-15).ok()?;
    Some(PlaneFit {
        intercept: coef[0],
        slope: Vector2::new(coef[1], coef[2]),
    })
}
