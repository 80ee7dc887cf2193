//! Dense convex quadratic programming with a primal active-set method.
//!
//! Problems are stated as
//!
//! ```text
//!     minimize    1/2 x' H x + g' x + constant
//!     subject to  A_in x - b_in >= 0
//!                 A_eq x - b_eq  = 0
//! ```
//!
//! and the returned multipliers satisfy the stationarity convention
//! `H x + g - A_in' u + A_eq' w = 0` with `u >= 0`.
//!
//! The solver targets tiny problems (a handful of variables). Problems are
//! solved cold on every call.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Maximum constraint violation accepted at a returned solution.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Bound on `|u_i * g_i(x)|` at a returned solution.
pub const COMPLEMENTARITY_TOL: f64 = 1e-8;
/// Threshold separating "strictly active" from "weakly active" constraints.
pub const STRICT_COMPLEMENTARITY_TOL: f64 = 1e-8;

const SINGULAR_RCOND: f64 = 1e-14;
const SYMMETRY_TOL: f64 = 1e-12;
const PHASE_ONE_PROXIMITY: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric (max asymmetry {0:.3e})")]
    Asymmetric(f64),
    #[error("no point satisfies the constraints (residual infeasibility {violation:.3e})")]
    Infeasible { violation: f64 },
    #[error("active-set method failed: {reason}")]
    Degenerate { reason: String },
    #[error("KKT system is singular (reciprocal condition number {rcond:.3e})")]
    SingularKkt { rcond: f64 },
}

/// A dense QP in standard form.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    /// Constant added to the reported objective; does not affect the minimizer.
    pub constant: f64,
}

impl QpProblem {
    /// Unconstrained problem `1/2 x' H x + g' x`.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            constant: 0.0,
        }
    }

    pub fn with_inequalities(mut self, matrix: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.ineq_matrix = matrix;
        self.ineq_rhs = rhs;
        self
    }

    pub fn with_equalities(mut self, matrix: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq_matrix = matrix;
        self.eq_rhs = rhs;
        self
    }

    pub fn with_constant(mut self, constant: f64) -> Self {
        self.constant = constant;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn num_equalities(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let dim_err = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return dim_err("hessian must be n x n");
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_rhs.len() {
            return dim_err("inequality matrix must be m_in x n");
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return dim_err("equality matrix must be m_eq x n");
        }
        if self.num_equalities() > n {
            return dim_err("more equalities than variables");
        }
        let scale = self.hessian.amax().max(1.0);
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(QpError::Asymmetric(asym));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }

    /// `A_in x - b_in`; nonnegative entries are satisfied constraints.
    pub fn ineq_values(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.ineq_matrix * x - &self.ineq_rhs
    }

    pub fn eq_values(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.eq_matrix * x - &self.eq_rhs
    }

    fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ineq = self
            .ineq_values(x)
            .iter()
            .fold(0.0_f64, |acc, &v| acc.max(-v));
        let eq = self.eq_values(x).amax();
        ineq.max(eq)
    }

    /// KKT residuals of a candidate solution.
    pub fn kkt_residuals(&self, sol: &QpSolution) -> KktResiduals {
        let ineq = self.ineq_values(&sol.x);
        let stationarity = &self.hessian * &sol.x + &self.linear
            - self.ineq_matrix.transpose() * &sol.u
            + self.eq_matrix.transpose() * &sol.w;
        KktResiduals {
            primal_inequality: ineq.iter().fold(0.0_f64, |acc, &v| acc.max(-v)),
            primal_equality: self.eq_values(&sol.x).amax(),
            dual: sol.u.iter().fold(0.0_f64, |acc, &v| acc.max(-v)),
            complementarity: ineq
                .iter()
                .zip(sol.u.iter())
                .fold(0.0_f64, |acc, (g, u)| acc.max((g * u).abs())),
            stationarity: stationarity.amax(),
        }
    }
}

/// Primal point, multipliers and active set of a solved QP.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Inequality multipliers, `u >= 0`.
    pub u: DVector<f64>,
    /// Equality multipliers.
    pub w: DVector<f64>,
    /// Inequalities held with equality at the solution, ascending.
    pub active_set: Vec<usize>,
    pub objective: f64,
}

/// Infinity-norm KKT residuals. All entries are nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub primal_inequality: f64,
    pub primal_equality: f64,
    pub dual: f64,
    pub complementarity: f64,
    pub stationarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal_inequality
            .max(self.primal_equality)
            .max(self.dual)
            .max(self.complementarity)
            .max(self.stationarity)
    }
}

/// Reciprocal 2-norm condition number, `sigma_min / sigma_max`.
pub(crate) fn reciprocal_condition(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0.0;
    }
    sv.min() / max
}

/// Solve `min 1/2 x'Hx + g'x  s.t.  A x = b` through its KKT system.
///
/// Returns `(x, w)` with `H x + g + A' w = 0`.
pub fn solve_equality_kkt(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let n = h.nrows();
    let m = a.nrows();
    if h.ncols() != n || g.len() != n || a.ncols() != n || b.len() != m {
        return Err(QpError::Dimension("equality KKT blocks".into()));
    }
    // Normalize the hessian block so the conditioning test does not depend
    // on the objective scale; multipliers are rescaled on the way out.
    let scale = match h.amax() {
        s if s > 0.0 && s.is_finite() => s,
        _ => 1.0,
    };
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(h / scale));
    if m > 0 {
        kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(a);
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g / scale));
    rhs.rows_mut(n, m).copy_from(b);

    let rcond = reciprocal_condition(&kkt);
    if !(rcond >= SINGULAR_RCOND) {
        return Err(QpError::SingularKkt { rcond });
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs).ok_or(QpError::SingularKkt { rcond: 0.0 })?;
    // one step of iterative refinement
    let residual = &rhs - &kkt * &sol;
    if let Some(correction) = lu.solve(&residual) {
        sol += correction;
    }
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, m) * scale))
}

/// Solve a convex QP with the primal active-set method.
///
/// The start point is the equality-constrained minimizer; when it violates
/// an inequality, a slack phase-one problem restores feasibility first.
pub fn solve(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let (x0, _) = solve_equality_kkt(
        &problem.hessian,
        &problem.linear,
        &problem.eq_matrix,
        &problem.eq_rhs,
    )
    .map_err(|e| QpError::Degenerate {
        reason: format!("equality-constrained start: {e}"),
    })?;

    let start = if problem.max_violation(&x0) <= FEASIBILITY_TOL {
        x0
    } else {
        phase_one(problem, &x0)?
    };
    let mut sol = active_set_loop(problem, start)?;
    sol.objective = problem.objective(&sol.x);
    Ok(sol)
}

/// Find a feasible point near `x0` by minimizing a slack `s` that relaxes
/// every inequality, with a small proximity term keeping the problem
/// strictly convex.
fn phase_one(problem: &QpProblem, x0: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    let n = problem.dim();
    let m_in = problem.num_inequalities();
    let m_eq = problem.num_equalities();

    let mut hessian = DMatrix::identity(n + 1, n + 1) * PHASE_ONE_PROXIMITY;
    hessian[(n, n)] = 1.0;
    let mut linear = DVector::zeros(n + 1);
    linear
        .rows_mut(0, n)
        .copy_from(&(-x0 * PHASE_ONE_PROXIMITY));
    linear[n] = 1.0;

    let mut ineq = DMatrix::zeros(m_in + 1, n + 1);
    ineq.view_mut((0, 0), (m_in, n))
        .copy_from(&problem.ineq_matrix);
    for i in 0..m_in {
        ineq[(i, n)] = 1.0;
    }
    ineq[(m_in, n)] = 1.0;
    let mut ineq_rhs = DVector::zeros(m_in + 1);
    ineq_rhs.rows_mut(0, m_in).copy_from(&problem.ineq_rhs);

    let mut eq = DMatrix::zeros(m_eq, n + 1);
    eq.view_mut((0, 0), (m_eq, n)).copy_from(&problem.eq_matrix);

    let relaxed = QpProblem::new(hessian, linear)
        .with_inequalities(ineq, ineq_rhs)
        .with_equalities(eq, problem.eq_rhs.clone());

    let slack0 = problem
        .ineq_values(x0)
        .iter()
        .fold(0.0_f64, |acc, &v| acc.max(-v));
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(x0);
    start[n] = slack0;

    let sol = active_set_loop(&relaxed, start)?;
    let x = sol.x.rows(0, n).into_owned();
    let violation = problem.max_violation(&x);
    if violation > FEASIBILITY_TOL {
        return Err(QpError::Infeasible { violation });
    }
    Ok(x)
}

fn active_set_loop(problem: &QpProblem, mut x: DVector<f64>) -> Result<QpSolution, QpError> {
    let n = problem.dim();
    let m_in = problem.num_inequalities();
    let m_eq = problem.num_equalities();
    let max_iterations = 50 * (n + m_in + 1);

    // working set, kept sorted ascending
    let mut working: Vec<usize> = Vec::new();

    for _ in 0..max_iterations {
        let rows = m_eq + working.len();
        let mut a = DMatrix::zeros(rows, n);
        let mut b = DVector::zeros(rows);
        a.view_mut((0, 0), (m_eq, n)).copy_from(&problem.eq_matrix);
        b.rows_mut(0, m_eq).copy_from(&problem.eq_rhs);
        for (k, &i) in working.iter().enumerate() {
            a.row_mut(m_eq + k).copy_from(&problem.ineq_matrix.row(i));
            b[m_eq + k] = problem.ineq_rhs[i];
        }
        let (target, lambda) = solve_equality_kkt(&problem.hessian, &problem.linear, &a, &b)
            .map_err(|e| QpError::Degenerate {
                reason: format!("working-set subproblem: {e}"),
            })?;

        let step = &target - &x;
        let step_norm = step.amax();
        let mut alpha = 1.0;
        let mut blocking = None;
        // at a vertex (working rows span the space) the step is rounding
        // noise and no further constraint can be independent
        if rows < n && step_norm > 1e-14 * (1.0 + x.amax()) {
            for i in 0..m_in {
                if working.binary_search(&i).is_ok() {
                    continue;
                }
                let row = problem.ineq_matrix.row(i);
                let slope = row.dot(&step.transpose());
                let tiny = 1e-13 * row.amax() * step_norm;
                if slope < -tiny {
                    let value = (row.dot(&x.transpose()) - problem.ineq_rhs[i]).max(0.0);
                    let ratio = value / -slope;
                    // strict comparison keeps the lowest index on ties
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(i);
                    }
                }
            }
        }

        match blocking {
            Some(i) => {
                x += step * alpha;
                let pos = working.binary_search(&i).unwrap_err();
                working.insert(pos, i);
            }
            None => {
                x = target;
                let u_working: Vec<f64> = (0..working.len()).map(|k| -lambda[m_eq + k]).collect();
                let scale = lambda.amax().max(1.0);
                // Bland: release the lowest-index constraint with a negative multiplier
                match u_working.iter().position(|&u| u < -1e-10 * scale) {
                    Some(k) => {
                        working.remove(k);
                    }
                    None => {
                        let mut u = DVector::zeros(m_in);
                        for (k, &i) in working.iter().enumerate() {
                            u[i] = u_working[k].max(0.0);
                        }
                        let w = lambda.rows(0, m_eq).into_owned();
                        let objective = problem.objective(&x);
                        return Ok(QpSolution {
                            x,
                            u,
                            w,
                            active_set: working,
                            objective,
                        });
                    }
                }
            }
        }
    }
    Err(QpError::Degenerate {
        reason: format!("no convergence after {max_iterations} iterations"),
    })
}
