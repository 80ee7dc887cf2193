#![allow(dead_code)]

use dcm_stepper::qp::QpProblem;
use dcm_stepper::sequencer::{
    nominal_dcm_offset, LateralDirection, SequencerParams, StanceContext,
};
use dcm_stepper::simulator::LipmState;
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Brute-force optimum: minimize over all working sets of the inequalities,
/// keeping only equality-constrained minimizers that are feasible.
pub fn enumeration_oracle(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = p.dim();
    let m = p.num_inequalities();
    let e = p.num_equalities();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = e + set.len();
        if k > n {
            continue;
        }
        let mut a = DMatrix::zeros(k, n);
        let mut b = DVector::zeros(k);
        for r in 0..e {
            a.set_row(r, &p.eq_matrix.row(r));
            b[r] = p.eq_rhs[r];
        }
        for (j, &i) in set.iter().enumerate() {
            a.set_row(e + j, &p.ineq_matrix.row(i));
            b[e + j] = p.ineq_rhs[i];
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        kkt.view_mut((0, n), (n, k)).copy_from(&a.transpose());
        kkt.view_mut((n, 0), (k, n)).copy_from(&a);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.linear));
        rhs.rows_mut(n, k).copy_from(&b);
        let sv = kkt.clone().singular_values();
        if sv.min() < 1e-12 * sv.max() {
            continue;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        if p.ineq_values(&x).iter().any(|&g| g < -1e-9) {
            continue;
        }
        let f = p.objective(&x);
        if best.as_ref().is_none_or(|(_, fb)| f < *fb) {
            best = Some((x, f));
        }
    }
    best
}

/// Smallest reciprocal condition number over every stack of the equality
/// rows with a subset of the inequality rows that fits in `n` dimensions.
pub fn worst_working_set_rcond(p: &QpProblem) -> f64 {
    let (n, m, e) = (p.dim(), p.num_inequalities(), p.num_equalities());
    let mut worst: f64 = 1.0;
    for mask in 1u32..(1 << m) {
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if e + set.len() > n {
            continue;
        }
        let mut a = DMatrix::zeros(e + set.len(), n);
        for r in 0..e {
            a.set_row(r, &p.eq_matrix.row(r));
        }
        for (j, &i) in set.iter().enumerate() {
            a.set_row(e + j, &p.ineq_matrix.row(i));
        }
        let sv = a.singular_values();
        worst = worst.min(sv.min() / sv.max());
    }
    worst
}

/// Random strictly convex QP with a known feasible point; about a third of
/// the inequalities pass through that point. Instances with a nearly
/// dependent working set are redrawn: there the feasibility tolerance alone
/// moves the optimum by more than the objective tolerance.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize, e: usize) -> QpProblem {
    loop {
        let p = draw_qp(rng, n, m, e);
        if worst_working_set_rcond(&p) >= 1e-3 {
            return p;
        }
    }
}

fn draw_qp(rng: &mut ChaCha8Rng, n: usize, m: usize, e: usize) -> QpProblem {
    let mut u = || rng.random_range(-1.0..1.0);
    let l = DMatrix::from_fn(n, n, |_, _| u());
    let hessian = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let linear = DVector::from_fn(n, |_, _| 3.0 * u());
    let x0 = DVector::from_fn(n, |_, _| u());
    let a_in = DMatrix::from_fn(m, n, |_, _| u());
    let a_eq = DMatrix::from_fn(e, n, |_, _| u());
    let slack = DVector::from_fn(m, |_, _| {
        let s = rng.random_range(-0.5..1.0_f64);
        s.max(0.0)
    });
    let b_in = &a_in * &x0 - slack;
    let b_eq = &a_eq * &x0;
    QpProblem::new(hessian, linear)
        .with_inequalities(a_in, b_in)
        .with_equalities(a_eq, b_eq)
}

/// Context drawn around the nominal gait, with the DCM scattered about its
/// nominal offset.
pub fn random_context(rng: &mut ChaCha8Rng, params: &SequencerParams) -> StanceContext {
    let direction = if rng.random_bool(0.5) {
        LateralDirection::Negative
    } else {
        LateralDirection::Positive
    };
    let support = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
    let elapsed = rng.random_range(0.0..0.25);
    let offset = nominal_dcm_offset(params, direction.flip());
    let nominal_dcm = support + offset * (params.omega0() * elapsed).exp();
    let dcm =
        nominal_dcm + Vector2::new(rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12));
    StanceContext::new(support, elapsed, dcm, direction)
}

/// Classic RK4 on the pendulum ODE with fixed support.
pub fn rk4(state: &LipmState, duration: f64, h: f64) -> (Vector2<f64>, Vector2<f64>) {
    let w = state.omega0;
    let p = state.support;
    let f = |c: Vector2<f64>, z: Vector2<f64>| ((z - c) * w, (z - p) * w);
    let (mut c, mut z) = (state.com, state.dcm);
    let steps = (duration / h).round() as usize;
    for _ in 0..steps {
        let (k1c, k1z) = f(c, z);
        let (k2c, k2z) = f(c + k1c * (h / 2.0), z + k1z * (h / 2.0));
        let (k3c, k3z) = f(c + k2c * (h / 2.0), z + k2z * (h / 2.0));
        let (k4c, k4z) = f(c + k3c * h, z + k3z * h);
        c += (k1c + k2c * 2.0 + k3c * 2.0 + k4c) * (h / 6.0);
        z += (k1z + k2z * 2.0 + k3z * 2.0 + k4z) * (h / 6.0);
    }
    (c, z)
}

pub fn random_lipm_state(rng: &mut ChaCha8Rng) -> LipmState {
    let mut u = || rng.random_range(-0.1..0.1);
    let support = Vector2::new(u(), u());
    LipmState::new(
        support + Vector2::new(u(), u()),
        support + Vector2::new(u(), u()),
        support,
        LateralDirection::Positive,
        (9.81_f64 / 0.31).sqrt(),
    )
}
