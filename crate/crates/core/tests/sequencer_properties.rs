mod common;

use dcm_stepper::horizon::generate_sequence;
use dcm_stepper::sensitivity::{
    self, dcm_sensitivity, finite_difference_primal, max_relative_deviation, SensitivityError,
    FD_STEP,
};
use dcm_stepper::sequencer::{
    self, dynamics_residual, solve_qp, solve_step, LateralDirection, SequencerParams,
    StanceContext, IDX_BY, IDX_PY,
};
use nalgebra::Vector2;
use proptest::prelude::*;

fn assert_step_feasible(params: &SequencerParams, ctx: &StanceContext, step: &sequencer::Step) {
    let w = params.width(ctx.next_direction);
    let d = step.position - ctx.support;
    let tol = 1e-9;
    assert!(
        d.x >= params.length.min - tol && d.x <= params.length.max + tol,
        "{d}"
    );
    assert!(d.y >= w.min - tol && d.y <= w.max + tol, "{d}");
    assert!(step.duration >= params.duration.min.max(ctx.elapsed) - 1e-9);
    assert!(step.duration <= params.duration.max + 1e-9);
    assert!(dynamics_residual(params, ctx, step).amax() <= 1e-9);
}

#[test]
fn analytic_sensitivity_matches_finite_differences_on_random_contexts() {
    let params = SequencerParams::default();
    let mut rng = common::rng(2024);
    let mut accepted = 0;
    let mut drawn = 0;
    let mut worst: f64 = 0.0;
    while accepted < 150 {
        drawn += 1;
        assert!(drawn < 2000, "too few strictly complementary contexts");
        let ctx = common::random_context(&mut rng, &params);
        let analytic = match dcm_sensitivity(&params, &ctx) {
            Ok(r) => r,
            Err(SensitivityError::WeakActivity { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        let fd = match finite_difference_primal(&params, &ctx, FD_STEP) {
            Ok(d) => d,
            Err(SensitivityError::ActiveSetChange { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        let dev = max_relative_deviation(&analytic.d_primal, &fd, 1e-4, 1e-7);
        assert!(dev < 1e-4, "context {ctx:?}: deviation {dev:e}");
        worst = worst.max(dev);
        accepted += 1;
    }
    assert!(worst < 1e-4);
}

#[test]
fn random_contexts_cover_active_bounds() {
    // the randomized set must exercise both inactive and active inequalities
    let params = SequencerParams::default();
    let mut rng = common::rng(2024);
    let mut with_active = 0;
    let mut without = 0;
    for _ in 0..300 {
        let ctx = common::random_context(&mut rng, &params);
        let sol = solve_qp(&params, &ctx).unwrap();
        if sol.active_set.is_empty() {
            without += 1;
        } else {
            with_active += 1;
        }
    }
    assert!(with_active > 10 && without > 10, "{with_active} {without}");
}

#[test]
fn multiplier_ratio_holds_off_the_bounds() {
    let params = SequencerParams::default();
    let mut rng = common::rng(7);
    let mut checked = 0;
    for _ in 0..200 {
        let ctx = common::random_context(&mut rng, &params);
        let Ok(r) = dcm_sensitivity(&params, &ctx) else {
            continue;
        };
        if r.point.active_set.contains(&2) || r.point.active_set.contains(&3) {
            continue;
        }
        for axis in 0..2 {
            let dp = r.primal(IDX_PY, axis);
            let db = r.primal(IDX_BY, axis);
            let ratio = params.alpha3 / params.alpha1;
            assert!(
                (dp - ratio * db).abs() <= 1e-10 * dp.abs().max(1e-12),
                "{dp} {db}"
            );
        }
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn surface_rows_keep_sample_order() {
    let params = SequencerParams::default();
    let ctx = StanceContext::reference();
    let thetas = sensitivity::sample_thetas(64, 0.005, 5);
    let rows = sensitivity::solution_surface(&params, &ctx, &thetas).unwrap();
    for (row, theta) in rows.iter().zip(&thetas) {
        assert_eq!(row.theta, *theta);
        let mut shifted = ctx;
        shifted.dcm += theta;
        assert_eq!(
            row.solution.as_ref().unwrap(),
            &solve_qp(&params, &shifted).unwrap().x
        );
    }
}

fn context_strategy() -> impl Strategy<Value = StanceContext> {
    (any::<u64>()).prop_map(|seed| {
        let mut rng = common::rng(seed);
        common::random_context(&mut rng, &SequencerParams::default())
    })
}

proptest! {
    #[test]
    fn steps_satisfy_bounds_and_dynamics(ctx in context_strategy()) {
        let params = SequencerParams::default();
        let step = solve_step(&params, &ctx).unwrap();
        assert_step_feasible(&params, &ctx, &step);
    }

    #[test]
    fn weight_scaling_leaves_step_unchanged(
        ctx in context_strategy(),
        k in prop::sample::select(vec![0.5, 2.0, 1000.0]),
    ) {
        let params = SequencerParams::default();
        let scaled = SequencerParams {
            alpha1: params.alpha1 * k,
            alpha2: params.alpha2 * k,
            alpha3: params.alpha3 * k,
            ..params
        };
        let a = solve_qp(&params, &ctx).unwrap();
        let b = solve_qp(&scaled, &ctx).unwrap();
        prop_assert_eq!(&a.active_set, &b.active_set);
        for i in 0..5 {
            prop_assert!((a.x[i] - b.x[i]).abs() <= 1e-9 * a.x[i].abs().max(1.0), "{} {}", a.x, b.x);
        }
    }

    #[test]
    fn mirrored_context_mirrors_step(ctx in context_strategy()) {
        let params = SequencerParams::default();
        let mirror = |v: Vector2<f64>| Vector2::new(v.x, -v.y);
        let flipped = StanceContext {
            support: mirror(ctx.support),
            dcm: mirror(ctx.dcm),
            next_direction: ctx.next_direction.flip(),
            ..ctx
        };
        let a = solve_step(&params, &ctx).unwrap();
        let b = solve_step(&params, &flipped).unwrap();
        prop_assert!((mirror(a.position) - b.position).amax() < 1e-9);
        prop_assert!((mirror(a.dcm_offset) - b.dcm_offset).amax() < 1e-9);
        prop_assert!((a.gamma - b.gamma).abs() < 1e-9 * a.gamma);
    }

    #[test]
    fn translation_moves_step_rigidly(ctx in context_strategy(), dx in -2.0..2.0f64, dy in -2.0..2.0f64) {
        let params = SequencerParams::default();
        let shift = Vector2::new(dx, dy);
        let moved = StanceContext { support: ctx.support + shift, dcm: ctx.dcm + shift, ..ctx };
        let a = solve_step(&params, &ctx).unwrap();
        let b = solve_step(&params, &moved).unwrap();
        prop_assert!((a.position + shift - b.position).amax() < 1e-9);
        prop_assert!((a.dcm_offset - b.dcm_offset).amax() < 1e-9);
    }

    #[test]
    fn sequences_alternate_and_advance(ctx in context_strategy(), horizon in 0.0..2.0f64) {
        let params = SequencerParams::default();
        let seq = generate_sequence(&params, &ctx, horizon).unwrap();
        prop_assert!(seq.steps.last().unwrap().contact_time >= seq.t0 + horizon);
        let mut side = ctx.next_direction;
        let mut c = ctx;
        for step in &seq.steps {
            prop_assert_eq!(step.side, side);
            assert_step_feasible(&params, &c, step);
            c = StanceContext {
                support: step.position,
                elapsed: 0.0,
                dcm: step.dcm_at_contact(),
                next_direction: side.flip(),
                anchor: c.anchor,
                touchdown_time: step.contact_time,
            };
            side = side.flip();
        }
        for pair in seq.steps.windows(2) {
            prop_assert!(pair[1].contact_time > pair[0].contact_time);
        }
    }
}

#[test]
fn direction_labels() {
    assert_eq!(
        LateralDirection::Negative.flip(),
        LateralDirection::Positive
    );
    assert_eq!(LateralDirection::Positive.label(), "+y");
}
