mod common;

use foresight_core::game::*;
use foresight_core::micp::ExplicitMicp;
use foresight_core::observation::{
    observe, ObjectiveWeighting, ObservationModel, ObservationSequence,
};
use foresight_core::scenarios::{build_crosswalk, CollisionForm, CrosswalkConfig};
use foresight_core::sensitivity::*;
use foresight_core::solver::{solve_micp, warm_start, MicpSolution, SolverConfig};
use foresight_core::transcription::{transcribe, MicpProblem};
use nalgebra::DMatrix;
use rand::Rng;

fn tight() -> SolverConfig {
    SolverConfig {
        residual_tolerance: 1e-10,
        ..Default::default()
    }
}

/// `z ⊥ z + sign·θ`.
fn lcp(sign: f64) -> ExplicitMicp {
    ExplicitMicp::new(
        0,
        1,
        1,
        Box::new(move |v, p| {
            (
                vec![v[0] + sign * p.theta[0]],
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, sign),
            )
        }),
    )
}

#[test]
fn scalar_lcp_branches() {
    let one = Params::new(vec![1.0], vec![]);
    for (sign, expected_z, expected_dz) in [(-1.0, 1.0, 1.0), (1.0, 0.0, 0.0)] {
        let p = lcp(sign);
        let s = solve_micp(&p, &one, &[0.5], &tight()).unwrap();
        assert!((s.v[0] - expected_z).abs() < 1e-10);
        let part = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
        let r = solution_sensitivity(&p, &s, &part, &one).unwrap();
        assert_eq!(r.dv_dparams[(0, 0)], expected_dz);
        assert!(r.strict_complementarity);
    }
}

#[test]
fn degenerate_lcp_is_flagged_weak() {
    let p = lcp(-1.0);
    let zero = Params::new(vec![0.0], vec![]);
    let s = solve_micp(&p, &zero, &[0.5], &SolverConfig::default()).unwrap();
    let part = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
    assert!(!part.strict);
    assert_eq!(part.weakly_active, 1);
    let r = solution_sensitivity(&p, &s, &part, &zero).unwrap();
    assert!(!r.strict_complementarity);
    // the weak row is treated as active: z follows θ
    assert_eq!(r.dv_dparams[(0, 0)], 1.0);
}

#[test]
fn singular_reduced_system_falls_back() {
    // c(r, z) = 0·r - θ has a singular Jacobian.
    let p = ExplicitMicp::new(
        1,
        0,
        1,
        Box::new(|_, p| {
            (
                vec![-p.theta[0]],
                DMatrix::zeros(1, 1),
                DMatrix::from_element(1, 1, -1.0),
            )
        }),
    );
    let params = Params::new(vec![0.0], vec![]);
    let sol = MicpSolution {
        v: vec![0.0],
        converged: true,
        residual: 0.0,
        iterations: 0,
        active_set: vec![],
        h: vec![],
        layout: foresight_core::micp::MicpSystem::layout(&p).clone(),
        trace: vec![],
    };
    let part = partition_active(&sol, DEFAULT_ACTIVATION_TOLERANCE);
    assert!(matches!(
        solution_sensitivity(&p, &sol, &part, &params),
        Err(foresight_core::Error::SensitivityFailure(_))
    ));
    let r = solution_sensitivity_robust(&p, &sol, &part, &params).unwrap();
    assert!(r.used_pseudoinverse);
    assert!(r.dv_dparams.iter().all(|x| x.is_finite()));
}

fn solve(p: &MicpProblem, params: &Params, from: Option<&MicpSolution>) -> MicpSolution {
    let init = from
        .map(|s| warm_start(s, p).unwrap())
        .unwrap_or_else(|| p.initial_point());
    solve_micp(p, params, &init, &tight()).unwrap()
}

/// Central differences of the solve map for every parameter, compared entrywise relative to the column scale.
fn check_against_resolve(p: &MicpProblem, params: &Params) {
    let s = solve(p, params, None);
    let part = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
    assert!(part.strict);
    let r = solution_sensitivity(p, &s, &part, params).unwrap();
    let h = 1e-5;
    for k in 0..params.dim() {
        let mut plus = params.stacked();
        let mut minus = params.stacked();
        plus[k] += h;
        minus[k] -= h;
        let theta_dim = params.theta.len();
        let sp = solve(p, &Params::from_stacked(&plus, theta_dim), Some(&s));
        let sm = solve(p, &Params::from_stacked(&minus, theta_dim), Some(&s));
        let fd: Vec<f64> =
            sp.v.iter()
                .zip(&sm.v)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = (0..fd.len()).fold(0.0f64, |m, i| m.max((fd[i] - r.dv_dparams[(i, k)]).abs()));
        assert!(
            err / (1.0 + scale) <= 1e-3,
            "parameter {k}: {err:e} vs scale {scale:e}"
        );
    }
}

#[test]
fn crosswalk_sensitivity_matches_resolve() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
    let p = transcribe(&game, &Default::default()).unwrap();
    check_against_resolve(&p, &truth);
}

#[test]
fn boxed_crosswalk_sensitivity_matches_resolve() {
    let cfg = CrosswalkConfig {
        control_limit: 5.0,
        velocity_limit: 6.0,
        ..Default::default()
    };
    let (game, truth) = build_crosswalk(&cfg);
    let p = transcribe(&game, &Default::default()).unwrap();
    let s = solve(&p, &truth, None);
    assert!(
        !s.active_set.is_empty(),
        "fixture should have binding constraints"
    );
    check_against_resolve(&p, &truth);
}

#[test]
fn duplicated_active_separation_needs_fallback() {
    // Both agents own a copy of the same separation row; when it binds, the multiplier split
    // (and with it the generalized equilibrium) is not unique.
    let cfg = CrosswalkConfig {
        collision: CollisionForm::Constraint,
        control_limit: 5.0,
        velocity_limit: 6.0,
        ..Default::default()
    };
    let (game, truth) = build_crosswalk(&cfg);
    let p = transcribe(&game, &Default::default()).unwrap();
    let s = solve(&p, &truth, None);
    let part = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
    assert!(matches!(
        solution_sensitivity(&p, &s, &part, &truth),
        Err(foresight_core::Error::SensitivityFailure(_))
    ));
    let r = solution_sensitivity_robust(&p, &s, &part, &truth).unwrap();
    assert!(r.used_pseudoinverse);
    assert!(r.dv_dparams.iter().all(|x| x.is_finite()));
}

#[test]
fn mixed_game_sensitivity_matches_resolve() {
    let game = common::mixed_game();
    let p = transcribe(&game, &Default::default()).unwrap();
    check_against_resolve(&p, &game.nominal_params());
}

#[test]
fn inactive_multiplier_rows_are_zero() {
    let cfg = CrosswalkConfig {
        collision: CollisionForm::Constraint,
        ..Default::default()
    };
    let (game, truth) = build_crosswalk(&cfg);
    let p = transcribe(&game, &Default::default()).unwrap();
    let s = solve(&p, &truth, None);
    let part = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
    let collision_rows: Vec<usize> = p
        .inequality_rows()
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            matches!(
                game.constraints[r.block].kind,
                ConstraintKind::CollisionSeparation { .. }
            )
        })
        .map(|(j, _)| p.eta_r() + j)
        .collect();
    assert!(collision_rows.iter().any(|j| part.inactive.contains(j)));
    let r = solution_sensitivity(&p, &s, &part, &truth).unwrap();
    for &j in &part.inactive {
        assert!(r.dv_dparams.row(j).iter().all(|x| *x == 0.0), "row {j}");
    }
}

#[test]
fn active_set_is_stable_under_tiny_perturbations() {
    let cfg = CrosswalkConfig {
        control_limit: 5.0,
        velocity_limit: 6.0,
        ..Default::default()
    };
    let (game, truth) = build_crosswalk(&cfg);
    let p = transcribe(&game, &Default::default()).unwrap();
    let s = solve(&p, &truth, None);
    let base = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
    let mut rng = common::rng(3);
    for _ in 0..5 {
        let moved: Vec<f64> = truth
            .stacked()
            .iter()
            .map(|x| x + rng.gen_range(-1e-9..1e-9))
            .collect();
        let params = Params::from_stacked(&moved, truth.theta.len());
        let q = partition_active(&solve(&p, &params, Some(&s)), DEFAULT_ACTIVATION_TOLERANCE);
        assert_eq!(q.active, base.active);
    }
}

fn noisy_observations(
    game: &GameDefinition,
    truth: &Params,
    sigma2: f64,
    seed: u64,
) -> ObservationSequence {
    let p = transcribe(game, &Default::default()).unwrap();
    let s = solve(&p, truth, None);
    observe(
        &p.trajectory(&s.v),
        &ObservationModel::full_state(game, sigma2),
        seed,
    )
    .unwrap()
}

#[test]
fn inverse_gradient_matches_finite_differences() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
    let p = transcribe(&game, &Default::default()).unwrap();
    let obs = noisy_observations(&game, &truth, 0.01, 11);
    let mut rng = common::rng(5);
    let h = 1e-5;
    for _ in 0..4 {
        let params = Params::new(
            truth
                .theta
                .iter()
                .map(|t| t + rng.gen_range(-0.5..0.5))
                .collect(),
            (0..2).map(|_| rng.gen_range(0.4..0.95)).collect(),
        );
        let s = solve(&p, &params, None);
        let part = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
        let sens = solution_sensitivity(&p, &s, &part, &params).unwrap();
        let g = inverse_gradient(&p, &s, &sens, &obs).unwrap();
        let objective = |q: &Params| {
            obs.objective(&p.trajectory(&solve(&p, q, Some(&s)).v).states)
                .unwrap()
        };
        let mut fd = vec![0.0; params.dim()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let mut plus = params.stacked();
            let mut minus = params.stacked();
            plus[k] += h;
            minus[k] -= h;
            *slot = (objective(&Params::from_stacked(&plus, 4))
                - objective(&Params::from_stacked(&minus, 4)))
                / (2.0 * h);
        }
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = (0..fd.len()).fold(0.0f64, |m, k| m.max((fd[k] - g[k]).abs()));
        assert!(err / (1.0 + scale) <= 1e-3, "{err:e} vs {scale:e}");
    }
}

#[test]
fn gradient_vanishes_on_exact_observations() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
    let p = transcribe(&game, &Default::default()).unwrap();
    let s = solve(&p, &truth, None);
    let model =
        ObservationModel::full_state(&game, 0.0).with_weighting(ObjectiveWeighting::Identity);
    let obs = observe(&p.trajectory(&s.v), &model, 0).unwrap();
    let part = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
    let sens = solution_sensitivity(&p, &s, &part, &truth).unwrap();
    let g = inverse_gradient(&p, &s, &sens, &obs).unwrap();
    assert!(g.iter().all(|x| *x == 0.0), "{g}");
    assert_eq!(
        inverse_objective(&p.trajectory(&s.v).states, &obs).unwrap(),
        0.0
    );
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let (mut game, _) = build_crosswalk(&CrosswalkConfig::default());
    game.objectives[0].terms.push(CostTerm {
        weight: 0.0,
        kind: CostKind::VelocityTracking {
            target: Param::learnable(1.0, 4),
        },
    });
    let truth = game.nominal_params();
    let p = transcribe(&game, &Default::default()).unwrap();
    let obs = noisy_observations(&game, &truth, 0.01, 2);
    let s = solve(&p, &truth, None);
    let part = partition_active(&s, DEFAULT_ACTIVATION_TOLERANCE);
    let sens = solution_sensitivity(&p, &s, &part, &truth).unwrap();
    let g = inverse_gradient(&p, &s, &sens, &obs).unwrap();
    assert_eq!(g[4], 0.0);
    assert!(g[0] != 0.0);
}

#[test]
fn objective_matches_naive_loop() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
    let obs = noisy_observations(&game, &truth, 0.004, 9);
    let p = transcribe(&game, &Default::default()).unwrap();
    let states = p.trajectory(&solve(&p, &truth, None).v).states;
    let mut naive = 0.0;
    for t in 0..obs.len() {
        for c in 0..8 {
            let d = states[(t, c)] - obs.y[(t, c)];
            naive += d * d / 0.004;
        }
    }
    let got = inverse_objective(&states, &obs).unwrap();
    assert!((got - naive).abs() <= 1e-12 * naive.max(1.0));
}

#[test]
fn curvature_is_the_hessian_at_a_zero_residual() {
    // with exact observations the second-order residual term vanishes
    let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
    let p = transcribe(&game, &Default::default()).unwrap();
    let s = solve(&p, &truth, None);
    let model =
        ObservationModel::full_state(&game, 0.0).with_weighting(ObjectiveWeighting::Identity);
    let obs = observe(&p.trajectory(&s.v), &model, 0).unwrap();
    let sens_at = |q: &Params, sol: &MicpSolution| {
        let part = partition_active(sol, DEFAULT_ACTIVATION_TOLERANCE);
        solution_sensitivity(&p, sol, &part, q).unwrap()
    };
    let sens = sens_at(&truth, &s);
    let c = objective_curvature(&p, &sens, &obs);
    assert_eq!(c, c.transpose());
    assert_eq!(objective_curvature_diagonal(&p, &sens, &obs), c.diagonal());
    assert!(c.clone().symmetric_eigenvalues().min() >= -1e-9 * c.norm());

    let h = 1e-6;
    let n = truth.dim();
    let mut fd = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut grads = vec![];
        for sign in [1.0, -1.0] {
            let mut q = truth.stacked();
            q[k] += sign * h;
            let q = Params::from_stacked(&q, 4);
            let sq = solve(&p, &q, Some(&s));
            grads.push(inverse_gradient(&p, &sq, &sens_at(&q, &sq), &obs).unwrap());
        }
        fd.set_column(k, &((&grads[0] - &grads[1]) / (2.0 * h)));
    }
    let err = (&fd - &c).abs().max();
    assert!(err <= 1e-4 * (1.0 + c.abs().max()), "{err:e}\n{fd}\n{c}");
}
