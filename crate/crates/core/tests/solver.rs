mod common;

use foresight_core::game::*;
use foresight_core::micp::ExplicitMicp;
use foresight_core::scenarios::{build_crosswalk, CollisionForm, CrosswalkConfig};
use foresight_core::solver::{solve_micp, warm_start, SolverConfig};
use foresight_core::transcription::{
    transcribe, DynamicsOwnership, KktScaling, TranscriptionOptions,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn scalar_lcp(offset: f64) -> ExplicitMicp {
    // h(z) = z + offset
    ExplicitMicp::new(
        0,
        1,
        0,
        Box::new(move |v, _| {
            (
                vec![v[0] + offset],
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::zeros(1, 0),
            )
        }),
    )
}

#[test]
fn scalar_active_branch() {
    let p = scalar_lcp(-1.0);
    let none = Params::new(vec![], vec![]);
    let s = solve_micp(&p, &none, &[5.0], &SolverConfig::default()).unwrap();
    assert!(s.converged);
    assert!((s.v[0] - 1.0).abs() < 1e-10);
    assert_eq!(s.active_set, vec![0]);
}

#[test]
fn scalar_inactive_branch() {
    let p = scalar_lcp(1.0);
    let none = Params::new(vec![], vec![]);
    let s = solve_micp(&p, &none, &[1.0], &SolverConfig::default()).unwrap();
    assert!(s.v[0].abs() < 1e-10);
    assert!(s.active_set.is_empty());
    assert!((s.h[0] - 1.0).abs() < 1e-10);
}

#[test]
fn mixed_scalar_system() {
    // r: 2r - z - 1 = 0; z ⊥ r - 2 (inactive at r = 1/2 unless z pushes it)
    let p = ExplicitMicp::new(
        1,
        1,
        0,
        Box::new(|v, _| {
            let f = vec![2.0 * v[0] - v[1] - 1.0, v[0] - 2.0];
            let j = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 1.0, 0.0]);
            (f, j, DMatrix::zeros(2, 0))
        }),
    );
    let s = solve_micp(
        &p,
        &Params::new(vec![], vec![]),
        &[0.0, 1.0],
        &SolverConfig::default(),
    )
    .unwrap();
    // z = 0 gives r = 1/2 < 2, so the constraint must bind: r = 2, z = 3.
    assert!(
        (s.v[0] - 2.0).abs() < 1e-10 && (s.v[1] - 3.0).abs() < 1e-10,
        "{:?}",
        s.v
    );
}

#[test]
fn lq_game_matches_dense_kkt() {
    let (t_len, goal, wg, wc) = (12, [2.0, 1.5], 1.0, 0.1);
    let game = common::lq_game(t_len, goal, wg, wc);
    let oracle = common::lq_oracle(t_len, &game.x1, goal, wg, wc, game.dims.dt);
    for ownership in [DynamicsOwnership::PerAgent, DynamicsOwnership::Shared] {
        for scaling in [KktScaling::Discounted, KktScaling::Unscaled] {
            let p = transcribe(&game, &TranscriptionOptions { ownership, scaling }).unwrap();
            let s = solve_micp(
                &p,
                &game.nominal_params(),
                &p.initial_point(),
                &SolverConfig::default(),
            )
            .unwrap();
            let traj = p.trajectory(&s.v);
            let mut err: f64 = 0.0;
            for t in 1..t_len {
                for c in 0..4 {
                    err = err.max((traj.states[(t, c)] - oracle[4 * (t - 1) + c]).abs());
                }
            }
            for t in 0..t_len {
                for c in 0..2 {
                    err = err.max(
                        (traj.controls[0][(t, c)] - oracle[4 * (t_len - 1) + 2 * t + c]).abs(),
                    );
                }
            }
            assert!(err <= 1e-6, "{ownership:?}/{scaling:?}: {err:e}");
        }
    }
}

#[test]
fn solves_are_bitwise_deterministic() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig {
        collision: CollisionForm::Constraint,
        ..Default::default()
    });
    let p = transcribe(&game, &Default::default()).unwrap();
    let a = solve_micp(&p, &truth, &p.initial_point(), &SolverConfig::default()).unwrap();
    let b = solve_micp(&p, &truth, &p.initial_point(), &SolverConfig::default()).unwrap();
    assert_eq!(
        a.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn warm_start_saves_iterations() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
    let p = transcribe(&game, &Default::default()).unwrap();
    let base = solve_micp(&p, &truth, &p.initial_point(), &SolverConfig::default()).unwrap();
    let mut moved = truth.clone();
    moved.theta[0] += 1e-3;
    let cold = solve_micp(&p, &moved, &p.initial_point(), &SolverConfig::default()).unwrap();
    let warm = solve_micp(
        &p,
        &moved,
        &warm_start(&base, &p).unwrap(),
        &SolverConfig::default(),
    )
    .unwrap();
    assert!(
        warm.iterations < cold.iterations,
        "warm {} vs cold {}",
        warm.iterations,
        cold.iterations
    );
}

#[test]
fn warm_start_clamps_negative_multipliers() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
    let p = transcribe(&game, &Default::default()).unwrap();
    let s = solve_micp(&p, &truth, &p.initial_point(), &SolverConfig::default()).unwrap();
    assert_eq!(warm_start(&s, &p).unwrap(), s.v);
    let mut tweaked = s.clone();
    let j = p.eta_r() + 3;
    tweaked.v[j] = -1e-15;
    let v = warm_start(&tweaked, &p).unwrap();
    assert_eq!(v[j], 0.0);
    let other = transcribe(
        &build_crosswalk(&CrosswalkConfig {
            horizon: 10,
            ..Default::default()
        })
        .0,
        &Default::default(),
    )
    .unwrap();
    assert!(warm_start(&s, &other).is_err());
}

/// Crosswalk with tight boxes and the collision as a constraint, so some rows bind.
fn tight_crosswalk(gamma: [f64; 2], goal_shift: f64) -> (GameDefinition, Params) {
    let mut cfg = CrosswalkConfig {
        collision: CollisionForm::Constraint,
        control_limit: 6.0,
        velocity_limit: 5.0,
        gamma,
        ..Default::default()
    };
    cfg.goals[0][0] += goal_shift;
    build_crosswalk(&cfg)
}

#[test]
fn converged_solution_is_complementary() {
    let (game, truth) = tight_crosswalk([0.7, 0.8], 0.0);
    let p = transcribe(&game, &Default::default()).unwrap();
    let cfg = SolverConfig::default();
    let s = solve_micp(&p, &truth, &p.initial_point(), &cfg).unwrap();
    assert!(!s.active_set.is_empty(), "fixture should have binding rows");
    let z = s.z();
    for (j, h) in s.h.iter().enumerate() {
        assert!(z[j] >= -1e-12);
        assert!(z[j].min(*h).abs() <= 10.0 * cfg.residual_tolerance);
    }
    let f = p.residual(&s.v, &truth).unwrap();
    let c = f[..p.eta_r()].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(c <= cfg.residual_tolerance);
    assert!(p.kkt_residual(&s.v, &truth).unwrap() <= cfg.residual_tolerance);
}

#[test]
fn each_agent_is_first_order_optimal() {
    let (game, truth) = tight_crosswalk([0.7, 0.8], 0.0);
    let p = transcribe(
        &game,
        &TranscriptionOptions {
            scaling: KktScaling::Unscaled,
            ..Default::default()
        },
    )
    .unwrap();
    let s = solve_micp(&p, &truth, &p.initial_point(), &SolverConfig::default()).unwrap();
    for agent in 0..2 {
        let (gx, gu) = p.lagrangian_gradient(&s.v, &truth, agent).unwrap();
        // own substate rows; the other agent's states carry no multipliers of this agent
        let own = (0..game.horizon() - 1).flat_map(|t| (0..4).map(move |c| t * 8 + 4 * agent + c));
        let worst = own
            .map(|k| gx[k].abs())
            .chain(gu.iter().map(|g| g.abs()))
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-7, "agent {agent}: {worst:e}");
    }
}

#[test]
fn dimension_and_parameter_errors() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
    let p = transcribe(&game, &Default::default()).unwrap();
    assert!(solve_micp(&p, &truth, &[0.0; 3], &SolverConfig::default()).is_err());
    let bad = Params::new(truth.theta.clone(), vec![0.7]);
    assert!(solve_micp(&p, &bad, &p.initial_point(), &SolverConfig::default()).is_err());
    let tiny = SolverConfig {
        max_iterations: 1,
        ..Default::default()
    };
    let (hard, hard_truth) = tight_crosswalk([0.7, 0.8], 0.0);
    let hp = transcribe(&hard, &Default::default()).unwrap();
    match solve_micp(&hp, &hard_truth, &hp.initial_point(), &tiny) {
        Err(foresight_core::Error::NonConvergence { .. }) => {}
        other => panic!(
            "expected non-convergence, got {:?}",
            other.map(|s| s.iterations)
        ),
    }
}

proptest! {
    #![proptest_config(common::prop_config(16))]

    #[test]
    fn invariants_hold_at_random_parameters(g0 in 0.3f64..0.7, g1 in 0.3f64..0.7, shift in -1.0f64..1.0) {
        let (game, params) = tight_crosswalk([g0, g1], shift);
        let p = transcribe(&game, &Default::default()).unwrap();
        let cfg = SolverConfig::default();
        let s = solve_micp(&p, &params, &p.initial_point(), &cfg).unwrap();
        prop_assert!(s.converged);
        let z = s.z();
        for (j, h) in s.h.iter().enumerate() {
            prop_assert!(z[j] >= -1e-12);
            prop_assert!(z[j].min(*h).abs() <= 10.0 * cfg.residual_tolerance);
        }
        let traj = p.trajectory(&s.v);
        prop_assert!(traj.dynamics_residual(&game) <= 1e-8);
        prop_assert!(s.h.iter().all(|h| *h >= -1e-8));
    }
}
