mod common;

use foresight_core::game::Params;
use foresight_core::scenarios::intersection::{
    downsample, downsampled_stages, read_trajectories, BUNDLED_LANES,
};
use foresight_core::scenarios::*;
use foresight_core::solver::{solve_micp, SolverConfig};
use foresight_core::transcription::transcribe;
use foresight_core::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn min_distance(traj: &foresight_core::game::Trajectory, a: usize, b: usize) -> f64 {
    (0..traj.horizon())
        .map(|t| {
            let (p, q) = (traj.position(a, t), traj.position(b, t));
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn crosswalk_equilibrium_keeps_distance() {
    let cfg = CrosswalkConfig::default();
    let (game, truth) = build_crosswalk(&cfg);
    let p = transcribe(&game, &Default::default()).unwrap();
    let s = solve_micp(&p, &truth, &p.initial_point(), &SolverConfig::default()).unwrap();
    let d = min_distance(&p.trajectory(&s.v), 0, 4);
    assert!(d >= cfg.d_min, "min distance {d}");
}

#[test]
fn crosswalk_mirror_swaps_agents() {
    let (game, truth) = build_crosswalk(&CrosswalkConfig {
        gamma: [0.6, 0.85],
        ..Default::default()
    });
    let (mirror, mirror_truth) = build_crosswalk(&CrosswalkConfig {
        gamma: [0.85, 0.6],
        ..Default::default()
    });
    // the layout maps onto itself under x -> -x with the agents exchanged
    let swap = |th: &[f64]| vec![-th[2], th[3], -th[0], th[1]];
    assert_eq!(mirror_truth.theta, swap(&truth.theta));
    let solve = |g: &foresight_core::game::GameDefinition, params: &Params| {
        let p = transcribe(g, &Default::default()).unwrap();
        let s = solve_micp(&p, params, &p.initial_point(), &SolverConfig::default()).unwrap();
        p.trajectory(&s.v)
    };
    let a = solve(&game, &truth);
    let b = solve(&mirror, &mirror_truth);
    let flip = [-1.0, 1.0, -1.0, 1.0];
    for t in 0..a.horizon() {
        for k in 0..4 {
            assert!((b.states[(t, k)] - flip[k] * a.states[(t, 4 + k)]).abs() < 1e-8);
            assert!((b.states[(t, 4 + k)] - flip[k] * a.states[(t, k)]).abs() < 1e-8);
        }
    }
}

#[test]
fn stage_count_from_frames() {
    assert_eq!(downsampled_stages(162, 6), 28);
    let tracks = read_trajectories(intersection::BUNDLED_TRAJECTORIES.as_bytes()).unwrap();
    assert_eq!(tracks.len(), 4);
    for track in tracks.values() {
        assert_eq!(track.len(), 163);
        let kept = downsample(track, 6);
        assert_eq!(kept.len(), 28);
        assert_eq!(kept[27].frame, 162);
    }
}

#[test]
fn bundled_intersection_builds() {
    let sc = build_bundled_intersection(&IntersectionConfig::default()).unwrap();
    let g = &sc.game;
    assert_eq!((g.dims.num_agents, g.dims.horizon), (4, 28));
    assert!((g.dims.dt - 0.24).abs() < 1e-15);
    assert_eq!(sc.truth.theta.len(), 8);
    let kinds: Vec<_> = g.dynamics.iter().map(|m| m.kind.clone()).collect();
    assert!(matches!(
        kinds[0],
        foresight_core::game::DynamicsKind::DoubleIntegrator2D
    ));
    assert!(matches!(
        kinds[3],
        foresight_core::game::DynamicsKind::KinematicBicycle { .. }
    ));
    let separations = g
        .constraints
        .iter()
        .filter(|b| {
            matches!(
                b.kind,
                foresight_core::game::ConstraintKind::CollisionSeparation { .. }
            )
        })
        .count();
    assert_eq!(separations, 12);
    for i in 0..4 {
        assert!(g.constraints.iter().any(|b| b.owner == i
            && matches!(
                b.kind,
                foresight_core::game::ConstraintKind::RoadRegion { .. }
            )));
        let lane = g.objectives[i].terms.iter().any(|t| {
            matches!(
                t.kind,
                foresight_core::game::CostKind::LaneCenterQuadratic { .. }
            )
        });
        assert_eq!(lane, i >= 2);
    }
    let again = build_bundled_intersection(&IntersectionConfig::default()).unwrap();
    assert_eq!(again.game, sc.game);
}

#[test]
fn intersection_equilibrium_is_feasible() {
    let sc = build_bundled_intersection(&IntersectionConfig::default()).unwrap();
    let (p, s) = sc
        .solve(&sc.truth, &Default::default(), &SolverConfig::default())
        .unwrap();
    assert!(s.converged);
    let traj = p.trajectory(&s.v);
    assert!(traj.dynamics_residual(&sc.game) <= 1e-8);
    assert!(s.h.iter().all(|h| *h >= -1e-8));
    let threshold = (1.2f64).sqrt();
    let offsets = sc.game.state_offsets();
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(min_distance(&traj, offsets[i], offsets[j]) >= threshold - 1e-6);
        }
    }
}

#[test]
fn road_regions_split_published_grid() {
    #[derive(serde::Deserialize)]
    struct Point {
        agent_id: usize,
        x_m: f64,
        y_m: f64,
        legal: u8,
    }
    let cfg = IntersectionConfig::default();
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/intersection_region_grid.csv"
    );
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let mut seen = [0usize; 2];
    for row in rdr.deserialize::<Point>() {
        let p = row.unwrap();
        let m = cfg.regions[p.agent_id].margin([p.x_m, p.y_m]);
        if p.legal == 1 {
            assert!(
                m >= 0.0,
                "agent {} ({}, {}) margin {m}",
                p.agent_id,
                p.x_m,
                p.y_m
            );
        } else {
            assert!(
                m < 0.0,
                "agent {} ({}, {}) margin {m}",
                p.agent_id,
                p.x_m,
                p.y_m
            );
        }
        seen[p.legal as usize] += 1;
    }
    assert!(seen[0] > 0 && seen[1] > 0);
}

#[test]
fn reference_start_is_legal() {
    let cfg = IntersectionConfig::default();
    let sc = build_bundled_intersection(&cfg).unwrap();
    let traj = sc.reference_rollout().unwrap();
    let offsets = sc.game.state_offsets();
    for i in 0..4 {
        for t in 0..traj.horizon() {
            assert!(cfg.regions[i].margin(traj.position(offsets[i], t)) > 0.0);
        }
    }
}

fn ingestion_error(csv: &str) -> (usize, String) {
    match read_trajectories(csv.as_bytes()) {
        Err(Error::Ingestion { row, column, .. }) => (row, column),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn malformed_trajectories_report_location() {
    let header = "frame,agent_id,x_m,y_m,vx_mps,vy_mps,heading_rad\n";
    assert_eq!(
        ingestion_error("frame,agent,x_m,y_m,vx_mps,vy_mps,heading_rad\n0,0,1,1,0,0,0\n"),
        (1, "agent_id".into())
    );
    assert_eq!(
        ingestion_error(&format!("{header}0,0,1,1,0,0,0\n1,0,1,abc,0,0,0\n")),
        (3, "y_m".into())
    );
    assert_eq!(
        ingestion_error(&format!("{header}0,0,1,1,0,0,0\n1,0.5,1,1,0,0,0\n")),
        (3, "agent_id".into())
    );
    assert_eq!(
        ingestion_error(&format!("{header}0,0,1,1,0,0,0\n2,0,1,1,0,0,0\n")),
        (3, "frame".into())
    );
    assert_eq!(
        ingestion_error(&format!("{header}0,0,1,1,0,0,0\n0,0,1,1,0,0,0\n")),
        (3, "frame".into())
    );
    assert_eq!(
        ingestion_error(&format!(
            "{header}0,0,1,1,0,0,0\n0,1,1,1,0,0,0\n1,0,1,1,0,0,0\n"
        ))
        .1,
        "frame"
    );
    assert_eq!(
        ingestion_error(&format!("{header}0,0,1,1,0,NaN,0\n")),
        (2, "vy_mps".into())
    );
    assert_eq!(ingestion_error(&format!("{header}0,0,1,1,0,0\n")).0, 2);
}

#[test]
fn config_must_match_recording() {
    let cfg = IntersectionConfig {
        kinds: vec![AgentKind::Pedestrian; 3],
        ..Default::default()
    };
    assert!(matches!(
        build_bundled_intersection(&cfg),
        Err(Error::Parameter(_))
    ));
    let lanes_for_one_car = "agent_id,x_m,y_m\n2,0,0\n2,1,1\n";
    assert!(build_intersection(
        intersection::BUNDLED_TRAJECTORIES.as_bytes(),
        lanes_for_one_car.as_bytes(),
        &Default::default()
    )
    .is_err());
    assert!(build_intersection(
        intersection::BUNDLED_TRAJECTORIES.as_bytes(),
        BUNDLED_LANES.as_bytes(),
        &Default::default()
    )
    .is_ok());
}

#[test]
fn collinear_lane_is_reproduced() {
    let pts: Vec<[f64; 2]> = (0..6)
        .map(|k| [1.0 + 0.5 * k as f64, -2.0 + 1.5 * k as f64])
        .collect();
    let lane = fit_lane_centerline(&pts, 1, 5).unwrap();
    assert_eq!(lane.samples.len(), 6);
    for (s, p) in lane.samples.iter().zip(&pts) {
        assert!((s[0] - p[0]).abs() < 1e-12 && (s[1] - p[1]).abs() < 1e-12);
    }
}

#[test]
fn lane_samples_lie_on_fit() {
    let sc = build_bundled_intersection(&IntersectionConfig::default()).unwrap();
    let lane = sc.lanes[2].as_ref().unwrap();
    assert_eq!(lane.samples.len(), sc.game.horizon() + 1);
    for (t, s) in lane.samples.iter().enumerate() {
        let p = lane.point(t as f64 / sc.game.horizon() as f64);
        assert!((p[0] - s[0]).abs() <= 1e-9 && (p[1] - s[1]).abs() <= 1e-9);
    }
    assert!(sc.lanes[0].is_none());
}

#[test]
fn least_squares_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s: Vec<f64> = (0..25).map(|k| k as f64 / 24.0).collect();
    let y: Vec<f64> = s
        .iter()
        .map(|v| 1.0 - 2.0 * v + 0.5 * v.powi(3) + rng.gen_range(-0.05..0.05))
        .collect();
    let fit = fit_polynomial(&s, &y, 3).unwrap();
    let a = DMatrix::from_fn(s.len(), 4, |r, c| s[r].powi(c as i32));
    let b = DVector::from_column_slice(&y);
    let coeffs = (a.transpose() * &a)
        .cholesky()
        .unwrap()
        .solve(&(a.transpose() * &b));
    let residual = (&a * &coeffs - &b).norm_squared();
    assert!((fit.residual - residual).abs() <= 1e-9);
    for (c, o) in fit.polynomial.coeffs.iter().zip(coeffs.iter()) {
        assert!((c - o).abs() <= 1e-9);
    }
}
