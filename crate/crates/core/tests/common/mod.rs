#![allow(dead_code)]

use foresight_core::game::*;
use foresight_core::transcription::MicpProblem;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mixed bicycle / double-integrator game touching every cost and constraint kind.
pub fn mixed_game() -> GameDefinition {
    let t_len = 6;
    let lane: Vec<[f64; 2]> = (0..=t_len)
        .map(|t| [0.5 * t as f64, 0.1 * t as f64])
        .collect();
    let car = DynamicsModel::bicycle(2.7).with_control_bounds([[-4.0, 3.0], [-0.5, 0.5]]);
    let ped = DynamicsModel::double_integrator()
        .with_control_bounds([[-2.0, 2.0], [-2.0, 2.0]])
        .with_velocity_bounds([[-1.5, 1.5], [-1.5, 1.5]]);
    let region = RoadRegion {
        circles: vec![CornerCircle {
            center: [3.0, 4.0],
            radius: 1.5,
            side: CircleSide::Outside,
        }],
        walls: vec![SigmoidWall {
            normal: [0.0, 1.0],
            offset: -3.0,
            sharpness: 2.0,
        }],
    };
    let objectives = vec![
        AgentObjective {
            terms: vec![
                CostTerm::goal(1.0, [Param::learnable(4.0, 0), Param::learnable(1.0, 1)]),
                CostTerm::control(0.1),
                CostTerm {
                    weight: 1.0,
                    kind: CostKind::LaneCenterQuadratic {
                        centerline: lane.clone(),
                        axes: LaneAxes::Both,
                    },
                },
                CostTerm {
                    weight: 0.5,
                    kind: CostKind::VelocityTracking {
                        target: Param::learnable(2.0, 2),
                    },
                },
                CostTerm::collision(10.0, 2, 1.0, 1.2),
            ],
            discount: DiscountSpec::new(0.8),
        },
        AgentObjective {
            terms: vec![
                CostTerm::goal(1.0, [Param::learnable(-3.0, 3), Param::fixed(0.5)]),
                CostTerm::control(0.2),
                CostTerm {
                    weight: 0.7,
                    kind: CostKind::LaneCenterQuadratic {
                        centerline: lane.clone(),
                        axes: LaneAxes::XOnly,
                    },
                },
            ],
            discount: DiscountSpec::new(0.9),
        },
        AgentObjective {
            terms: vec![
                CostTerm::goal(1.0, [Param::learnable(1.0, 4), Param::learnable(-2.0, 5)]),
                CostTerm::control(0.1),
                CostTerm {
                    weight: 0.3,
                    kind: CostKind::VelocityTracking {
                        target: Param::fixed(1.0),
                    },
                },
                CostTerm {
                    weight: 0.4,
                    kind: CostKind::LaneCenterQuadratic {
                        centerline: lane.clone(),
                        axes: LaneAxes::YOnly,
                    },
                },
                CostTerm::collision(10.0, 0, 1.0, 1.2),
            ],
            discount: DiscountSpec::new(0.6),
        },
    ];
    let constraints = vec![
        ConstraintBlock::new(0, ConstraintKind::ControlBox),
        ConstraintBlock::new(
            0,
            ConstraintKind::RoadRegion {
                region: region.clone(),
            },
        ),
        ConstraintBlock::new(
            1,
            ConstraintKind::CollisionSeparation {
                other: 0,
                d_min: 1.0,
                delta: 1.2,
            },
        ),
        ConstraintBlock::new(1, ConstraintKind::ControlBox),
        ConstraintBlock::new(2, ConstraintKind::VelocityBox),
        ConstraintBlock::new(2, ConstraintKind::ControlBox),
        ConstraintBlock::new(2, ConstraintKind::RoadRegion { region }),
    ];
    GameDefinition {
        dims: GameDimensions {
            num_agents: 3,
            horizon: t_len,
            state_dim: 12,
            control_dims: vec![2, 2, 2],
            dt: 0.1,
        },
        dynamics: vec![car.clone(), car, ped],
        objectives,
        constraints,
        x1: vec![0.0, 0.0, 2.0, 0.1, 1.0, -1.0, 1.5, 0.3, 2.0, 2.0, -0.5, 0.2],
    }
}

/// Random interior point: perturbed primal, random multipliers, positive λ.
pub fn random_point(problem: &MicpProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = problem.initial_point();
    let r = problem.eta_r();
    for (k, x) in v.iter_mut().enumerate() {
        if k < r {
            *x += rng.gen_range(-0.4..0.4);
        } else {
            *x = rng.gen_range(0.1..1.0);
        }
    }
    v
}

pub fn random_params(game: &GameDefinition, rng: &mut ChaCha8Rng) -> Params {
    let mut p = game.nominal_params();
    for t in &mut p.theta {
        *t += rng.gen_range(-0.5..0.5);
    }
    for g in &mut p.gamma {
        *g = rng.gen_range(0.3..1.0);
    }
    p
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seeded so property runs are reproducible.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Default::default()
    }
}

pub fn lq_game(horizon: usize, goal: [f64; 2], w_goal: f64, w_ctrl: f64) -> GameDefinition {
    GameDefinition {
        dims: GameDimensions {
            num_agents: 1,
            horizon,
            state_dim: 4,
            control_dims: vec![2],
            dt: 0.1,
        },
        dynamics: vec![DynamicsModel::double_integrator()],
        objectives: vec![AgentObjective {
            terms: vec![
                CostTerm::goal(w_goal, [Param::fixed(goal[0]), Param::fixed(goal[1])]),
                CostTerm::control(w_ctrl),
            ],
            discount: DiscountSpec::new(1.0),
        }],
        constraints: vec![],
        x1: vec![0.5, -1.0, 0.3, 0.0],
    }
}

/// Equality-constrained QP in `w = [x_1..x_{T-1}, u_0..u_{T-1}]`, solved through its dense KKT matrix.
pub fn lq_oracle(
    horizon: usize,
    x0: &[f64],
    goal: [f64; 2],
    w_goal: f64,
    w_ctrl: f64,
    dt: f64,
) -> DVector<f64> {
    let nx = 4 * (horizon - 1);
    let nu = 2 * horizon;
    let nw = nx + nu;
    let ne = 4 * (horizon - 1);
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, dt, 0.0, 0.0, 1.0, 0.0, dt, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ],
    );
    let b = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, dt, 0.0, 0.0, dt]);
    let xcol = |t: usize| 4 * (t - 1);
    let ucol = |t: usize| nx + 2 * t;
    let mut k = DMatrix::zeros(nw + ne, nw + ne);
    let mut rhs = DVector::zeros(nw + ne);
    for t in 1..horizon {
        for c in 0..2 {
            k[(xcol(t) + c, xcol(t) + c)] += 2.0 * w_goal;
            rhs[xcol(t) + c] += 2.0 * w_goal * goal[c];
        }
    }
    for t in 0..horizon {
        for c in 0..2 {
            k[(ucol(t) + c, ucol(t) + c)] += 2.0 * w_ctrl;
        }
    }
    // x_{t+1} - A x_t - B u_t = 0
    for t in 0..horizon - 1 {
        let row = nw + 4 * t;
        for i in 0..4 {
            k[(row + i, xcol(t + 1) + i)] = 1.0;
            for j in 0..4 {
                if t > 0 {
                    k[(row + i, xcol(t) + j)] = -a[(i, j)];
                } else {
                    rhs[row + i] += a[(i, j)] * x0[j];
                }
            }
            for j in 0..2 {
                k[(row + i, ucol(t) + j)] = -b[(i, j)];
            }
        }
    }
    for r in nw..nw + ne {
        for c in 0..nw {
            k[(c, r)] = k[(r, c)];
        }
    }
    let sol = k.lu().solve(&rhs).unwrap();
    sol.rows(0, nw).into_owned()
}
