//! Four-car unprotected left turn, and a receding-horizon loop in which the ego
//! repeatedly infers the other cars' costs from a short window of noisy
//! observations, plans, and applies the first planned control.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    AgentObjective, ConstraintBlock, ConstraintKind, CostKind, CostTerm, DiscountSpec,
    DynamicsModel, GameDefinition, GameDimensions, LaneAxes, Param, Params, Trajectory,
};
use crate::inverse::{infer_with_problem, InverseConfig, StepScaling};
use crate::rng::{standard_normals, substream};
use crate::solver::{solve_micp, SolverConfig};
use crate::transcription::{transcribe, MicpProblem};

/// Learnable entries per non-ego car: goal x, goal y, target speed.
pub const CAR_THETA_DIM: usize = 3;

/// Lane reference of one car.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LaneSpec {
    /// Straight lane: one coordinate held at `value`.
    Axis { axes: LaneAxes, value: f64 },
    /// Polyline followed at the target speed from the closest point to the current position.
    Path { points: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarSpec {
    /// `[px, py, v, psi]`.
    pub start: [f64; 4],
    pub goal: [f64; 2],
    pub target_speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane: Option<LaneSpec>,
}

/// Eastbound approach on `y = -2`, quarter turn of radius 4 about `(-2, 2)`, then north on `x = 2`.
pub fn left_turn_path() -> Vec<[f64; 2]> {
    let mut points = vec![[-40.0, -2.0]];
    for k in 0..=18 {
        let a = std::f64::consts::FRAC_PI_2 * k as f64 / 18.0;
        points.push([-2.0 + 4.0 * a.sin(), 2.0 - 4.0 * a.cos()]);
    }
    points.push([2.0, 40.0]);
    points
}

/// `count` points spaced `spacing` apart along `points`, starting at the projection of `p`.
/// Past the end the last segment is extended.
pub fn path_samples(points: &[[f64; 2]], p: [f64; 2], spacing: f64, count: usize) -> Vec<[f64; 2]> {
    let seg_len: Vec<f64> = points.windows(2).map(|w| distance(w[0], w[1])).collect();
    let mut best = (f64::INFINITY, 0.0);
    let mut s0 = 0.0;
    for (k, w) in points.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let l2 = d[0] * d[0] + d[1] * d[1];
        let u = if l2 > 0.0 {
            (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + u * d[0], a[1] + u * d[1]];
        let dist = distance(p, q);
        if dist < best.0 {
            best = (dist, s0 + u * seg_len[k]);
        }
        s0 += seg_len[k];
    }
    (0..count)
        .map(|k| point_at(points, &seg_len, best.1 + spacing * k as f64))
        .collect()
}

fn point_at(points: &[[f64; 2]], seg_len: &[f64], s: f64) -> [f64; 2] {
    let mut rest = s;
    for (k, len) in seg_len.iter().enumerate() {
        if rest <= *len || k + 1 == seg_len.len() {
            let (a, b) = (points[k], points[k + 1]);
            let u = if *len > 0.0 { rest / len } else { 0.0 };
            return [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
        }
        rest -= len;
    }
    points[points.len() - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrivingConfig {
    pub dt: f64,
    pub cars: Vec<CarSpec>,
    pub ego: usize,
    pub gamma: Vec<f64>,
    pub w_goal: f64,
    pub w_ctrl: f64,
    pub w_lane: f64,
    pub w_speed: f64,
    pub w_coll: f64,
    pub d_min: f64,
    pub delta: f64,
    pub wheelbase: f64,
    pub acceleration: [f64; 2],
    pub steering: f64,
}

impl Default for DrivingConfig {
    fn default() -> Self {
        let half = std::f64::consts::FRAC_PI_2;
        Self {
            dt: 0.1,
            cars: vec![
                // ego: eastbound, turning left into the northbound lane
                CarSpec {
                    start: [-12.0, -2.0, 4.0, 0.0],
                    goal: [2.0, 14.0],
                    target_speed: 4.0,
                    lane: Some(LaneSpec::Path {
                        points: left_turn_path(),
                    }),
                },
                // oncoming westbound
                CarSpec {
                    start: [6.0, 2.0, 4.0, std::f64::consts::PI],
                    goal: [-34.0, 2.0],
                    target_speed: 4.0,
                    lane: Some(LaneSpec::Axis {
                        axes: LaneAxes::YOnly,
                        value: 2.0,
                    }),
                },
                // northbound, ends up ahead of the ego in its target lane
                CarSpec {
                    start: [2.0, -12.0, 5.0, half],
                    goal: [2.0, 38.0],
                    target_speed: 5.0,
                    lane: Some(LaneSpec::Axis {
                        axes: LaneAxes::XOnly,
                        value: 2.0,
                    }),
                },
                // southbound on the far side
                CarSpec {
                    start: [-2.0, 24.0, 4.0, -half],
                    goal: [-2.0, -16.0],
                    target_speed: 4.0,
                    lane: Some(LaneSpec::Axis {
                        axes: LaneAxes::XOnly,
                        value: -2.0,
                    }),
                },
            ],
            ego: 0,
            gamma: vec![1.0, 0.9, 0.8, 0.95],
            w_goal: 0.05,
            w_ctrl: 0.5,
            w_lane: 1.0,
            w_speed: 1.0,
            w_coll: 100.0,
            d_min: 2.0,
            delta: 8.0,
            wheelbase: 2.7,
            acceleration: [-6.0, 3.0],
            steering: 0.6,
        }
    }
}

impl DrivingConfig {
    pub fn num_agents(&self) -> usize {
        self.cars.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cars.len() < 2 || self.ego >= self.cars.len() {
            return Err(Error::Parameter(format!(
                "ego {} among {} cars",
                self.ego,
                self.cars.len()
            )));
        }
        if self.gamma.len() != self.cars.len() {
            return Err(Error::Parameter(format!(
                "{} discount factors for {} cars",
                self.gamma.len(),
                self.cars.len()
            )));
        }
        if !(self.dt > 0.0) || !(self.d_min > 0.0) || !(self.delta > 0.0) {
            return Err(Error::Parameter(
                "dt, d_min and delta must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Ground-truth θ in the layout used by [`build_driving`].
    pub fn truth(&self) -> Params {
        let theta = self.others().flat_map(|i| {
            let c = &self.cars[i];
            [c.goal[0], c.goal[1], c.target_speed]
        });
        Params::new(theta.collect(), self.gamma.clone())
    }

    fn others(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cars.len()).filter(move |i| *i != self.ego)
    }

    /// θ offset of a non-ego car.
    fn theta_offset(&self, agent: usize) -> Option<usize> {
        (agent != self.ego)
            .then(|| CAR_THETA_DIM * if agent < self.ego { agent } else { agent - 1 })
    }
}

/// Game over `horizon` stages from the joint state `x1`. θ holds `[goal_x, goal_y, v_target]`
/// for every car except the ego, whose cost is fixed.
pub fn build_driving(config: &DrivingConfig, x1: &[f64], horizon: usize) -> Result<GameDefinition> {
    config.validate()?;
    let n = config.num_agents();
    if x1.len() != 4 * n {
        return Err(Error::Dimension(format!(
            "joint state has {} entries, expected {}",
            x1.len(),
            4 * n
        )));
    }
    let c = config;
    let model = DynamicsModel::bicycle(c.wheelbase)
        .with_control_bounds([c.acceleration, [-c.steering, c.steering]]);
    let mut objectives = Vec::with_capacity(n);
    let mut constraints = Vec::with_capacity(n);
    for (i, car) in c.cars.iter().enumerate() {
        let param = |k: usize, value: f64| match c.theta_offset(i) {
            Some(o) => Param::learnable(value, o + k),
            None => Param::fixed(value),
        };
        let mut terms = vec![
            CostTerm::goal(c.w_goal, [param(0, car.goal[0]), param(1, car.goal[1])]),
            CostTerm::control(c.w_ctrl),
            CostTerm {
                weight: c.w_speed,
                kind: CostKind::VelocityTracking {
                    target: param(2, car.target_speed),
                },
            },
        ];
        let lane = match &car.lane {
            Some(LaneSpec::Axis { axes, value }) => {
                Some((vec![[*value, *value]; horizon + 1], *axes))
            }
            Some(LaneSpec::Path { points }) => {
                let p = [x1[4 * i], x1[4 * i + 1]];
                Some((
                    path_samples(points, p, car.target_speed * c.dt, horizon + 1),
                    LaneAxes::Both,
                ))
            }
            None => None,
        };
        if let Some((centerline, axes)) = lane {
            terms.push(CostTerm {
                weight: c.w_lane,
                kind: CostKind::LaneCenterQuadratic { centerline, axes },
            });
        }
        terms.extend(
            (0..n)
                .filter(|j| *j != i)
                .map(|j| CostTerm::collision(c.w_coll, j, c.d_min, c.delta)),
        );
        objectives.push(AgentObjective {
            terms,
            discount: DiscountSpec::new(c.gamma[i]),
        });
        constraints.push(ConstraintBlock::new(i, ConstraintKind::ControlBox));
    }
    let game = GameDefinition {
        dims: GameDimensions {
            num_agents: n,
            horizon,
            state_dim: 4 * n,
            control_dims: vec![2; n],
            dt: c.dt,
        },
        dynamics: vec![model; n],
        objectives,
        constraints,
        x1: x1.to_vec(),
    };
    game.validate()?;
    Ok(game)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrakingConfig {
    /// Brake when another car is closer than this ahead (meters).
    pub headway: f64,
    /// Half-width of the corridor counted as "ahead".
    pub lateral: f64,
    pub deceleration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecedingHorizonConfig {
    /// Simulated stages, the initial state included.
    pub total_steps: usize,
    /// Stages of each planning game, the current state included.
    pub plan_horizon: usize,
    /// Most recent observations used for inference.
    pub window: usize,
    pub ego: usize,
    pub inference: InverseConfig,
    pub planner: SolverConfig,
    /// Reactive braking of the scripted cars; `None` replays the script unchanged.
    pub braking: Option<BrakingConfig>,
    /// Initial estimate; `None` uses [`DrivingScenario::prior`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_estimate: Option<Params>,
}

impl Default for RecedingHorizonConfig {
    fn default() -> Self {
        let d = DrivingConfig::default();
        Self {
            total_steps: 50,
            plan_horizon: 11,
            window: 10,
            ego: 0,
            inference: InverseConfig {
                learning_rate: 0.02,
                normalized_gradient: true,
                step_scaling: StepScaling::GaussNewtonDiagonal,
                max_iterations: 5,
                convergence_tol: 1e-4,
                ..Default::default()
            },
            planner: SolverConfig::default(),
            braking: Some(BrakingConfig {
                headway: (d.d_min * d.delta).sqrt(),
                lateral: 2.0,
                deceleration: 4.0,
            }),
            initial_estimate: None,
        }
    }
}

impl RecedingHorizonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.plan_horizon < 2 || self.plan_horizon > self.total_steps {
            return Err(Error::Parameter(format!(
                "plan horizon {} must lie in [2, {}]",
                self.plan_horizon, self.total_steps
            )));
        }
        if self.window < 1 {
            return Err(Error::Parameter(
                "observation window must be at least 1".into(),
            ));
        }
        self.inference.validate()?;
        self.planner.validate()
    }
}

/// Driving game plus the script the non-ego cars replay.
#[derive(Clone, Debug)]
pub struct DrivingScenario {
    pub config: DrivingConfig,
    pub x1: Vec<f64>,
    /// Forward equilibrium of the full game at the true parameters.
    pub script: Trajectory,
}

impl DrivingScenario {
    pub fn new(config: DrivingConfig, total_steps: usize, solver: &SolverConfig) -> Result<Self> {
        let x1: Vec<f64> = config.cars.iter().flat_map(|c| c.start).collect();
        let game = build_driving(&config, &x1, total_steps)?;
        let problem = transcribe(&game, &Default::default())?;
        let solution = solve_micp(&problem, &config.truth(), &problem.initial_point(), solver)?;
        let script = problem.trajectory(&solution.v);
        Ok(Self { config, x1, script })
    }

    /// Estimate before any data: goals 40 m ahead of each car, target speed equal to its
    /// initial speed, all discount factors at the ego's value.
    pub fn prior(&self) -> Params {
        let c = &self.config;
        let theta = c.others().flat_map(|i| {
            let [px, py, v, psi] = c.cars[i].start;
            [px + 40.0 * psi.cos(), py + 40.0 * psi.sin(), v]
        });
        let g = c.gamma[c.ego];
        Params::new(theta.collect(), vec![g; c.num_agents()])
    }

    pub fn ego_goal(&self) -> [f64; 2] {
        self.config.cars[self.config.ego].goal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceStatus {
    /// Too few observations for a window.
    Skipped,
    Converged,
    IterationCap,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// True joint state at stage `t`.
    pub state: Vec<f64>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub ego_control: [f64; 2],
    /// Ego distance to each car, in agent order (0 for the ego itself).
    pub distances: Vec<f64>,
    pub goal_distance: f64,
    pub inference: InferenceStatus,
    /// The applied control came from an earlier plan.
    pub fallback: bool,
    /// Scripted cars that braked this step.
    pub braking: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub seed: u64,
    pub sigma2: f64,
    pub ego: usize,
    pub d_min: f64,
    pub steps: Vec<StepRecord>,
}

impl SimulationLog {
    pub fn min_distance(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| {
                s.distances
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != self.ego)
                    .map(|(_, d)| *d)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn initial_goal_distance(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.goal_distance)
    }

    pub fn final_goal_distance(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.goal_distance)
    }

    /// Largest `|γ̂_{t+1} - γ̂_t|∞` between consecutive steps that both ran inference.
    pub fn max_gamma_drift(&self) -> f64 {
        let inferred: Vec<&StepRecord> = self
            .steps
            .iter()
            .filter(|s| s.inference != InferenceStatus::Skipped)
            .collect();
        inferred
            .windows(2)
            .map(|w| {
                w[0].gamma
                    .iter()
                    .zip(&w[1].gamma)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let Some(first) = self.steps.first() else {
            return Err(Error::Parameter("empty simulation log".into()));
        };
        let mut header = vec!["t".to_string()];
        header.extend((0..first.state.len()).map(|k| format!("x_{k}")));
        header.extend((0..first.theta.len()).map(|k| format!("theta_{k}")));
        header.extend((0..first.gamma.len()).map(|k| format!("gamma_{k}")));
        header.extend(["a_ego".into(), "phi_ego".into()]);
        header.extend((0..first.distances.len()).map(|k| format!("dist_{k}")));
        header.extend([
            "goal_distance".into(),
            "inference".into(),
            "fallback".into(),
        ]);
        writeln!(w, "{}", header.join(","))?;
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend(
                s.state
                    .iter()
                    .chain(&s.theta)
                    .chain(&s.gamma)
                    .chain(&s.ego_control)
                    .chain(&s.distances)
                    .map(f64::to_string),
            );
            row.push(s.goal_distance.to_string());
            row.push(format!("{:?}", s.inference));
            row.push(u8::from(s.fallback).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn position(x: &[f64], agent: usize) -> [f64; 2] {
    [x[4 * agent], x[4 * agent + 1]]
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Deceleration command when another car sits inside the corridor ahead of `agent`.
pub fn braking_command(x: &[f64], agent: usize, braking: &BrakingConfig, dt: f64) -> Option<f64> {
    let [px, py, v, psi] = [
        x[4 * agent],
        x[4 * agent + 1],
        x[4 * agent + 2],
        x[4 * agent + 3],
    ];
    let (c, s) = (psi.cos(), psi.sin());
    let blocked = (0..x.len() / 4).filter(|j| *j != agent).any(|j| {
        let [qx, qy] = position(x, j);
        let (dx, dy) = (qx - px, qy - py);
        let ahead = dx * c + dy * s;
        ahead > 0.0 && ahead < braking.headway && (dy * c - dx * s).abs() < braking.lateral
    });
    // never reverse
    blocked.then(|| (-braking.deceleration).max(-v.max(0.0) / dt))
}

/// Window inference game: the first observation in the window is the fixed initial state.
fn window_data(
    scenario: &DrivingScenario,
    observed: &[Vec<f64>],
    sigma2: f64,
    seed: u64,
) -> Result<(MicpProblem, crate::observation::ObservationSequence)> {
    let x1 = &observed[0];
    let game = build_driving(&scenario.config, x1, observed.len())?;
    let model = crate::observation::ObservationModel::full_state(&game, sigma2.max(0.0))
        .with_weighting(crate::observation::ObjectiveWeighting::Identity);
    let y = DMatrix::from_fn(observed.len(), x1.len(), |t, k| observed[t][k]);
    let obs = crate::observation::ObservationSequence::new(y, model, seed)?;
    Ok((transcribe(&game, &Default::default())?, obs))
}

/// One closed-loop run. Observations of the full joint state carry isotropic noise of
/// variance `sigma2`; the ego knows its own state exactly.
pub fn receding_horizon_run(
    scenario: &DrivingScenario,
    rh: &RecedingHorizonConfig,
    sigma2: f64,
    seed: u64,
) -> Result<SimulationLog> {
    rh.validate()?;
    let cfg = &scenario.config;
    if rh.ego != cfg.ego {
        return Err(Error::Parameter(format!(
            "run ego {} differs from scenario ego {}",
            rh.ego, cfg.ego
        )));
    }
    if scenario.script.horizon() < rh.total_steps {
        return Err(Error::Parameter(format!(
            "script covers {} stages, run needs {}",
            scenario.script.horizon(),
            rh.total_steps
        )));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::Parameter(format!(
            "noise variance must be non-negative, got {sigma2}"
        )));
    }
    let n = cfg.num_agents();
    let ego = cfg.ego;
    let model = DynamicsModel::bicycle(cfg.wheelbase);
    let goal = scenario.ego_goal();
    let sigma = sigma2.sqrt();

    let mut inference = rh.inference.clone();
    inference.frozen_gamma = (0..n).map(|i| i == ego).collect();
    let mut estimate = rh
        .initial_estimate
        .clone()
        .unwrap_or_else(|| scenario.prior());
    // the ego's own discount factor is known
    estimate.gamma[ego] = cfg.gamma[ego];

    let mut x = scenario.x1.clone();
    let mut observed: Vec<Vec<f64>> = Vec::with_capacity(rh.total_steps);
    // previous plan and the number of its controls already applied
    let mut plan: Option<(Trajectory, usize)> = None;
    let mut previous_plan: Option<Vec<f64>> = None;
    let mut previous_fit: Option<Vec<f64>> = None;
    let mut steps = Vec::with_capacity(rh.total_steps);

    for t in 0..rh.total_steps {
        let noise = standard_normals(&mut substream(seed, t as u64), x.len());
        let mut y: Vec<f64> = x.iter().zip(&noise).map(|(v, e)| v + sigma * e).collect();
        y[4 * ego..4 * ego + 4].copy_from_slice(&x[4 * ego..4 * ego + 4]);
        observed.push(y.clone());

        let start = observed.len().saturating_sub(rh.window);
        let status = if observed.len() - start < 2 {
            InferenceStatus::Skipped
        } else {
            let outcome = window_data(scenario, &observed[start..], sigma2, seed).and_then(
                |(problem, obs)| {
                    // a full window slides by one stage; a growing one changes shape
                    let init = match &previous_fit {
                        Some(v) if v.len() == problem.dim() => Some(problem.shifted_point(v)),
                        _ => None,
                    };
                    let run = |init: Option<&[f64]>| {
                        infer_with_problem(
                            &problem,
                            &obs,
                            &estimate.theta,
                            &estimate.gamma,
                            init,
                            &inference,
                        )
                    };
                    match init {
                        Some(v) => run(Some(&v)).or_else(|_| run(None)),
                        None => run(None),
                    }
                },
            );
            match outcome {
                Ok(r) if !r.aborted => {
                    estimate = r.params();
                    previous_fit = Some(r.solution.v);
                    if r.converged {
                        InferenceStatus::Converged
                    } else {
                        InferenceStatus::IterationCap
                    }
                }
                Ok(_) => {
                    previous_fit = None;
                    warn!("step {t}: inference aborted after repeated inner failures");
                    InferenceStatus::Failed
                }
                Err(e) => {
                    previous_fit = None;
                    warn!("step {t}: inference failed: {e}");
                    InferenceStatus::Failed
                }
            }
        };

        let planned = if status == InferenceStatus::Failed {
            None
        } else {
            let attempt = build_driving(cfg, &y, rh.plan_horizon).and_then(|game| {
                let problem = transcribe(&game, &Default::default())?;
                let warm = previous_plan.as_ref().map(|v| problem.shifted_point(v));
                let s = match warm.map(|v| solve_micp(&problem, &estimate, &v, &rh.planner)) {
                    Some(Ok(s)) => s,
                    _ => solve_micp(&problem, &estimate, &problem.initial_point(), &rh.planner)?,
                };
                Ok((problem.trajectory(&s.v), s.v))
            });
            match attempt {
                Ok((traj, v)) => {
                    previous_plan = Some(v);
                    Some(traj)
                }
                Err(e) => {
                    warn!("step {t}: planning failed: {e}");
                    None
                }
            }
        };
        let fallback = planned.is_none();
        let u_ego = match planned {
            Some(traj) => {
                let u = [traj.controls[ego][(0, 0)], traj.controls[ego][(0, 1)]];
                plan = Some((traj, 1));
                u
            }
            None => match plan.as_mut() {
                Some((traj, used)) if *used < traj.horizon() - 1 => {
                    let u = [
                        traj.controls[ego][(*used, 0)],
                        traj.controls[ego][(*used, 1)],
                    ];
                    *used += 1;
                    u
                }
                _ => [0.0, 0.0],
            },
        };

        let mut braking = Vec::new();
        let mut controls = Vec::with_capacity(n);
        for i in 0..n {
            if i == ego {
                controls.push(u_ego);
                continue;
            }
            let mut u = [
                scenario.script.controls[i][(t, 0)],
                scenario.script.controls[i][(t, 1)],
            ];
            if let Some(a) = rh
                .braking
                .as_ref()
                .and_then(|b| braking_command(&x, i, b, cfg.dt))
            {
                u[0] = u[0].min(a);
                braking.push(i);
            }
            controls.push(u);
        }

        let p_ego = position(&x, ego);
        let distances = (0..n)
            .map(|j| {
                if j == ego {
                    0.0
                } else {
                    distance(p_ego, position(&x, j))
                }
            })
            .collect();
        debug!("step {t}: gamma {:?}, control {u_ego:?}", estimate.gamma);
        steps.push(StepRecord {
            t,
            state: x.clone(),
            theta: estimate.theta.clone(),
            gamma: estimate.gamma.clone(),
            ego_control: u_ego,
            distances,
            goal_distance: distance(p_ego, goal),
            inference: status,
            fallback,
            braking,
        });

        if t + 1 < rh.total_steps {
            let mut next = Vec::with_capacity(x.len());
            for (i, u) in controls.iter().enumerate() {
                next.extend(model.step(&x[4 * i..4 * i + 4], u, cfg.dt)?);
            }
            x = next;
        }
    }
    Ok(SimulationLog {
        seed,
        sigma2,
        ego,
        d_min: cfg.d_min,
        steps,
    })
}

/// Independent runs, one per seed, in parallel; results keep the order of `seeds`.
pub fn receding_horizon_batch(
    scenario: &DrivingScenario,
    rh: &RecedingHorizonConfig,
    sigma2: f64,
    seeds: &[u64],
) -> Vec<Result<SimulationLog>> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&seed| receding_horizon_run(scenario, rh, sigma2, seed))
        .collect()
}
