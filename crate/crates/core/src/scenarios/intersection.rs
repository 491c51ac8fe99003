//! Four-agent intersection built from recorded trajectories: two pedestrians and two cars.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    AgentObjective, CircleSide, ConstraintBlock, ConstraintKind, CornerCircle, CostKind, CostTerm,
    DiscountSpec, DynamicsKind, DynamicsModel, GameDefinition, GameDimensions, LaneAxes, Param,
    Params, RoadRegion, SigmoidWall, Trajectory,
};

use crate::solver::{solve_micp, MicpSolution, SolverConfig};
use crate::transcription::{transcribe, MicpProblem, TranscriptionOptions};

use super::lane::{fit_lane_centerline, LaneCenterline};

pub const TRAJECTORY_COLUMNS: [&str; 7] = [
    "frame",
    "agent_id",
    "x_m",
    "y_m",
    "vx_mps",
    "vy_mps",
    "heading_rad",
];
pub const LANE_COLUMNS: [&str; 3] = ["agent_id", "x_m", "y_m"];

pub const BUNDLED_TRAJECTORIES: &str = include_str!("../../fixtures/intersection_trajectories.csv");
pub const BUNDLED_LANES: &str = include_str!("../../fixtures/intersection_lanes.csv");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: usize,
    pub agent_id: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
}

fn ingestion(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Ingestion {
        row,
        column: column.into(),
        message: message.into(),
    }
}

/// Reads CSV rows as finite numbers. `row` in errors is the 1-based line number.
fn read_numeric<R: Read>(reader: R, columns: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| ingestion(1, "", e.to_string()))?
        .clone();
    for (k, want) in columns.iter().enumerate() {
        match header.get(k) {
            Some(h) if h == *want => {}
            Some(h) => {
                return Err(ingestion(
                    1,
                    want,
                    format!("expected header `{want}`, found `{h}`"),
                ))
            }
            None => return Err(ingestion(1, want, "missing column")),
        }
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| ingestion(line, "", e.to_string()))?;
        if rec.len() != columns.len() {
            return Err(ingestion(
                line,
                "",
                format!("expected {} fields, found {}", columns.len(), rec.len()),
            ));
        }
        let mut vals = Vec::with_capacity(columns.len());
        for (c, name) in columns.iter().enumerate() {
            let field = &rec[c];
            let v: f64 = field
                .parse()
                .map_err(|_| ingestion(line, name, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(ingestion(line, name, "value is not finite"));
            }
            vals.push(v);
        }
        out.push((line, vals));
    }
    Ok(out)
}

fn index_field(line: usize, column: &str, v: f64) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(ingestion(
            line,
            column,
            format!("{v} is not a nonnegative integer"),
        ));
    }
    Ok(v as usize)
}

/// Per-agent tracks keyed by agent id, each sorted by frame. Every agent must cover
/// the same contiguous frame range.
pub fn read_trajectories<R: Read>(reader: R) -> Result<BTreeMap<usize, Vec<TrackPoint>>> {
    let rows = read_numeric(reader, &TRAJECTORY_COLUMNS)?;
    if rows.is_empty() {
        return Err(ingestion(2, "", "no data rows"));
    }
    let mut tracks: BTreeMap<usize, Vec<TrackPoint>> = BTreeMap::new();
    let mut lines: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (line, v) in rows {
        let frame = index_field(line, "frame", v[0])?;
        let agent_id = index_field(line, "agent_id", v[1])?;
        if let Some(prev) = lines.insert((agent_id, frame), line) {
            return Err(ingestion(
                line,
                "frame",
                format!("agent {agent_id} frame {frame} already given on line {prev}"),
            ));
        }
        tracks.entry(agent_id).or_default().push(TrackPoint {
            frame,
            agent_id,
            x: v[2],
            y: v[3],
            vx: v[4],
            vy: v[5],
            heading: v[6],
        });
    }
    let mut range = None;
    for (id, track) in tracks.iter_mut() {
        track.sort_by_key(|p| p.frame);
        let (first, last) = (track[0].frame, track[track.len() - 1].frame);
        for (k, p) in track.iter().enumerate() {
            if p.frame != first + k {
                return Err(ingestion(
                    lines[&(*id, p.frame)],
                    "frame",
                    format!("agent {id} skips frame {}", first + k),
                ));
            }
        }
        match range {
            None => range = Some((first, last)),
            Some(r) if r != (first, last) => {
                return Err(ingestion(
                    lines[&(*id, first)],
                    "frame",
                    format!(
                        "agent {id} covers frames {first}..={last}, others {}..={}",
                        r.0, r.1
                    ),
                ))
            }
            _ => {}
        }
    }
    Ok(tracks)
}

pub fn read_lane_points<R: Read>(reader: R) -> Result<BTreeMap<usize, Vec<[f64; 2]>>> {
    let mut lanes: BTreeMap<usize, Vec<[f64; 2]>> = BTreeMap::new();
    for (line, v) in read_numeric(reader, &LANE_COLUMNS)? {
        let id = index_field(line, "agent_id", v[0])?;
        lanes.entry(id).or_default().push([v[1], v[2]]);
    }
    Ok(lanes)
}

/// Number of stages kept from a recording spanning `frame_intervals` intervals.
pub fn downsampled_stages(frame_intervals: usize, factor: usize) -> usize {
    frame_intervals / factor + 1
}

/// Keeps frames `first, first + factor, ...` up to the last recorded frame.
pub fn downsample(track: &[TrackPoint], factor: usize) -> Vec<TrackPoint> {
    track.iter().step_by(factor.max(1)).copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    Pedestrian,
    Car,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntersectionConfig {
    pub frame_rate: f64,
    pub downsample_factor: usize,
    /// Indexed by position in the sorted agent ids.
    pub kinds: Vec<AgentKind>,
    pub gamma: Vec<f64>,
    pub regions: Vec<RoadRegion>,
    pub w_goal: f64,
    pub w_ctrl: f64,
    pub w_lane: f64,
    pub d_min: f64,
    pub delta: f64,
    pub wheelbase: f64,
    pub lane_degree: usize,
    pub pedestrian_control_limit: f64,
    pub pedestrian_velocity_limit: f64,
    /// `[lo, hi]` longitudinal acceleration.
    pub car_acceleration: [f64; 2],
    pub car_steering_limit: f64,
}

fn wall(normal: [f64; 2], offset: f64) -> SigmoidWall {
    SigmoidWall {
        normal,
        offset,
        sharpness: 2.0,
    }
}

fn corner(center: [f64; 2]) -> CornerCircle {
    CornerCircle {
        center,
        radius: 4.0,
        side: CircleSide::Outside,
    }
}

impl Default for IntersectionConfig {
    /// Matches the bundled fixture: pedestrians 0 and 1 on the east crosswalk, car 2 turning
    /// right from the northbound lane, car 3 going straight behind it.
    fn default() -> Self {
        let crosswalk = RoadRegion {
            circles: vec![corner([8.0, -8.0]), corner([8.0, 8.0])],
            walls: vec![wall([1.0, 0.0], 12.0), wall([-1.0, 0.0], -15.5)],
        };
        let turning = RoadRegion {
            circles: vec![corner([8.0, -8.0])],
            walls: vec![wall([1.0, 0.0], 0.0), wall([0.0, -1.0], 0.0)],
        };
        let straight = RoadRegion {
            circles: vec![corner([8.0, -8.0]), corner([8.0, 8.0])],
            walls: vec![wall([1.0, 0.0], 0.0), wall([-1.0, 0.0], -4.0)],
        };
        Self {
            frame_rate: 25.0,
            downsample_factor: 6,
            kinds: vec![
                AgentKind::Pedestrian,
                AgentKind::Pedestrian,
                AgentKind::Car,
                AgentKind::Car,
            ],
            gamma: vec![0.9, 0.8, 0.85, 0.95],
            regions: vec![crosswalk.clone(), crosswalk, turning, straight],
            w_goal: 0.1,
            w_ctrl: 0.1,
            w_lane: 1.0,
            d_min: 1.0,
            delta: 1.2,
            wheelbase: 2.7,
            lane_degree: 5,
            pedestrian_control_limit: 3.0,
            pedestrian_velocity_limit: 2.5,
            car_acceleration: [-5.0, 3.0],
            car_steering_limit: 0.6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IntersectionScenario {
    pub game: GameDefinition,
    /// θ = goal positions, two entries per agent in agent order.
    pub truth: Params,
    pub agent_ids: Vec<usize>,
    /// Downsampled recording, `[agent][stage]`.
    pub reference: Vec<Vec<TrackPoint>>,
    /// Fitted centerlines of the cars, `None` for pedestrians.
    pub lanes: Vec<Option<LaneCenterline>>,
}

pub fn build_intersection<R1: Read, R2: Read>(
    trajectories: R1,
    lane_points: R2,
    config: &IntersectionConfig,
) -> Result<IntersectionScenario> {
    let tracks = read_trajectories(trajectories)?;
    let lanes = read_lane_points(lane_points)?;
    let c = config;
    let n_agents = tracks.len();
    let per_agent = |len: usize, what: &str| {
        if len != n_agents {
            Err(Error::Parameter(format!(
                "config lists {len} {what} for {n_agents} recorded agents"
            )))
        } else {
            Ok(())
        }
    };
    per_agent(c.kinds.len(), "agent kinds")?;
    per_agent(c.gamma.len(), "discount factors")?;
    per_agent(c.regions.len(), "road regions")?;
    if c.downsample_factor == 0 || !(c.frame_rate > 0.0) {
        return Err(Error::Parameter(
            "downsample factor and frame rate must be positive".into(),
        ));
    }

    let agent_ids: Vec<usize> = tracks.keys().copied().collect();
    let sampled: Vec<Vec<TrackPoint>> = tracks
        .values()
        .map(|t| downsample(t, c.downsample_factor))
        .collect();
    let horizon = sampled[0].len();
    let dt = c.downsample_factor as f64 / c.frame_rate;

    let mut dynamics = Vec::new();
    let mut objectives = Vec::new();
    let mut constraints = Vec::new();
    let mut x1 = Vec::new();
    let mut theta = Vec::new();
    let mut fitted = Vec::new();
    for (i, (&id, track)) in agent_ids.iter().zip(&sampled).enumerate() {
        let (start, end) = (track[0], track[horizon - 1]);
        let goal = [
            Param::learnable(end.x, 2 * i),
            Param::learnable(end.y, 2 * i + 1),
        ];
        theta.extend([end.x, end.y]);
        let mut terms = vec![CostTerm::goal(c.w_goal, goal), CostTerm::control(c.w_ctrl)];
        match c.kinds[i] {
            AgentKind::Pedestrian => {
                let (a, v) = (c.pedestrian_control_limit, c.pedestrian_velocity_limit);
                dynamics.push(
                    DynamicsModel::double_integrator()
                        .with_control_bounds([[-a, a], [-a, a]])
                        .with_velocity_bounds([[-v, v], [-v, v]]),
                );
                constraints.push(ConstraintBlock::new(i, ConstraintKind::VelocityBox));
                x1.extend([start.x, start.y, start.vx, start.vy]);
                fitted.push(None);
            }
            AgentKind::Car => {
                let s = c.car_steering_limit;
                dynamics.push(
                    DynamicsModel::bicycle(c.wheelbase)
                        .with_control_bounds([c.car_acceleration, [-s, s]]),
                );
                let speed = start.vx * start.heading.cos() + start.vy * start.heading.sin();
                x1.extend([start.x, start.y, speed, start.heading]);
                let points = lanes
                    .get(&id)
                    .ok_or_else(|| Error::Parameter(format!("no lane points for car {id}")))?;
                let lane =
                    fit_lane_centerline(points, c.lane_degree.min(points.len() - 1), horizon)?;
                terms.push(CostTerm {
                    weight: c.w_lane,
                    kind: CostKind::LaneCenterQuadratic {
                        centerline: lane.samples.clone(),
                        axes: LaneAxes::Both,
                    },
                });
                fitted.push(Some(lane));
            }
        }
        objectives.push(AgentObjective {
            terms,
            discount: DiscountSpec::new(c.gamma[i]),
        });
        constraints.push(ConstraintBlock::new(i, ConstraintKind::ControlBox));
        constraints.push(ConstraintBlock::new(
            i,
            ConstraintKind::RoadRegion {
                region: c.regions[i].clone(),
            },
        ));
        for other in (0..n_agents).filter(|&j| j != i) {
            constraints.push(ConstraintBlock::new(
                i,
                ConstraintKind::CollisionSeparation {
                    other,
                    d_min: c.d_min,
                    delta: c.delta,
                },
            ));
        }
    }
    let state_dim = dynamics.iter().map(|m| m.state_dim()).sum();
    let control_dims = dynamics.iter().map(|m| m.control_dim()).collect();
    let game = GameDefinition {
        dims: GameDimensions {
            num_agents: n_agents,
            horizon,
            state_dim,
            control_dims,
            dt,
        },
        dynamics,
        objectives,
        constraints,
        x1,
    };
    game.validate()?;
    Ok(IntersectionScenario {
        game,
        truth: Params::new(theta, c.gamma.clone()),
        agent_ids,
        reference: sampled,
        lanes: fitted,
    })
}

impl IntersectionScenario {
    /// Controls that make each model follow the recorded speeds and headings.
    pub fn reference_controls(&self) -> Vec<DMatrix<f64>> {
        let t_len = self.game.horizon();
        let dt = self.game.dims.dt;
        self.reference
            .iter()
            .zip(&self.game.dynamics)
            .map(|(track, model)| {
                let mut u = DMatrix::zeros(t_len, 2);
                for t in 0..t_len - 1 {
                    let (a, b) = (track[t], track[t + 1]);
                    match model.kind {
                        DynamicsKind::DoubleIntegrator2D => {
                            u[(t, 0)] = (b.vx - a.vx) / dt;
                            u[(t, 1)] = (b.vy - a.vy) / dt;
                        }
                        DynamicsKind::KinematicBicycle { wheelbase } => {
                            let speed =
                                |p: TrackPoint| p.vx * p.heading.cos() + p.vy * p.heading.sin();
                            let v = speed(a);
                            u[(t, 0)] = (speed(b) - v) / dt;
                            let turn = (b.heading - a.heading + PI).rem_euclid(2.0 * PI) - PI;
                            if v.abs() > 1e-6 {
                                u[(t, 1)] = (wheelbase * turn / (dt * v)).atan();
                            }
                        }
                    }
                }
                if let Some(bounds) = model.control_bounds {
                    for t in 0..t_len {
                        for k in 0..2 {
                            u[(t, k)] = u[(t, k)].clamp(bounds[k][0], bounds[k][1]);
                        }
                    }
                }
                u
            })
            .collect()
    }

    /// Rollout of [`Self::reference_controls`]; a dynamically feasible solver start.
    pub fn reference_rollout(&self) -> Result<Trajectory> {
        self.game.rollout(&self.reference_controls())
    }

    /// Solver start for `problem` (a transcription of `self.game`): the equilibrium of the game
    /// without separation rows, with every inequality multiplier at zero. Falls back to the
    /// reference rollout when that relaxed solve fails.
    ///
    /// Starting separation multipliers at one, as the generic start does, adds `-2 z I` per row
    /// to each agent's Lagrangian Hessian and sends Newton uphill on this game.
    pub fn initial_point(
        &self,
        problem: &MicpProblem,
        params: &Params,
        config: &SolverConfig,
    ) -> Result<Vec<f64>> {
        let reference = self.reference_rollout()?;
        let mut relaxed = self.game.clone();
        relaxed
            .constraints
            .retain(|b| !matches!(b.kind, ConstraintKind::CollisionSeparation { .. }));
        let rp = transcribe(&relaxed, problem.options())?;
        let start = rp.point_from_trajectory(&reference, 1.0);
        match solve_micp(&rp, params, &start, config) {
            Ok(sol) => {
                let mut v = problem.point_from_trajectory(&rp.trajectory(&sol.v), 0.0);
                for (to, from) in problem.layout().mu.iter().zip(&rp.layout().mu) {
                    v[to.range()].copy_from_slice(&sol.v[from.range()]);
                }
                Ok(v)
            }
            Err(e) => {
                warn!(
                    "relaxed intersection solve failed ({e}); starting from the reference rollout"
                );
                Ok(problem.point_from_trajectory(&reference, 0.0))
            }
        }
    }

    /// Forward equilibrium at `params`.
    pub fn solve(
        &self,
        params: &Params,
        options: &TranscriptionOptions,
        config: &SolverConfig,
    ) -> Result<(MicpProblem, MicpSolution)> {
        let problem = transcribe(&self.game, options)?;
        let v0 = self.initial_point(&problem, params, config)?;
        let sol = solve_micp(&problem, params, &v0, config)?;
        Ok((problem, sol))
    }
}

pub fn build_intersection_from_files(
    trajectories: &Path,
    lane_points: &Path,
    config: &IntersectionConfig,
) -> Result<IntersectionScenario> {
    build_intersection(
        std::fs::File::open(trajectories)?,
        std::fs::File::open(lane_points)?,
        config,
    )
}

/// The synthetic fixture shipped with the crate.
pub fn build_bundled_intersection(config: &IntersectionConfig) -> Result<IntersectionScenario> {
    build_intersection(
        BUNDLED_TRAJECTORIES.as_bytes(),
        BUNDLED_LANES.as_bytes(),
        config,
    )
}
