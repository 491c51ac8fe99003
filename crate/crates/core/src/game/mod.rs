//! Discounted N-agent dynamic games: dimensions, objectives, constraints and trajectories.

pub mod constraint;
pub mod cost;
pub mod dynamics;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use constraint::{
    CircleSide, ConstraintBlock, ConstraintKind, ConstraintRow, CornerCircle, PlanarRow,
    RoadRegion, SigmoidWall,
};
pub use cost::{CostKind, CostTerm, LaneAxes, Param, StageDerivatives, StageLayout};
pub use dynamics::{DynamicsKind, DynamicsModel, VelocitySlot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameDimensions {
    pub num_agents: usize,
    /// Number of stages `T`; states and controls are indexed `0..T`.
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dims: Vec<usize>,
    /// Seconds per stage.
    pub dt: f64,
}

/// Exponential discounting `gamma^(t - time_origin)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscountSpec {
    pub gamma: f64,
    #[serde(default)]
    pub time_origin: i64,
}

impl DiscountSpec {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            time_origin: 0,
        }
    }
}

/// Weight of the cost incurred at time `t`; `0^0 = 1` at the origin stage.
pub fn discount_weight(t: i64, spec: &DiscountSpec, horizon: usize) -> Result<f64> {
    let hi = spec.time_origin + horizon as i64 - 1;
    if t < spec.time_origin || t > hi {
        return Err(Error::StageIndex {
            stage: t,
            lo: spec.time_origin,
            hi,
        });
    }
    if !(spec.gamma >= 0.0) {
        return Err(Error::Parameter(format!(
            "discount factor must be nonnegative, got {}",
            spec.gamma
        )));
    }
    Ok(stage_weight(spec.gamma, (t - spec.time_origin) as usize))
}

/// `gamma^k` with `0^0 = 1`.
pub fn stage_weight(gamma: f64, k: usize) -> f64 {
    gamma.powi(k as i32)
}

/// `d gamma^k / d gamma`.
pub fn stage_weight_derivative(gamma: f64, k: usize) -> f64 {
    if k == 0 {
        0.0
    } else {
        k as f64 * gamma.powi(k as i32 - 1)
    }
}

/// Smallest `t <= horizon` with `gamma^t < tol`, or `horizon` if the weights never drop that low.
pub fn effective_horizon(gamma: f64, tol: f64, horizon: usize) -> Result<usize> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Parameter(format!(
            "tolerance must lie in (0, 1), got {tol}"
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Parameter(format!(
            "discount factor must be nonnegative, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(1);
    }
    Ok((1..=horizon)
        .find(|&t| gamma.powi(t as i32) < tol)
        .unwrap_or(horizon))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObjective {
    pub terms: Vec<CostTerm>,
    pub discount: DiscountSpec,
}

/// Cost parameters θ and discount factors γ at which a game is instantiated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Params {
    pub fn new(theta: Vec<f64>, gamma: Vec<f64>) -> Self {
        Self { theta, gamma }
    }

    /// `[θ, γ]` stacked, the column order used by all parameter Jacobians.
    pub fn stacked(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.gamma).copied().collect()
    }

    pub fn from_stacked(values: &[f64], theta_dim: usize) -> Self {
        Self {
            theta: values[..theta_dim].to_vec(),
            gamma: values[theta_dim..].to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameDefinition {
    pub dims: GameDimensions,
    pub dynamics: Vec<DynamicsModel>,
    pub objectives: Vec<AgentObjective>,
    #[serde(default)]
    pub constraints: Vec<ConstraintBlock>,
    pub x1: Vec<f64>,
}

/// States `T x n` (row `t` is `x_t`, row 0 the initial state) and per-agent controls `T x m_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub controls: Vec<DMatrix<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.nrows()
    }

    /// Joint stage vector `[x_t, u_t^1, .., u_t^N]`.
    pub fn stage_vector(&self, t: usize) -> Vec<f64> {
        let mut s: Vec<f64> = self.states.row(t).iter().copied().collect();
        for u in &self.controls {
            s.extend(u.row(t).iter());
        }
        s
    }

    pub fn position(&self, agent_offset: usize, t: usize) -> [f64; 2] {
        [
            self.states[(t, agent_offset)],
            self.states[(t, agent_offset + 1)],
        ]
    }

    /// States flattened stage-major.
    pub fn flat_states(&self) -> Vec<f64> {
        self.states.transpose().iter().copied().collect()
    }

    /// `max_t |x_{t+1} - f(x_t, u_t)|_inf`.
    pub fn dynamics_residual(&self, game: &GameDefinition) -> f64 {
        let mut worst: f64 = 0.0;
        let offsets = game.state_offsets();
        for t in 0..self.horizon() - 1 {
            for (i, model) in game.dynamics.iter().enumerate() {
                let o = offsets[i];
                let x: Vec<f64> = (0..model.state_dim())
                    .map(|k| self.states[(t, o + k)])
                    .collect();
                let u: Vec<f64> = self.controls[i].row(t).iter().copied().collect();
                let next = model.step_unchecked(&x, &u, game.dims.dt);
                for (k, v) in next.iter().enumerate() {
                    worst = worst.max((self.states[(t + 1, o + k)] - v).abs());
                }
            }
        }
        worst
    }

    pub fn is_feasible(&self, game: &GameDefinition, tol: f64) -> bool {
        self.dynamics_residual(game) <= tol
    }
}

/// Residual vector and Jacobian of one constraint block along a whole trajectory.
///
/// Jacobian columns follow `[x_0 .. x_{T-1}, u^1, .., u^N, θ]`, each block stage-major.
#[derive(Clone, Debug)]
pub struct ConstraintEvaluation {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl GameDefinition {
    pub fn num_agents(&self) -> usize {
        self.dims.num_agents
    }

    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    pub fn state_offsets(&self) -> Vec<usize> {
        self.dynamics
            .iter()
            .scan(0, |acc, m| {
                let o = *acc;
                *acc += m.state_dim();
                Some(o)
            })
            .collect()
    }

    pub fn stage_layout(&self) -> StageLayout {
        let state_offsets = self.state_offsets();
        let n = self.dims.state_dim;
        let mut control_offsets = Vec::with_capacity(self.num_agents());
        let mut acc = n;
        for &m in &self.dims.control_dims {
            control_offsets.push(acc);
            acc += m;
        }
        StageLayout {
            state_dim: n,
            state_offsets,
            state_dims: self.dynamics.iter().map(|m| m.state_dim()).collect(),
            control_offsets,
            control_dims: self.dims.control_dims.clone(),
            velocity: self.dynamics.iter().map(|m| m.velocity_slot()).collect(),
        }
    }

    /// Length of θ: one past the largest learnable index.
    pub fn theta_dim(&self) -> usize {
        self.learnable_params()
            .iter()
            .map(|(k, _, _)| k + 1)
            .max()
            .unwrap_or(0)
    }

    /// `(θ index, owning agent, nominal value)` for every learnable parameter.
    pub fn learnable_params(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, obj) in self.objectives.iter().enumerate() {
            for term in &obj.terms {
                let params: Vec<&Param> = match &term.kind {
                    CostKind::GoalQuadratic { goal } => goal.iter().collect(),
                    CostKind::VelocityTracking { target } => vec![target],
                    _ => Vec::new(),
                };
                for p in params {
                    if let Some(k) = p.theta_index {
                        out.push((k, i, p.value));
                    }
                }
            }
        }
        out.sort_by_key(|(k, _, _)| *k);
        out
    }

    /// Number of θ entries owned by each agent.
    pub fn theta_dims_per_agent(&self) -> Vec<usize> {
        let mut dims = vec![0; self.num_agents()];
        for (_, owner, _) in self.learnable_params() {
            dims[owner] += 1;
        }
        dims
    }

    /// The parameters stored in the definition (ground truth for synthetic scenarios).
    pub fn nominal_params(&self) -> Params {
        let mut theta = vec![0.0; self.theta_dim()];
        for (k, _, v) in self.learnable_params() {
            theta[k] = v;
        }
        Params {
            theta,
            gamma: self.objectives.iter().map(|o| o.discount.gamma).collect(),
        }
    }

    /// Write `params` back into the definition as its nominal values.
    pub fn set_nominal_params(&mut self, params: &Params) {
        for (obj, &g) in self.objectives.iter_mut().zip(&params.gamma) {
            obj.discount.gamma = g;
            for term in &mut obj.terms {
                let slots: Vec<&mut Param> = match &mut term.kind {
                    CostKind::GoalQuadratic { goal } => goal.iter_mut().collect(),
                    CostKind::VelocityTracking { target } => vec![target],
                    _ => Vec::new(),
                };
                for p in slots {
                    if let Some(k) = p.theta_index {
                        p.value = params.theta[k];
                    }
                }
            }
        }
    }

    pub fn check_params(&self, params: &Params) -> Result<()> {
        if params.theta.len() != self.theta_dim() || params.gamma.len() != self.num_agents() {
            return Err(Error::Dimension(format!(
                "expected |θ| = {}, |γ| = {}; got {} and {}",
                self.theta_dim(),
                self.num_agents(),
                params.theta.len(),
                params.gamma.len()
            )));
        }
        if params
            .theta
            .iter()
            .chain(&params.gamma)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("parameters"));
        }
        if let Some(g) = params.gamma.iter().find(|g| **g < 0.0) {
            return Err(Error::Parameter(format!(
                "discount factor must be nonnegative, got {g}"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let bad = |msg: String| Err(Error::InvalidGame(msg));
        if d.num_agents < 1 || d.horizon < 2 || d.state_dim < 1 {
            return bad(format!(
                "need N >= 1, T >= 2, n >= 1; got {} / {} / {}",
                d.num_agents, d.horizon, d.state_dim
            ));
        }
        if !(d.dt > 0.0 && d.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", d.dt));
        }
        let n_agents = d.num_agents;
        if d.control_dims.len() != n_agents
            || self.dynamics.len() != n_agents
            || self.objectives.len() != n_agents
        {
            return bad(
                "control_dims, dynamics and objectives must each list one entry per agent".into(),
            );
        }
        if d.control_dims.iter().any(|&m| m < 1) {
            return bad("every control dimension must be positive".into());
        }
        let total_state: usize = self.dynamics.iter().map(|m| m.state_dim()).sum();
        if total_state != d.state_dim {
            return bad(format!(
                "state_dim {} differs from dynamics total {}",
                d.state_dim, total_state
            ));
        }
        for (i, m) in self.dynamics.iter().enumerate() {
            m.validate()?;
            if m.control_dim() != d.control_dims[i] {
                return bad(format!(
                    "agent {i}: control_dims entry differs from its dynamics model"
                ));
            }
        }
        if self.x1.len() != d.state_dim || self.x1.iter().any(|v| !v.is_finite()) {
            return bad(format!("x1 must hold {} finite values", d.state_dim));
        }

        let mut seen_theta = BTreeSet::new();
        for (i, obj) in self.objectives.iter().enumerate() {
            if !(obj.discount.gamma >= 0.0 && obj.discount.gamma.is_finite()) {
                return bad(format!(
                    "agent {i}: discount factor must be finite and nonnegative"
                ));
            }
            for term in &obj.terms {
                if !(term.weight >= 0.0 && term.weight.is_finite()) {
                    return bad(format!(
                        "agent {i}: cost weights must be finite and nonnegative"
                    ));
                }
                match &term.kind {
                    CostKind::CollisionHinge {
                        other,
                        d_min,
                        delta,
                        sharpness,
                    } => {
                        if *other >= n_agents || *other == i {
                            return bad(format!(
                                "agent {i}: collision term references agent {other}"
                            ));
                        }
                        if !(*delta > 1.0 && *d_min > 0.0 && *sharpness > 0.0) {
                            return bad(format!("agent {i}: collision term needs delta > 1, d_min > 0, sharpness > 0"));
                        }
                        let mirrored = self.objectives[*other].terms.iter().find_map(|t| match &t
                            .kind
                        {
                            CostKind::CollisionHinge {
                                other: o,
                                d_min,
                                delta,
                                ..
                            } if *o == i => Some((*d_min, *delta)),
                            _ => None,
                        });
                        if let Some((dm, dl)) = mirrored {
                            if dm != *d_min || dl != *delta {
                                return bad(format!("collision terms of agents {i} and {other} disagree on d_min/delta"));
                            }
                        }
                    }
                    CostKind::LaneCenterQuadratic { centerline, .. } => {
                        if centerline.len() < d.horizon {
                            return bad(format!(
                                "agent {i}: lane centerline needs at least {} samples",
                                d.horizon
                            ));
                        }
                    }
                    _ => {}
                }
                let params: Vec<&Param> = match &term.kind {
                    CostKind::GoalQuadratic { goal } => goal.iter().collect(),
                    CostKind::VelocityTracking { target } => vec![target],
                    _ => Vec::new(),
                };
                for p in params {
                    if !p.value.is_finite() {
                        return bad(format!("agent {i}: parameter values must be finite"));
                    }
                    if let Some(k) = p.theta_index {
                        if !seen_theta.insert(k) {
                            return bad(format!("θ index {k} is used by more than one parameter"));
                        }
                    }
                }
            }
        }
        if let Some(max) = seen_theta.iter().next_back() {
            if *max + 1 != seen_theta.len() {
                return bad("θ indices must be contiguous from 0".into());
            }
        }

        for (b, block) in self.constraints.iter().enumerate() {
            if block.owner >= n_agents {
                return bad(format!(
                    "constraint {b}: owner {} out of range",
                    block.owner
                ));
            }
            let model = &self.dynamics[block.owner];
            match &block.kind {
                ConstraintKind::DynamicsEquality => {
                    return Err(Error::DuplicateConstraint(format!(
                        "constraint {b}: dynamics equalities are implied by the dynamics models"
                    )));
                }
                ConstraintKind::CollisionSeparation {
                    other,
                    d_min,
                    delta,
                } => {
                    if *other >= n_agents || *other == block.owner {
                        return bad(format!(
                            "constraint {b}: collision references agent {other}"
                        ));
                    }
                    if !(*delta > 1.0 && *d_min > 0.0) {
                        return bad(format!(
                            "constraint {b}: collision needs delta > 1 and d_min > 0"
                        ));
                    }
                }
                ConstraintKind::ControlBox if model.control_bounds.is_none() => {
                    return bad(format!("constraint {b}: owner has no control bounds"));
                }
                ConstraintKind::VelocityBox if model.velocity_bounds.is_none() => {
                    return bad(format!("constraint {b}: owner has no velocity bounds"));
                }
                _ => {}
            }
            if self.constraints[..b].contains(block) {
                return Err(Error::DuplicateConstraint(format!(
                    "constraint {b} repeats an earlier block for agent {}",
                    block.owner
                )));
            }
        }
        Ok(())
    }

    /// Roll controls forward from `x1`; the result is dynamically feasible by construction.
    pub fn rollout(&self, controls: &[DMatrix<f64>]) -> Result<Trajectory> {
        let (t_len, n) = (self.horizon(), self.dims.state_dim);
        if controls.len() != self.num_agents()
            || controls
                .iter()
                .zip(&self.dims.control_dims)
                .any(|(u, &m)| u.nrows() != t_len || u.ncols() != m)
        {
            return Err(Error::Dimension(
                "rollout needs one T x m_i control matrix per agent".into(),
            ));
        }
        let offsets = self.state_offsets();
        let mut states = DMatrix::zeros(t_len, n);
        for k in 0..n {
            states[(0, k)] = self.x1[k];
        }
        for t in 0..t_len - 1 {
            for (i, model) in self.dynamics.iter().enumerate() {
                let o = offsets[i];
                let x: Vec<f64> = (0..model.state_dim()).map(|k| states[(t, o + k)]).collect();
                let u: Vec<f64> = controls[i].row(t).iter().copied().collect();
                let next = model.step(&x, &u, self.dims.dt)?;
                for (k, v) in next.iter().enumerate() {
                    states[(t + 1, o + k)] = *v;
                }
            }
        }
        Ok(Trajectory {
            states,
            controls: controls.to_vec(),
        })
    }

    pub fn zero_controls(&self) -> Vec<DMatrix<f64>> {
        self.dims
            .control_dims
            .iter()
            .map(|&m| DMatrix::zeros(self.horizon(), m))
            .collect()
    }

    fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        let ok = traj.states.nrows() == self.horizon()
            && traj.states.ncols() == self.dims.state_dim
            && traj.controls.len() == self.num_agents()
            && traj
                .controls
                .iter()
                .zip(&self.dims.control_dims)
                .all(|(u, &m)| u.nrows() == self.horizon() && u.ncols() == m);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(
                "trajectory shape does not match the game".into(),
            ))
        }
    }

    /// Undiscounted stage cost `C^i(x_t, u_t; θ)` with derivatives.
    pub fn agent_stage_cost(
        &self,
        layout: &StageLayout,
        agent: usize,
        stage: usize,
        s: &[f64],
        theta: &[f64],
        out: &mut StageDerivatives,
    ) {
        out.reset();
        for term in &self.objectives[agent].terms {
            term.accumulate(agent, layout, stage, s, theta, out);
        }
    }

    /// `J^i = sum_t gamma_i^(t - origin) C^i(x_t, u_t; θ)`.
    pub fn agent_total_cost(
        &self,
        traj: &Trajectory,
        agent: usize,
        params: &Params,
    ) -> Result<f64> {
        self.check_trajectory(traj)?;
        self.check_params(params)?;
        if agent >= self.num_agents() {
            return Err(Error::Parameter(format!("agent {agent} out of range")));
        }
        let layout = self.stage_layout();
        let mut d = StageDerivatives::zeros(layout.dim(), params.theta.len());
        let mut total = 0.0;
        for t in 0..self.horizon() {
            self.agent_stage_cost(
                &layout,
                agent,
                t,
                &traj.stage_vector(t),
                &params.theta,
                &mut d,
            );
            total += stage_weight(params.gamma[agent], t) * d.value;
        }
        Ok(total)
    }

    /// Residual and Jacobian of one block along `traj`.
    pub fn constraint_eval(
        &self,
        block: &ConstraintBlock,
        traj: &Trajectory,
        theta: &[f64],
    ) -> Result<ConstraintEvaluation> {
        self.check_trajectory(traj)?;
        let (t_len, n) = (self.horizon(), self.dims.state_dim);
        let layout = self.stage_layout();
        let control_cols: Vec<usize> = self
            .dims
            .control_dims
            .iter()
            .scan(t_len * n, |acc, &m| {
                let o = *acc;
                *acc += t_len * m;
                Some(o)
            })
            .collect();
        let ncols = t_len * n
            + self
                .dims
                .control_dims
                .iter()
                .map(|m| t_len * m)
                .sum::<usize>()
            + theta.len();
        // stage-local index -> trajectory column
        let column = |t: usize, b: usize| -> usize {
            if b < n {
                t * n + b
            } else {
                let agent = (0..self.num_agents())
                    .rev()
                    .find(|&j| layout.control_offsets[j] <= b)
                    .unwrap();
                control_cols[agent]
                    + t * layout.control_dims[agent]
                    + (b - layout.control_offsets[agent])
            }
        };

        let mut values = Vec::new();
        let mut jac_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        match &block.kind {
            ConstraintKind::DynamicsEquality => {
                let offsets = self.state_offsets();
                for t in 0..t_len - 1 {
                    for (i, model) in self.dynamics.iter().enumerate() {
                        let o = offsets[i];
                        let x: Vec<f64> = (0..4).map(|k| traj.states[(t, o + k)]).collect();
                        let u: Vec<f64> = traj.controls[i].row(t).iter().copied().collect();
                        let next = model.step_unchecked(&x, &u, self.dims.dt);
                        let (a, b) = model.jacobians_unchecked(&x, &u, self.dims.dt);
                        for k in 0..4 {
                            values.push(traj.states[(t + 1, o + k)] - next[k]);
                            let mut row = vec![((t + 1) * n + o + k, 1.0)];
                            for c in 0..4 {
                                row.push((t * n + o + c, -a[(k, c)]));
                            }
                            for c in 0..2 {
                                row.push((column(t, layout.control_offsets[i] + c), -b[(k, c)]));
                            }
                            jac_rows.push(row);
                        }
                    }
                }
            }
            _ => {
                let model = &self.dynamics[block.owner];
                let mut rows = Vec::new();
                for t in (0..t_len).filter(|&t| block.applies_at(t)) {
                    rows.clear();
                    block.stage_rows(&layout, model, &traj.stage_vector(t), &mut rows);
                    for r in &rows {
                        values.push(r.value);
                        jac_rows.push(r.grad.iter().map(|&(b, g)| (column(t, b), g)).collect());
                    }
                }
            }
        }
        let mut jacobian = DMatrix::zeros(values.len(), ncols);
        for (r, row) in jac_rows.into_iter().enumerate() {
            for (c, g) in row {
                jacobian[(r, c)] += g;
            }
        }
        Ok(ConstraintEvaluation {
            residual: DVector::from_vec(values),
            jacobian,
        })
    }
}
