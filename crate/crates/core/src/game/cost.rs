//! Stage cost terms and their exact first and second derivatives.
//!
//! Every term is evaluated on the joint stage vector `s_t = [x_t, u_t^1, .., u_t^N]`
//! laid out by [`StageLayout`]. Derivatives are accumulated into a dense
//! [`StageDerivatives`] buffer; the vectors are small (tens of entries).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dynamics::VelocitySlot;

/// Default softplus sharpness used to smooth the collision hinge.
pub const DEFAULT_HINGE_SHARPNESS: f64 = 50.0;

/// Offset used to keep the double-integrator speed differentiable at rest.
const SPEED_EPS: f64 = 1e-3;

/// A scalar cost parameter, optionally bound to an entry of the global θ vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_index: Option<usize>,
}

impl Param {
    pub fn fixed(value: f64) -> Self {
        Self {
            value,
            theta_index: None,
        }
    }

    pub fn learnable(value: f64, index: usize) -> Self {
        Self {
            value,
            theta_index: Some(index),
        }
    }

    pub fn resolve(&self, theta: &[f64]) -> f64 {
        match self.theta_index {
            Some(k) => theta[k],
            None => self.value,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneAxes {
    #[default]
    Both,
    /// Only the x coordinate is tracked (straight road segments aligned with y).
    XOnly,
    /// Only the y coordinate is tracked (segments aligned with x).
    YOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CostKind {
    GoalQuadratic {
        goal: [Param; 2],
    },
    ControlQuadratic,
    /// `max(0, delta * d_min - |p_i - p_other|^2)`, smoothed by a softplus of the given sharpness.
    CollisionHinge {
        other: usize,
        d_min: f64,
        delta: f64,
        #[serde(default = "default_sharpness")]
        sharpness: f64,
    },
    /// Tracks `centerline[t]` at stage `t`.
    LaneCenterQuadratic {
        centerline: Vec<[f64; 2]>,
        #[serde(default)]
        axes: LaneAxes,
    },
    VelocityTracking {
        target: Param,
    },
}

fn default_sharpness() -> f64 {
    DEFAULT_HINGE_SHARPNESS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTerm {
    pub weight: f64,
    #[serde(flatten)]
    pub kind: CostKind,
}

/// Index map of the joint stage vector.
#[derive(Clone, Debug)]
pub struct StageLayout {
    pub state_dim: usize,
    pub state_offsets: Vec<usize>,
    pub state_dims: Vec<usize>,
    /// Absolute offsets of each agent's controls inside the stage vector.
    pub control_offsets: Vec<usize>,
    pub control_dims: Vec<usize>,
    pub velocity: Vec<VelocitySlot>,
}

impl StageLayout {
    pub fn dim(&self) -> usize {
        self.state_dim + self.control_dims.iter().sum::<usize>()
    }

    pub fn num_agents(&self) -> usize {
        self.state_offsets.len()
    }

    pub fn position(&self, agent: usize) -> (usize, usize) {
        let o = self.state_offsets[agent];
        (o, o + 1)
    }
}

/// Value, gradient, Hessian and parameter cross-derivatives of a stage function.
#[derive(Clone, Debug)]
pub struct StageDerivatives {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    /// `d grad / d theta`, one column per θ entry.
    pub dgrad_dtheta: DMatrix<f64>,
}

impl StageDerivatives {
    pub fn zeros(dim: usize, theta_dim: usize) -> Self {
        Self {
            value: 0.0,
            grad: DVector::zeros(dim),
            hess: DMatrix::zeros(dim, dim),
            dgrad_dtheta: DMatrix::zeros(dim, theta_dim),
        }
    }

    pub fn reset(&mut self) {
        self.value = 0.0;
        self.grad.fill(0.0);
        self.hess.fill(0.0);
        self.dgrad_dtheta.fill(0.0);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(1/k) log(1 + exp(k s))`, evaluated without overflow.
pub fn softplus(s: f64, sharpness: f64) -> f64 {
    let ks = sharpness * s;
    if ks > 0.0 {
        s + (-ks).exp().ln_1p() / sharpness
    } else {
        ks.exp().ln_1p() / sharpness
    }
}

impl CostTerm {
    pub fn goal(weight: f64, goal: [Param; 2]) -> Self {
        Self {
            weight,
            kind: CostKind::GoalQuadratic { goal },
        }
    }

    pub fn control(weight: f64) -> Self {
        Self {
            weight,
            kind: CostKind::ControlQuadratic,
        }
    }

    pub fn collision(weight: f64, other: usize, d_min: f64, delta: f64) -> Self {
        Self {
            weight,
            kind: CostKind::CollisionHinge {
                other,
                d_min,
                delta,
                sharpness: DEFAULT_HINGE_SHARPNESS,
            },
        }
    }

    /// θ indices this term reads.
    pub fn theta_indices(&self) -> Vec<usize> {
        match &self.kind {
            CostKind::GoalQuadratic { goal } => goal.iter().filter_map(|p| p.theta_index).collect(),
            CostKind::VelocityTracking { target } => target.theta_index.into_iter().collect(),
            _ => Vec::new(),
        }
    }

    /// Unsmoothed value; identical to the smooth value except for the collision hinge.
    pub fn reference_value(
        &self,
        agent: usize,
        layout: &StageLayout,
        stage: usize,
        s: &[f64],
        theta: &[f64],
    ) -> f64 {
        match &self.kind {
            CostKind::CollisionHinge {
                other,
                d_min,
                delta,
                ..
            } => {
                let gap = delta * d_min - squared_distance(layout, agent, *other, s);
                self.weight * gap.max(0.0)
            }
            _ => {
                let mut d = StageDerivatives::zeros(layout.dim(), theta.len());
                self.accumulate(agent, layout, stage, s, theta, &mut d);
                d.value
            }
        }
    }

    /// Evaluate this term alone.
    pub fn evaluate(
        &self,
        agent: usize,
        layout: &StageLayout,
        stage: usize,
        s: &[f64],
        theta: &[f64],
    ) -> StageDerivatives {
        let mut d = StageDerivatives::zeros(layout.dim(), theta.len());
        self.accumulate(agent, layout, stage, s, theta, &mut d);
        d
    }

    /// Add this term's contribution for `agent` at `stage` into `out`.
    pub fn accumulate(
        &self,
        agent: usize,
        layout: &StageLayout,
        stage: usize,
        s: &[f64],
        theta: &[f64],
        out: &mut StageDerivatives,
    ) {
        let w = self.weight;
        let (px, py) = layout.position(agent);
        match &self.kind {
            CostKind::GoalQuadratic { goal } => {
                for (idx, param) in [px, py].into_iter().zip(goal) {
                    let r = s[idx] - param.resolve(theta);
                    out.value += w * r * r;
                    out.grad[idx] += 2.0 * w * r;
                    out.hess[(idx, idx)] += 2.0 * w;
                    if let Some(k) = param.theta_index {
                        out.dgrad_dtheta[(idx, k)] -= 2.0 * w;
                    }
                }
            }
            CostKind::ControlQuadratic => {
                let o = layout.control_offsets[agent];
                for idx in o..o + layout.control_dims[agent] {
                    out.value += w * s[idx] * s[idx];
                    out.grad[idx] += 2.0 * w * s[idx];
                    out.hess[(idx, idx)] += 2.0 * w;
                }
            }
            CostKind::CollisionHinge {
                other,
                d_min,
                delta,
                sharpness,
            } => {
                let (qx, qy) = layout.position(*other);
                let diff = [s[px] - s[qx], s[py] - s[qy]];
                let gap = delta * d_min - (diff[0] * diff[0] + diff[1] * diff[1]);
                let sig = sigmoid(sharpness * gap);
                let d1 = w * sig;
                let d2 = w * sharpness * sig * (1.0 - sig);
                out.value += w * softplus(gap, *sharpness);
                // d gap / d p_i = -2 diff, d gap / d p_other = +2 diff
                let idx = [px, py, qx, qy];
                let dgap = [-2.0 * diff[0], -2.0 * diff[1], 2.0 * diff[0], 2.0 * diff[1]];
                for a in 0..4 {
                    out.grad[idx[a]] += d1 * dgap[a];
                    for b in 0..4 {
                        out.hess[(idx[a], idx[b])] += d2 * dgap[a] * dgap[b];
                    }
                }
                for k in 0..2 {
                    let (i, j) = (idx[k], idx[k + 2]);
                    out.hess[(i, i)] -= 2.0 * d1;
                    out.hess[(j, j)] -= 2.0 * d1;
                    out.hess[(i, j)] += 2.0 * d1;
                    out.hess[(j, i)] += 2.0 * d1;
                }
            }
            CostKind::LaneCenterQuadratic { centerline, axes } => {
                let Some(c) = centerline.get(stage.min(centerline.len().saturating_sub(1))) else {
                    return;
                };
                let tracked: &[(usize, f64)] = match axes {
                    LaneAxes::Both => &[(px, c[0]), (py, c[1])],
                    LaneAxes::XOnly => &[(px, c[0])],
                    LaneAxes::YOnly => &[(py, c[1])],
                };
                for &(idx, target) in tracked {
                    let r = s[idx] - target;
                    out.value += w * r * r;
                    out.grad[idx] += 2.0 * w * r;
                    out.hess[(idx, idx)] += 2.0 * w;
                }
            }
            CostKind::VelocityTracking { target } => {
                let v_ref = target.resolve(theta);
                let o = layout.state_offsets[agent];
                match layout.velocity[agent] {
                    VelocitySlot::Speed { v } => {
                        let idx = o + v;
                        let r = s[idx] - v_ref;
                        out.value += w * r * r;
                        out.grad[idx] += 2.0 * w * r;
                        out.hess[(idx, idx)] += 2.0 * w;
                        if let Some(k) = target.theta_index {
                            out.dgrad_dtheta[(idx, k)] -= 2.0 * w;
                        }
                    }
                    VelocitySlot::Cartesian { vx, vy } => {
                        let idx = [o + vx, o + vy];
                        let vel = [s[idx[0]], s[idx[1]]];
                        let speed =
                            (vel[0] * vel[0] + vel[1] * vel[1] + SPEED_EPS * SPEED_EPS).sqrt();
                        let ds = [vel[0] / speed, vel[1] / speed];
                        let r = speed - v_ref;
                        out.value += w * r * r;
                        for a in 0..2 {
                            out.grad[idx[a]] += 2.0 * w * r * ds[a];
                            for b in 0..2 {
                                let kron = if a == b { 1.0 } else { 0.0 };
                                let d2s = (kron - ds[a] * ds[b]) / speed;
                                out.hess[(idx[a], idx[b])] += 2.0 * w * (ds[a] * ds[b] + r * d2s);
                            }
                            if let Some(k) = target.theta_index {
                                out.dgrad_dtheta[(idx[a], k)] -= 2.0 * w * ds[a];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn squared_distance(layout: &StageLayout, i: usize, j: usize, s: &[f64]) -> f64 {
    let (ax, ay) = layout.position(i);
    let (bx, by) = layout.position(j);
    let (dx, dy) = (s[ax] - s[bx], s[ay] - s[by]);
    dx * dx + dy * dy
}
