//! Constraint blocks. Inequalities are written `g(x, u) >= 0`.

use serde::{Deserialize, Serialize};

use super::cost::{sigmoid, squared_distance, StageLayout};
use super::dynamics::{DynamicsModel, VelocitySlot};

/// Distances below this are clamped in circle rows.
const CIRCLE_CENTER_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CircleSide {
    /// Legal points lie outside the circle (a rounded building corner).
    Outside,
    /// Legal points lie inside the circle (the outer edge of a turn).
    Inside,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerCircle {
    pub center: [f64; 2],
    pub radius: f64,
    pub side: CircleSide,
}

/// Smooth half-plane `sigmoid(k (n . p - b)) - 1/2 >= 0`, i.e. `n . p >= b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidWall {
    pub normal: [f64; 2],
    pub offset: f64,
    pub sharpness: f64,
}

/// Drivable or walkable area of one agent, as an intersection of smooth rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadRegion {
    #[serde(default)]
    pub circles: Vec<CornerCircle>,
    #[serde(default)]
    pub walls: Vec<SigmoidWall>,
}

/// Value, gradient and Hessian of one region row with respect to a position.
#[derive(Clone, Copy, Debug)]
pub struct PlanarRow {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

impl RoadRegion {
    pub fn num_rows(&self) -> usize {
        self.circles.len() + self.walls.len()
    }

    pub fn rows_at(&self, p: [f64; 2]) -> Vec<PlanarRow> {
        let mut rows = Vec::with_capacity(self.num_rows());
        for c in &self.circles {
            let d = [p[0] - c.center[0], p[1] - c.center[1]];
            let sign = match c.side {
                CircleSide::Outside => 1.0,
                CircleSide::Inside => -1.0,
            };
            // signed distance to the circle; the center itself is never a legal point
            let r = (d[0] * d[0] + d[1] * d[1]).sqrt().max(CIRCLE_CENTER_GUARD);
            let n = [d[0] / r, d[1] / r];
            let k = sign / r;
            rows.push(PlanarRow {
                value: sign * (r - c.radius),
                grad: [sign * n[0], sign * n[1]],
                hess: [
                    [k * (1.0 - n[0] * n[0]), -k * n[0] * n[1]],
                    [-k * n[0] * n[1], k * (1.0 - n[1] * n[1])],
                ],
            });
        }
        for w in &self.walls {
            let n = w.normal;
            let sig = sigmoid(w.sharpness * (n[0] * p[0] + n[1] * p[1] - w.offset));
            let d1 = w.sharpness * sig * (1.0 - sig);
            let d2 = w.sharpness * w.sharpness * sig * (1.0 - sig) * (1.0 - 2.0 * sig);
            rows.push(PlanarRow {
                value: sig - 0.5,
                grad: [d1 * n[0], d1 * n[1]],
                hess: [
                    [d2 * n[0] * n[0], d2 * n[0] * n[1]],
                    [d2 * n[1] * n[0], d2 * n[1] * n[1]],
                ],
            });
        }
        rows
    }

    /// Smallest row value; nonnegative exactly on legal points.
    pub fn margin(&self, p: [f64; 2]) -> f64 {
        self.rows_at(p)
            .iter()
            .map(|r| r.value)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ConstraintKind {
    /// `x_{t+1} - f(x_t, u_t) = 0`; implied by the dynamics models.
    DynamicsEquality,
    /// `|p_owner - p_other|^2 - delta * d_min >= 0` at every stage.
    CollisionSeparation {
        other: usize,
        d_min: f64,
        delta: f64,
    },
    /// Reads `control_bounds` of the owner's dynamics model.
    ControlBox,
    /// Reads `velocity_bounds` of the owner's dynamics model.
    VelocityBox,
    RoadRegion {
        region: RoadRegion,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBlock {
    pub owner: usize,
    #[serde(flatten)]
    pub kind: ConstraintKind,
}

/// One inequality row at one stage, with sparse derivatives over the stage vector.
#[derive(Clone, Debug, Default)]
pub struct ConstraintRow {
    pub value: f64,
    pub grad: Vec<(usize, f64)>,
    pub hess: Vec<(usize, usize, f64)>,
}

impl ConstraintBlock {
    pub fn new(owner: usize, kind: ConstraintKind) -> Self {
        Self { owner, kind }
    }

    pub fn is_equality(&self) -> bool {
        matches!(self.kind, ConstraintKind::DynamicsEquality)
    }

    /// Whether the block reads the state; state rows are skipped at the fixed initial stage.
    pub fn depends_on_state(&self) -> bool {
        !matches!(self.kind, ConstraintKind::ControlBox)
    }

    pub fn applies_at(&self, stage: usize) -> bool {
        stage > 0 || !self.depends_on_state()
    }

    /// Inequality rows produced at each stage where the block applies.
    pub fn rows_per_stage(&self, model: &DynamicsModel) -> usize {
        let finite = |b: &[f64; 2]| b.iter().filter(|v| v.is_finite()).count();
        match &self.kind {
            ConstraintKind::DynamicsEquality => 0,
            ConstraintKind::CollisionSeparation { .. } => 1,
            ConstraintKind::ControlBox => model.control_bounds.iter().flatten().map(finite).sum(),
            ConstraintKind::VelocityBox => model.velocity_bounds.iter().flatten().map(finite).sum(),
            ConstraintKind::RoadRegion { region } => region.num_rows(),
        }
    }

    /// Append this block's rows at one stage.
    pub fn stage_rows(
        &self,
        layout: &StageLayout,
        model: &DynamicsModel,
        s: &[f64],
        out: &mut Vec<ConstraintRow>,
    ) {
        let i = self.owner;
        let box_rows = |out: &mut Vec<ConstraintRow>, idx: usize, b: &[f64; 2]| {
            if b[0].is_finite() {
                out.push(ConstraintRow {
                    value: s[idx] - b[0],
                    grad: vec![(idx, 1.0)],
                    hess: Vec::new(),
                });
            }
            if b[1].is_finite() {
                out.push(ConstraintRow {
                    value: b[1] - s[idx],
                    grad: vec![(idx, -1.0)],
                    hess: Vec::new(),
                });
            }
        };
        match &self.kind {
            ConstraintKind::DynamicsEquality => {}
            ConstraintKind::CollisionSeparation {
                other,
                d_min,
                delta,
            } => {
                let (px, py) = layout.position(i);
                let (qx, qy) = layout.position(*other);
                let (dx, dy) = (s[px] - s[qx], s[py] - s[qy]);
                let idx = [px, py, qx, qy];
                let mut hess = Vec::with_capacity(8);
                for k in 0..2 {
                    let (a, b) = (idx[k], idx[k + 2]);
                    hess.extend([(a, a, 2.0), (b, b, 2.0), (a, b, -2.0), (b, a, -2.0)]);
                }
                out.push(ConstraintRow {
                    value: squared_distance(layout, i, *other, s) - delta * d_min,
                    grad: vec![
                        (px, 2.0 * dx),
                        (py, 2.0 * dy),
                        (qx, -2.0 * dx),
                        (qy, -2.0 * dy),
                    ],
                    hess,
                });
            }
            ConstraintKind::ControlBox => {
                if let Some(bounds) = &model.control_bounds {
                    let o = layout.control_offsets[i];
                    for (k, b) in bounds.iter().enumerate() {
                        box_rows(out, o + k, b);
                    }
                }
            }
            ConstraintKind::VelocityBox => {
                if let (Some(bounds), VelocitySlot::Cartesian { vx, vy }) =
                    (&model.velocity_bounds, layout.velocity[i])
                {
                    let o = layout.state_offsets[i];
                    box_rows(out, o + vx, &bounds[0]);
                    box_rows(out, o + vy, &bounds[1]);
                }
            }
            ConstraintKind::RoadRegion { region } => {
                let (px, py) = layout.position(i);
                for row in region.rows_at([s[px], s[py]]) {
                    let idx = [px, py];
                    let mut hess = Vec::with_capacity(4);
                    for a in 0..2 {
                        for b in 0..2 {
                            if row.hess[a][b] != 0.0 {
                                hess.push((idx[a], idx[b], row.hess[a][b]));
                            }
                        }
                    }
                    out.push(ConstraintRow {
                        value: row.value,
                        grad: vec![(px, row.grad[0]), (py, row.grad[1])],
                        hess,
                    });
                }
            }
        }
    }
}
