//! Per-agent discrete-time dynamics, integrated with explicit Euler.

use nalgebra::{Matrix4, Matrix4x2, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every supported model has a 4-dimensional state and a 2-dimensional control.
pub const AGENT_STATE_DIM: usize = 4;
pub const AGENT_CONTROL_DIM: usize = 2;

pub type StateJacobian = Matrix4<f64>;
pub type ControlJacobian = Matrix4x2<f64>;
/// Hessian over the stacked agent vector `[x (4), u (2)]`.
pub type StageHessian = SMatrix<f64, 6, 6>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DynamicsKind {
    /// State `[px, py, vx, vy]`, control `[ax, ay]`.
    DoubleIntegrator2D,
    /// State `[px, py, v, psi]`, control `[a, phi]` (acceleration, steering angle).
    KinematicBicycle { wheelbase: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    #[serde(flatten)]
    pub kind: DynamicsKind,
    /// Per control dimension `[lo, hi]`; enforced only through a `ControlBox` constraint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_bounds: Option<[[f64; 2]; AGENT_CONTROL_DIM]>,
    /// `[[vx_lo, vx_hi], [vy_lo, vy_hi]]`, double integrator only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_bounds: Option<[[f64; 2]; 2]>,
}

/// Where an agent's velocity lives inside its own state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VelocitySlot {
    Cartesian { vx: usize, vy: usize },
    Speed { v: usize },
}

impl DynamicsModel {
    pub fn double_integrator() -> Self {
        Self {
            kind: DynamicsKind::DoubleIntegrator2D,
            control_bounds: None,
            velocity_bounds: None,
        }
    }

    pub fn bicycle(wheelbase: f64) -> Self {
        Self {
            kind: DynamicsKind::KinematicBicycle { wheelbase },
            control_bounds: None,
            velocity_bounds: None,
        }
    }

    pub fn with_control_bounds(mut self, bounds: [[f64; 2]; AGENT_CONTROL_DIM]) -> Self {
        self.control_bounds = Some(bounds);
        self
    }

    pub fn with_velocity_bounds(mut self, bounds: [[f64; 2]; 2]) -> Self {
        self.velocity_bounds = Some(bounds);
        self
    }

    pub fn state_dim(&self) -> usize {
        AGENT_STATE_DIM
    }

    pub fn control_dim(&self) -> usize {
        AGENT_CONTROL_DIM
    }

    pub fn velocity_slot(&self) -> VelocitySlot {
        match self.kind {
            DynamicsKind::DoubleIntegrator2D => VelocitySlot::Cartesian { vx: 2, vy: 3 },
            DynamicsKind::KinematicBicycle { .. } => VelocitySlot::Speed { v: 2 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DynamicsKind::KinematicBicycle { wheelbase } = self.kind {
            if !(wheelbase > 0.0 && wheelbase.is_finite()) {
                return Err(Error::InvalidGame(format!(
                    "bicycle wheelbase must be positive, got {wheelbase}"
                )));
            }
        }
        let boxes = self
            .control_bounds
            .iter()
            .flatten()
            .chain(self.velocity_bounds.iter().flatten());
        for [lo, hi] in boxes {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::InvalidGame(format!("invalid box [{lo}, {hi}]")));
            }
        }
        if self.velocity_bounds.is_some() && !matches!(self.kind, DynamicsKind::DoubleIntegrator2D)
        {
            return Err(Error::InvalidGame(
                "velocity bounds are only defined for the double integrator".into(),
            ));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != AGENT_STATE_DIM || u.len() != AGENT_CONTROL_DIM {
            return Err(Error::Dimension(format!(
                "dynamics expects state 4 / control 2, got {} / {}",
                x.len(),
                u.len()
            )));
        }
        if x.iter().chain(u).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dynamics_step"));
        }
        Ok(())
    }

    /// One explicit-Euler step. Bounds are not applied here.
    pub fn step(&self, x: &[f64], u: &[f64], dt: f64) -> Result<[f64; AGENT_STATE_DIM]> {
        self.check_inputs(x, u)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Parameter(format!(
                "time step must be positive, got {dt}"
            )));
        }
        Ok(self.step_unchecked(x, u, dt))
    }

    pub(crate) fn step_unchecked(&self, x: &[f64], u: &[f64], dt: f64) -> [f64; AGENT_STATE_DIM] {
        match self.kind {
            DynamicsKind::DoubleIntegrator2D => [
                x[0] + dt * x[2],
                x[1] + dt * x[3],
                x[2] + dt * u[0],
                x[3] + dt * u[1],
            ],
            DynamicsKind::KinematicBicycle { wheelbase } => {
                let (v, psi) = (x[2], x[3]);
                [
                    x[0] + dt * v * psi.cos(),
                    x[1] + dt * v * psi.sin(),
                    v + dt * u[0],
                    psi + dt * v * u[1].tan() / wheelbase,
                ]
            }
        }
    }

    /// Analytic `(df/dx, df/du)` of the Euler update.
    pub fn jacobians(
        &self,
        x: &[f64],
        u: &[f64],
        dt: f64,
    ) -> Result<(StateJacobian, ControlJacobian)> {
        self.check_inputs(x, u)?;
        Ok(self.jacobians_unchecked(x, u, dt))
    }

    pub(crate) fn jacobians_unchecked(
        &self,
        x: &[f64],
        u: &[f64],
        dt: f64,
    ) -> (StateJacobian, ControlJacobian) {
        let mut a = StateJacobian::identity();
        let mut b = ControlJacobian::zeros();
        match self.kind {
            DynamicsKind::DoubleIntegrator2D => {
                a[(0, 2)] = dt;
                a[(1, 3)] = dt;
                b[(2, 0)] = dt;
                b[(3, 1)] = dt;
            }
            DynamicsKind::KinematicBicycle { wheelbase } => {
                let (v, psi, phi) = (x[2], x[3], u[1]);
                let (s, c) = psi.sin_cos();
                let tan_phi = phi.tan();
                let sec2 = 1.0 + tan_phi * tan_phi;
                a[(0, 2)] = dt * c;
                a[(0, 3)] = -dt * v * s;
                a[(1, 2)] = dt * s;
                a[(1, 3)] = dt * v * c;
                a[(3, 2)] = dt * tan_phi / wheelbase;
                b[(2, 0)] = dt;
                b[(3, 1)] = dt * v * sec2 / wheelbase;
            }
        }
        (a, b)
    }

    /// Hessian of `weights . f(x, u)` with respect to the stacked `[x, u]`.
    pub fn weighted_hessian(&self, x: &[f64], u: &[f64], dt: f64, weights: &[f64]) -> StageHessian {
        let mut h = StageHessian::zeros();
        if let DynamicsKind::KinematicBicycle { wheelbase } = self.kind {
            let (v, psi, phi) = (x[2], x[3], u[1]);
            let (s, c) = psi.sin_cos();
            let tan_phi = phi.tan();
            let sec2 = 1.0 + tan_phi * tan_phi;
            // f0 = px + dt v cos(psi), f1 = py + dt v sin(psi), f3 = psi + dt v tan(phi)/l
            let (w0, w1, w3) = (weights[0], weights[1], weights[3]);
            let v_psi = dt * (-w0 * s + w1 * c);
            let psi_psi = dt * v * (-w0 * c - w1 * s);
            let v_phi = w3 * dt * sec2 / wheelbase;
            let phi_phi = w3 * dt * v * 2.0 * sec2 * tan_phi / wheelbase;
            h[(2, 3)] = v_psi;
            h[(3, 2)] = v_psi;
            h[(3, 3)] = psi_psi;
            h[(2, 5)] = v_phi;
            h[(5, 2)] = v_phi;
            h[(5, 5)] = phi_phi;
        }
        h
    }
}
