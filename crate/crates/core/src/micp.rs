//! The system interface the Newton solver and the sensitivity analysis work on.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::game::Params;
use crate::linalg::SparseMatrix;
use crate::transcription::{Evaluation, MicpProblem, Span, VariableLayout};

/// Parametric MiCP in `v = (r, z)`: `c(v; p) = 0` on the first `η_r` rows and
/// `0 <= z ⊥ h(v; p) >= 0` on the remaining rows, row `η_r + j` paired with `z_j`.
pub trait MicpSystem {
    fn layout(&self) -> &VariableLayout;
    fn param_dim(&self) -> usize;
    fn check_params(&self, params: &Params) -> Result<()>;
    /// `F`, and optionally `∇_v F` and `∂F/∂p`, at a point of the right size.
    fn evaluate_at(
        &self,
        v: &[f64],
        params: &Params,
        want_jac: bool,
        want_param_jac: bool,
    ) -> Evaluation;
    /// Row and column orders used for factorization.
    fn factor_order(&self) -> (&[usize], &[usize]);

    fn dim(&self) -> usize {
        self.layout().dim()
    }

    fn eta_r(&self) -> usize {
        self.layout().eta_r
    }
}

/// `max(|c|∞, max_j |min(z_j, h_j)|)`.
pub fn kkt_residual_of(eta_r: usize, v: &[f64], f: &[f64]) -> f64 {
    let c = f[..eta_r].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    (eta_r..f.len()).fold(c, |m, j| m.max(v[j].min(f[j]).abs()))
}

impl MicpSystem for MicpProblem {
    fn layout(&self) -> &VariableLayout {
        MicpProblem::layout(self)
    }

    fn param_dim(&self) -> usize {
        MicpProblem::param_dim(self)
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        self.game().check_params(params)
    }

    fn evaluate_at(
        &self,
        v: &[f64],
        params: &Params,
        want_jac: bool,
        want_param_jac: bool,
    ) -> Evaluation {
        self.evaluate_unchecked(v, params, want_jac, want_param_jac)
    }

    fn factor_order(&self) -> (&[usize], &[usize]) {
        self.banded_order()
    }
}

/// `v ↦ (F, ∇_v F, ∂F/∂p)` with dense Jacobians.
pub type MicpFunction =
    dyn Fn(&[f64], &Params) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) + Send + Sync;

/// A small MiCP given directly by its residual map.
pub struct ExplicitMicp {
    layout: VariableLayout,
    param_dim: usize,
    order: Vec<usize>,
    func: Box<MicpFunction>,
}

impl ExplicitMicp {
    pub fn new(eta_r: usize, eta_z: usize, param_dim: usize, func: Box<MicpFunction>) -> Self {
        let layout = VariableLayout {
            x: Span::default(),
            u: vec![],
            mu: vec![],
            lambda: vec![Span {
                start: eta_r,
                len: eta_z,
            }],
            eta_r,
            eta_z,
        };
        Self {
            layout,
            param_dim,
            order: (0..eta_r + eta_z).collect(),
            func,
        }
    }
}

impl MicpSystem for ExplicitMicp {
    fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.dim() != self.param_dim {
            return Err(Error::Dimension(format!(
                "{} parameters given, system takes {}",
                params.dim(),
                self.param_dim
            )));
        }
        Ok(())
    }

    fn evaluate_at(
        &self,
        v: &[f64],
        params: &Params,
        want_jac: bool,
        want_param_jac: bool,
    ) -> Evaluation {
        let (f, jac, pjac) = (self.func)(v, params);
        let jac = want_jac.then(|| {
            let mut m = SparseMatrix::new(jac.nrows(), jac.ncols());
            for c in 0..jac.ncols() {
                for r in 0..jac.nrows() {
                    m.push(r, c, jac[(r, c)]);
                }
            }
            m
        });
        Evaluation {
            f,
            jac,
            param_jac: want_param_jac.then_some(pjac),
        }
    }

    fn factor_order(&self) -> (&[usize], &[usize]) {
        (&self.order, &self.order)
    }
}
