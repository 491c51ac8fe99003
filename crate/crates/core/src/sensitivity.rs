//! Derivatives of equilibrium solutions with respect to `(θ, γ)` by the implicit
//! function theorem on the active rows, and the chain rule into the inverse objective.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::Params;
use crate::linalg::{pinv_solve, BandedLu};
use crate::micp::MicpSystem;
use crate::observation::ObservationSequence;
use crate::solver::MicpSolution;
use crate::transcription::MicpProblem;

pub const DEFAULT_ACTIVATION_TOLERANCE: f64 = 1e-7;

/// Pivot threshold of the reduced factorization (rows are equilibrated).
const SENSITIVITY_PIVOT_TOLERANCE: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSetPartition {
    /// Rows of `F` kept in the reduced system: every `c` row and the active `h` rows.
    pub active: Vec<usize>,
    /// Rows of `F` (absolute indices) of strictly inactive inequalities.
    pub inactive: Vec<usize>,
    pub act_tol: f64,
    /// No row has both `h_j` and `z_j` below the tolerance.
    pub strict: bool,
    /// Number of weakly active rows (assigned to `active`).
    pub weakly_active: usize,
}

#[derive(Clone, Debug)]
pub struct SensitivityResult {
    /// `dv / d(θ, γ)`, `dim v × (|θ| + N)`.
    pub dv_dparams: DMatrix<f64>,
    /// Pivot-ratio estimate of the reduced Jacobian (infinite after a pseudoinverse fallback).
    pub reduced_condition_estimate: f64,
    pub strict_complementarity: bool,
    /// The reduced system was singular and a least-squares solve was used.
    pub used_pseudoinverse: bool,
}

pub fn partition_active(solution: &MicpSolution, act_tol: f64) -> ActiveSetPartition {
    let r = solution.layout.eta_r;
    let z = solution.z();
    let mut active: Vec<usize> = (0..r).collect();
    let mut inactive = Vec::new();
    let mut weakly_active = 0;
    for (j, &h) in solution.h.iter().enumerate() {
        if h > act_tol {
            inactive.push(r + j);
        } else {
            if z[j] <= act_tol {
                weakly_active += 1;
            }
            active.push(r + j);
        }
    }
    ActiveSetPartition {
        active,
        inactive,
        act_tol,
        strict: weakly_active == 0,
        weakly_active,
    }
}

/// Reduced Jacobian solve. Errors with `SensitivityFailure` when the reduced system is singular.
pub fn solution_sensitivity<S: MicpSystem + ?Sized>(
    problem: &S,
    solution: &MicpSolution,
    partition: &ActiveSetPartition,
    params: &Params,
) -> Result<SensitivityResult> {
    sensitivity_impl(problem, solution, partition, params, false)
}

/// As [`solution_sensitivity`], but falls back to a pseudoinverse solve (with a warning)
/// when the reduced system is singular.
pub fn solution_sensitivity_robust<S: MicpSystem + ?Sized>(
    problem: &S,
    solution: &MicpSolution,
    partition: &ActiveSetPartition,
    params: &Params,
) -> Result<SensitivityResult> {
    sensitivity_impl(problem, solution, partition, params, true)
}

fn sensitivity_impl<S: MicpSystem + ?Sized>(
    problem: &S,
    solution: &MicpSolution,
    partition: &ActiveSetPartition,
    params: &Params,
    allow_pinv: bool,
) -> Result<SensitivityResult> {
    if solution.layout != *problem.layout() {
        return Err(Error::LayoutMismatch(
            "solution does not belong to this problem".into(),
        ));
    }
    let dim = problem.dim();
    problem.check_params(params)?;
    if solution.v.len() != dim {
        return Err(Error::Dimension(
            "solution does not match the system".into(),
        ));
    }
    let e = problem.evaluate_at(&solution.v, params, true, true);
    let jac = e.jac.unwrap();
    let pjac = e.param_jac.unwrap();
    let p = problem.param_dim();

    // Variables paired with inactive rows are the inactive multipliers themselves.
    let mut keep = vec![true; dim];
    for &j in &partition.inactive {
        keep[j] = false;
    }
    let (row_order, col_order) = problem.factor_order();
    let rows: Vec<usize> = row_order.iter().copied().filter(|&r| keep[r]).collect();
    let cols: Vec<usize> = col_order.iter().copied().filter(|&c| keep[c]).collect();
    let reduced = jac.select(&rows, &cols);
    let mut rhs = DMatrix::zeros(rows.len(), p);
    for (k, &r) in rows.iter().enumerate() {
        for c in 0..p {
            rhs[(k, c)] = -pjac[(r, c)];
        }
    }
    let identity: Vec<usize> = (0..rows.len()).collect();
    let (solved, condition, used_pinv) = match BandedLu::factor(
        &reduced,
        &identity,
        &identity,
        0.0,
        SENSITIVITY_PIVOT_TOLERANCE,
    ) {
        Ok(lu) => (lu.solve_matrix(&rhs), lu.condition_estimate(), false),
        Err(s) if allow_pinv => {
            warn!(
                "reduced Jacobian singular at pivot {} ({:e}); using pseudoinverse",
                s.position, s.pivot
            );
            (pinv_solve(&reduced.to_dense(), &rhs), f64::INFINITY, true)
        }
        Err(s) => {
            return Err(Error::SensitivityFailure(format!(
                "reduced Jacobian singular at pivot {} (|pivot| = {:e})",
                s.position, s.pivot
            )))
        }
    };
    let mut dv = DMatrix::zeros(dim, p);
    for (k, &c) in cols.iter().enumerate() {
        dv.row_mut(c).copy_from(&solved.row(k));
    }
    Ok(SensitivityResult {
        dv_dparams: dv,
        reduced_condition_estimate: condition,
        strict_complementarity: partition.strict,
        used_pseudoinverse: used_pinv,
    })
}

/// `P = Σ_t (h(x_t) - y_t)ᵀ W_t (h(x_t) - y_t)` over the observed stages.
pub fn inverse_objective(states: &DMatrix<f64>, observations: &ObservationSequence) -> Result<f64> {
    observations.objective(states)
}

/// `∇_{(θ,γ)} P = (dv/dp)ᵀ (∂x/∂v)ᵀ ∇_x P`.
pub fn inverse_gradient(
    problem: &MicpProblem,
    solution: &MicpSolution,
    sensitivity: &SensitivityResult,
    observations: &ObservationSequence,
) -> Result<DVector<f64>> {
    let states = problem.trajectory(&solution.v).states;
    let grad_x = observations.objective_gradient(&states)?;
    let n = states.ncols();
    let xs = problem.state_indices();
    let mut out = DVector::zeros(problem.param_dim());
    // stage 0 is fixed data and carries no sensitivity
    for (k, vi) in xs.enumerate() {
        let (t, c) = (k / n + 1, k % n);
        let g = grad_x[(t, c)];
        if g != 0.0 {
            for p in 0..out.len() {
                out[p] += sensitivity.dv_dparams[(vi, p)] * g;
            }
        }
    }
    Ok(out)
}

/// Diagonal of the Gauss-Newton curvature `2 Jᵀ W J` of `P`, with `J = ∂h(x)/∂(θ, γ)`.
pub fn objective_curvature_diagonal(
    problem: &MicpProblem,
    sensitivity: &SensitivityResult,
    observations: &ObservationSequence,
) -> DVector<f64> {
    objective_curvature(problem, sensitivity, observations).diagonal()
}

/// Gauss-Newton curvature `2 Σ_t J_tᵀ W J_t` of the inverse objective in `(θ, γ)`.
pub fn objective_curvature(
    problem: &MicpProblem,
    sensitivity: &SensitivityResult,
    observations: &ObservationSequence,
) -> DMatrix<f64> {
    let n = problem.game().dims.state_dim;
    let xs: Vec<usize> = problem.state_indices().collect();
    let idx = &observations.model.indices;
    let w = observations.weight();
    let p = problem.param_dim();
    let mut out = DMatrix::zeros(p, p);
    for t in 1..observations.len() {
        let j = DMatrix::from_fn(idx.len(), p, |r, c| {
            sensitivity.dv_dparams[(xs[(t - 1) * n + idx[r]], c)]
        });
        out += 2.0 * j.transpose() * (w * &j);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_solution(h: Vec<f64>, z: Vec<f64>) -> MicpSolution {
        use crate::transcription::{Span, VariableLayout};
        let eta_z = h.len();
        MicpSolution {
            v: z,
            converged: true,
            residual: 0.0,
            iterations: 0,
            active_set: vec![],
            h,
            layout: VariableLayout {
                x: Span::default(),
                u: vec![],
                mu: vec![],
                lambda: vec![Span {
                    start: 0,
                    len: eta_z,
                }],
                eta_r: 0,
                eta_z,
            },
            trace: vec![],
        }
    }

    #[test]
    fn partition_examples() {
        let s = fake_solution(vec![0.0, 3.0, 0.0], vec![0.5, 0.0, 0.0]);
        let p = partition_active(&s, 1e-7);
        assert_eq!(p.active, vec![0, 2]);
        assert_eq!(p.inactive, vec![1]);
        assert!(!p.strict);
        assert_eq!(p.weakly_active, 1);
        let none = partition_active(&fake_solution(vec![], vec![]), 1e-7);
        assert!(none.active.is_empty() && none.inactive.is_empty() && none.strict);
    }
}
