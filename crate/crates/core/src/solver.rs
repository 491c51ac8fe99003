//! Damped semismooth Newton on the Fischer–Burmeister reformulation of the MiCP.
//!
//! Solves `Φ(v) = [c(v); φ(z_j, h_j(v))] = 0`. Newton systems are factored with the
//! banded LU in stage-major order; the shift `ρ` escalates by ×10 when a pivot vanishes.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Params;
use crate::linalg::{BandedLu, SparseMatrix};
use crate::micp::{kkt_residual_of, MicpSystem};
use crate::transcription::VariableLayout;

/// Pivots below this (after row equilibration) count as a failed factorization.
const PIVOT_TOLERANCE: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub residual_tolerance: f64,
    pub armijo_factor: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    /// First shift tried when the Newton matrix is singular.
    pub regularization_floor: f64,
    pub regularization_max: f64,
    /// `ε` in `φ(a, b) = a + b - sqrt(a² + b² + ε²)`.
    pub fb_smoothing: f64,
    /// Drive `ε` to zero by ×0.1 steps, finishing with an unsmoothed phase.
    pub homotopy: bool,
    /// `h_j` at or below this marks row `j` as active in the reported active set.
    pub activation_tolerance: f64,
    /// Armijo tests compare against the largest merit of this many recent iterates (1 is monotone).
    pub nonmonotone_memory: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            residual_tolerance: 1e-8,
            armijo_factor: 1e-4,
            backtrack_ratio: 0.5,
            max_backtracks: 40,
            regularization_floor: 1e-10,
            regularization_max: 1e-2,
            fb_smoothing: 0.0,
            homotopy: false,
            activation_tolerance: 1e-7,
            nonmonotone_memory: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.residual_tolerance,
            self.armijo_factor,
            self.regularization_floor,
            self.regularization_max,
            self.activation_tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0)
            || self.armijo_factor >= 1.0
            || self.fb_smoothing < 0.0
            || self.max_iterations == 0
            || self.nonmonotone_memory == 0
        {
            return Err(Error::Parameter(format!(
                "invalid solver configuration {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// `|Φ|_inf` before the step.
    pub residual: f64,
    pub step_length: f64,
    pub regularization: f64,
}

#[derive(Clone, Debug)]
pub struct MicpSolution {
    pub v: Vec<f64>,
    pub converged: bool,
    /// `kkt_residual` at `v`.
    pub residual: f64,
    pub iterations: usize,
    /// Inequality rows (0-based within `h`) with `h_j <= activation_tolerance`.
    pub active_set: Vec<usize>,
    /// `h(v)` at the solution.
    pub h: Vec<f64>,
    pub layout: VariableLayout,
    pub trace: Vec<TraceRow>,
}

impl MicpSolution {
    pub fn z(&self) -> &[f64] {
        &self.v[self.layout.eta_r..]
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "iteration,residual,step_length,regularization")?;
        for r in &self.trace {
            writeln!(
                w,
                "{},{:e},{:e},{:e}",
                r.iteration, r.residual, r.step_length, r.regularization
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `a + b - sqrt(a² + b² + ε²)`.
pub fn fischer_burmeister(a: f64, b: f64) -> f64 {
    fischer_burmeister_smoothed(a, b, 0.0)
}

pub fn fischer_burmeister_smoothed(a: f64, b: f64, eps: f64) -> f64 {
    a + b - a.hypot(b).hypot(eps)
}

/// `(∂φ/∂a, ∂φ/∂b)`; both 1 at the origin when `ε = 0`.
pub fn fischer_burmeister_gradient(a: f64, b: f64, eps: f64) -> (f64, f64) {
    let r = a.hypot(b).hypot(eps);
    if r == 0.0 {
        (1.0, 1.0)
    } else {
        (1.0 - a / r, 1.0 - b / r)
    }
}

/// Previous solution as a starting point, with `z` clamped to be nonnegative.
pub fn warm_start<S: MicpSystem + ?Sized>(
    previous: &MicpSolution,
    problem: &S,
) -> Result<Vec<f64>> {
    if previous.layout != *problem.layout() {
        return Err(Error::LayoutMismatch(
            "warm start from a differently shaped problem".into(),
        ));
    }
    let mut v = previous.v.clone();
    for z in &mut v[previous.layout.eta_r..] {
        if *z < 0.0 {
            *z = 0.0;
        }
    }
    Ok(v)
}

struct Merit {
    phi: Vec<f64>,
    f: Vec<f64>,
    value: f64,
    inf_norm: f64,
}

fn merit<S: MicpSystem + ?Sized>(problem: &S, v: &[f64], f: Vec<f64>, eps: f64) -> Merit {
    let r = problem.eta_r();
    let mut phi = f.clone();
    for j in r..phi.len() {
        phi[j] = fischer_burmeister_smoothed(v[j], f[j], eps);
    }
    let value = 0.5 * phi.iter().map(|x| x * x).sum::<f64>();
    let inf_norm = phi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Merit {
        phi,
        f,
        value,
        inf_norm,
    }
}

/// Newton matrix of `Φ`: `∇c` rows as-is, complementarity rows `∂φ/∂a e_j + ∂φ/∂b ∇h_j`.
fn newton_matrix<S: MicpSystem + ?Sized>(
    problem: &S,
    v: &[f64],
    f: &[f64],
    jac: SparseMatrix,
    eps: f64,
) -> SparseMatrix {
    let r = problem.eta_r();
    let dim = problem.dim();
    let grads: Vec<(f64, f64)> = (r..dim)
        .map(|j| fischer_burmeister_gradient(v[j], f[j], eps))
        .collect();
    let mut out = SparseMatrix::new(dim, dim);
    out.entries.reserve(jac.entries.len() + dim);
    for (row, col, val) in jac.entries {
        if row < r {
            out.push(row, col, val);
        } else {
            out.push(row, col, grads[row - r].1 * val);
        }
    }
    for j in r..dim {
        out.push(j, j, grads[j - r].0);
    }
    out
}

/// Factor with escalating diagonal shifts. Returns the factors and the shift used.
pub(crate) fn factor_regularized(
    matrix: &SparseMatrix,
    row_order: &[usize],
    col_order: &[usize],
    floor: f64,
    max: f64,
) -> Option<(BandedLu, f64)> {
    let mut rho = 0.0;
    loop {
        match BandedLu::factor(matrix, row_order, col_order, rho, PIVOT_TOLERANCE) {
            Ok(lu) => return Some((lu, rho)),
            Err(s) => {
                debug!(
                    "newton matrix singular at pivot {} ({:e}), shift {rho:e}",
                    s.position, s.pivot
                );
                rho = if rho == 0.0 { floor } else { rho * 10.0 };
                if rho > max * (1.0 + 1e-12) {
                    return None;
                }
            }
        }
    }
}

/// Armijo step along `-∇Ψ = -Mᵀφ`.
fn gradient_step<S: MicpSystem + ?Sized>(
    problem: &S,
    params: &Params,
    v: &[f64],
    current: &Merit,
    reference: f64,
    matrix: &SparseMatrix,
    eps: f64,
    config: &SolverConfig,
) -> Option<(f64, Vec<f64>, Merit)> {
    let g = matrix.mul_transpose_vec(&current.phi);
    let gg: f64 = g.iter().map(|x| x * x).sum();
    if !(gg > 0.0) || !gg.is_finite() {
        return None;
    }
    let mut alpha = 1.0;
    for _ in 0..=config.max_backtracks {
        let trial: Vec<f64> = v.iter().zip(&g).map(|(x, d)| x - alpha * d).collect();
        let m = merit(
            problem,
            &trial,
            problem.evaluate_at(&trial, params, false, false).f,
            eps,
        );
        if m.value.is_finite() && m.value <= reference - config.armijo_factor * alpha * gg {
            return Some((alpha, trial, m));
        }
        alpha *= config.backtrack_ratio;
    }
    None
}

/// Solve the MiCP from `v_init`. Deterministic in all inputs.
pub fn solve_micp<S: MicpSystem + ?Sized>(
    problem: &S,
    params: &Params,
    v_init: &[f64],
    config: &SolverConfig,
) -> Result<MicpSolution> {
    config.validate()?;
    if v_init.len() != problem.dim() {
        return Err(Error::Dimension(format!(
            "v_init has {} entries, layout needs {}",
            v_init.len(),
            problem.dim()
        )));
    }
    problem.check_params(params)?;
    if v_init.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("v_init"));
    }
    let (row_order, col_order) = problem.factor_order();
    let r = problem.eta_r();
    let tol = config.residual_tolerance;
    let mut eps = config.fb_smoothing;
    let mut v = v_init.to_vec();
    let mut trace = Vec::new();

    let eval = |v: &[f64], jac: bool| problem.evaluate_at(v, params, jac, false);
    let mut current = {
        let e = eval(&v, false);
        merit(problem, &v, e.f, eps)
    };
    let mut history = std::collections::VecDeque::with_capacity(config.nonmonotone_memory);
    let mut incumbent = (v.clone(), current.value);
    let mut since_best = 0;
    let mut monotone = false;
    for iteration in 0..=config.max_iterations {
        if !current.value.is_finite() {
            return Err(Error::NonConvergence {
                iterations: iteration,
                residual: f64::INFINITY,
                reason: "non-finite residual".into(),
            });
        }
        if eps == 0.0 || !config.homotopy {
            if current.inf_norm <= tol {
                // clamp tiny negative multipliers left by the FB residual
                let mut clamped = false;
                for z in &mut v[r..] {
                    if *z < 0.0 {
                        *z = 0.0;
                        clamped = true;
                    }
                }
                if clamped {
                    current = merit(problem, &v, eval(&v, false).f, eps);
                }
                let kkt = kkt_residual_of(r, &v, &current.f);
                if kkt <= tol && current.inf_norm <= tol {
                    let h = current.f[r..].to_vec();
                    let active_set = (0..h.len())
                        .filter(|&j| h[j] <= config.activation_tolerance)
                        .collect();
                    return Ok(MicpSolution {
                        v,
                        converged: true,
                        residual: kkt,
                        iterations: iteration,
                        active_set,
                        h,
                        layout: problem.layout().clone(),
                        trace,
                    });
                }
            }
        } else if current.inf_norm <= tol.max(eps) {
            eps = if eps * 0.1 < tol { 0.0 } else { eps * 0.1 };
            current = merit(problem, &v, current.f, eps);
            history.clear();
            continue;
        }
        if iteration == config.max_iterations {
            break;
        }

        let e = eval(&v, true);
        let matrix = newton_matrix(problem, &v, &e.f, e.jac.unwrap(), eps);
        let Some((lu, rho)) = factor_regularized(
            &matrix,
            row_order,
            col_order,
            config.regularization_floor,
            config.regularization_max,
        ) else {
            return Err(Error::NonConvergence {
                iterations: iteration,
                residual: current.inf_norm,
                reason: format!(
                    "Newton matrix singular after shifts up to {:e}",
                    config.regularization_max
                ),
            });
        };
        let rhs: Vec<f64> = current.phi.iter().map(|x| -x).collect();
        let step = lu.solve(&rhs);
        if step.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonConvergence {
                iterations: iteration,
                residual: current.inf_norm,
                reason: "non-finite Newton step".into(),
            });
        }

        if history.len() == config.nonmonotone_memory {
            history.pop_front();
        }
        history.push_back(current.value);
        let reference = if monotone {
            current.value
        } else {
            history.iter().fold(current.value, |m: f64, x| m.max(*x))
        };

        let mut alpha = 1.0;
        let mut accepted = None;
        let mut best: Option<(f64, Vec<f64>, Merit)> = None;
        for _ in 0..=config.max_backtracks {
            let trial: Vec<f64> = v.iter().zip(&step).map(|(x, d)| x + alpha * d).collect();
            let m = merit(problem, &trial, eval(&trial, false).f, eps);
            if m.value.is_finite()
                && m.value <= reference - 2.0 * config.armijo_factor * alpha * current.value
            {
                accepted = Some((alpha, trial, m));
                break;
            }
            if m.value.is_finite() && best.as_ref().map_or(true, |b| m.value < b.2.value) {
                best = Some((alpha, trial, m));
            }
            alpha *= config.backtrack_ratio;
        }
        let (alpha, trial, m) = match accepted {
            Some(a) => a,
            None => match best {
                Some(b) if b.2.value < current.value => {
                    warn!("line search exhausted at iteration {iteration}; taking best decrease");
                    b
                }
                // the Newton direction is useless here, fall back to steepest descent on the merit
                _ => match gradient_step(
                    problem, params, &v, &current, reference, &matrix, eps, config,
                ) {
                    Some(g) => {
                        debug!("gradient step at iteration {iteration}");
                        g
                    }
                    None => {
                        return Err(Error::NonConvergence {
                            iterations: iteration,
                            residual: current.inf_norm,
                            reason: "line search found no decrease".into(),
                        })
                    }
                },
            },
        };
        trace.push(TraceRow {
            iteration,
            residual: current.inf_norm,
            step_length: alpha,
            regularization: rho,
        });
        v = trial;
        current = m;
        if current.value < incumbent.1 {
            incumbent = (v.clone(), current.value);
            since_best = 0;
            monotone = false;
        } else {
            since_best += 1;
            // watchdog: a nonmonotone excursion that never beats the best merit is undone
            if since_best >= config.nonmonotone_memory && config.nonmonotone_memory > 1 {
                debug!("restoring best iterate at iteration {iteration}");
                v = incumbent.0.clone();
                current = merit(problem, &v, eval(&v, false).f, eps);
                history.clear();
                since_best = 0;
                monotone = true;
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: config.max_iterations,
        residual: current.inf_norm,
        reason: "iteration limit".into(),
    })
}
