//! Projected gradient descent on `(θ, γ)` against the observation objective.

use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameDefinition, Params, Trajectory};
use crate::observation::ObservationSequence;
use crate::sensitivity::{
    inverse_gradient, objective_curvature, objective_curvature_diagonal, partition_active,
    solution_sensitivity_robust, DEFAULT_ACTIVATION_TOLERANCE,
};
use crate::solver::{solve_micp, warm_start, MicpSolution, SolverConfig};
use crate::transcription::{transcribe, MicpProblem, TranscriptionOptions};

const LM_INITIAL_DAMPING: f64 = 1.0;
const LM_MAX_REJECTIONS: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaMode {
    #[default]
    Learn,
    /// Baseline: every discount factor frozen at 1.
    FixedAtOne,
}

/// Per-coordinate scaling of the gradient before the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepScaling {
    /// Raw gradient.
    #[default]
    None,
    /// Divide each component by the matching diagonal entry of the Gauss-Newton curvature of `P`.
    GaussNewtonDiagonal,
    /// Levenberg-Marquardt on the full Gauss-Newton curvature: steps that do not lower the
    /// regularized objective are rejected and the damping raised. `α` scales the accepted step.
    LevenbergMarquardt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    /// `c_γ` in `P + c_γ |1 - γ|²`.
    pub gamma_regularizer: f64,
    pub gamma_mode: GammaMode,
    pub gamma_max: f64,
    /// Scale the step to length `α` whenever `|g| > 1`.
    pub normalized_gradient: bool,
    pub step_scaling: StepScaling,
    /// Also require `|γ_{k+1} - γ_k| <= ε` to stop.
    pub gamma_in_convergence: bool,
    pub warm_start: bool,
    /// Step halvings allowed after an inner-solve failure.
    pub max_step_halvings: usize,
    /// Per-agent flags freezing `γ^i` at its initial value (empty: none frozen).
    pub frozen_gamma: Vec<bool>,
    pub activation_tolerance: f64,
    pub solver: SolverConfig,
    pub transcription: TranscriptionOptions,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_iterations: 500,
            convergence_tol: 1e-4,
            gamma_regularizer: 0.0,
            gamma_mode: GammaMode::Learn,
            gamma_max: 2.0,
            normalized_gradient: false,
            step_scaling: StepScaling::None,
            gamma_in_convergence: false,
            warm_start: true,
            max_step_halvings: 5,
            frozen_gamma: Vec::new(),
            activation_tolerance: DEFAULT_ACTIVATION_TOLERANCE,
            solver: SolverConfig::default(),
            transcription: TranscriptionOptions::default(),
        }
    }
}

impl InverseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.convergence_tol > 0.0 && self.max_iterations >= 1)
            || !(self.gamma_regularizer >= 0.0)
            || !(self.gamma_max > 0.0)
        {
            return Err(Error::Parameter(
                "inverse config needs α > 0, ε > 0, K >= 1, c_γ >= 0, γ_max > 0".into(),
            ));
        }
        self.solver.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub objective: f64,
    pub regularized_objective: f64,
    pub gamma: Vec<f64>,
    pub grad_theta_norm: f64,
    pub grad_gamma_norm: f64,
    pub theta_step: f64,
    pub gamma_step: f64,
    pub step_size: f64,
    pub inner_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct InverseResult {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub trajectory: Trajectory,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the loop stopped early after repeated inner-solve failures.
    pub aborted: bool,
    pub objective: f64,
    pub log: Vec<IterationRecord>,
    pub solution: MicpSolution,
}

impl InverseResult {
    pub fn params(&self) -> Params {
        Params::new(self.theta.clone(), self.gamma.clone())
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.gamma.len();
        write!(w, "k,objective,regularized_objective")?;
        for i in 0..n {
            write!(w, ",gamma_{}", i + 1)?;
        }
        writeln!(
            w,
            ",grad_theta_norm,grad_gamma_norm,theta_step,gamma_step,step_size,inner_iterations"
        )?;
        for r in &self.log {
            write!(w, "{},{:e},{:e}", r.k, r.objective, r.regularized_objective)?;
            for g in &r.gamma {
                write!(w, ",{g:?}")?;
            }
            writeln!(
                w,
                ",{:e},{:e},{:e},{:e},{:e},{}",
                r.grad_theta_norm,
                r.grad_gamma_norm,
                r.theta_step,
                r.gamma_step,
                r.step_size,
                r.inner_iterations
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `P + c_γ |1 - γ|²`.
pub fn regularized_objective(p: f64, gamma: &[f64], c_gamma: f64) -> f64 {
    p + c_gamma * gamma.iter().map(|g| (1.0 - g).powi(2)).sum::<f64>()
}

/// Run the inverse game from `(θ₀, γ₀)`.
pub fn infer(
    game: &GameDefinition,
    observations: &ObservationSequence,
    theta0: &[f64],
    gamma0: &[f64],
    config: &InverseConfig,
) -> Result<InverseResult> {
    let problem = transcribe(game, &config.transcription)?;
    infer_with_problem(&problem, observations, theta0, gamma0, None, config)
}

/// As [`infer`], reusing a transcribed problem and optionally a starting point for the first solve.
pub fn infer_with_problem(
    problem: &MicpProblem,
    observations: &ObservationSequence,
    theta0: &[f64],
    gamma0: &[f64],
    v0: Option<&[f64]>,
    config: &InverseConfig,
) -> Result<InverseResult> {
    config.validate()?;
    let game = problem.game();
    let n_agents = game.num_agents();
    if observations.len() > game.horizon() {
        return Err(Error::Dimension(format!(
            "{} observed stages exceed the horizon {}",
            observations.len(),
            game.horizon()
        )));
    }
    if observations.model.state_dim != game.dims.state_dim {
        return Err(Error::Dimension(
            "observation model does not match the game state".into(),
        ));
    }
    let frozen: Vec<bool> = (0..n_agents)
        .map(|i| {
            config.gamma_mode == GammaMode::FixedAtOne
                || config.frozen_gamma.get(i).copied().unwrap_or(false)
        })
        .collect();
    let gamma_start: Vec<f64> = gamma0
        .iter()
        .map(|g| match config.gamma_mode {
            GammaMode::FixedAtOne => 1.0,
            GammaMode::Learn => g.clamp(0.0, config.gamma_max),
        })
        .collect();
    let mut params = Params::new(theta0.to_vec(), gamma_start);
    game.check_params(&params)?;
    let theta_dim = params.theta.len();

    let start = match v0 {
        Some(v) => v.to_vec(),
        None => problem.initial_point(),
    };
    let mut solution = solve_micp(problem, &params, &start, &config.solver)
        .map_err(|e| Error::InferenceFailed(format!("initial inner solve failed: {e}")))?;
    let mut log = Vec::new();
    let mut converged = false;
    let mut aborted = false;
    let mut iterations = 0;
    let mut damping = LM_INITIAL_DAMPING;

    for k in 0..config.max_iterations {
        iterations = k + 1;
        let states = problem.trajectory(&solution.v).states;
        let objective = observations.objective(&states)?;
        let current = regularized_objective(objective, &params.gamma, config.gamma_regularizer);
        let partition = partition_active(&solution, config.activation_tolerance);
        let sens = solution_sensitivity_robust(problem, &solution, &partition, &params)?;
        let mut grad = inverse_gradient(problem, &solution, &sens, observations)?;
        for i in 0..n_agents {
            grad[theta_dim + i] += 2.0 * config.gamma_regularizer * (params.gamma[i] - 1.0);
            if frozen[i] {
                grad[theta_dim + i] = 0.0;
            }
        }
        let mut direction = grad.clone();
        match config.step_scaling {
            StepScaling::None => {}
            StepScaling::GaussNewtonDiagonal => {
                let d = objective_curvature_diagonal(problem, &sens, observations);
                let floor = 1e-8 * d.max().max(f64::MIN_POSITIVE);
                for (g, c) in direction.iter_mut().zip(d.iter()) {
                    *g /= c.max(floor);
                }
            }
            StepScaling::LevenbergMarquardt => {}
        }
        let init = if config.warm_start {
            warm_start(&solution, problem)?
        } else {
            problem.initial_point()
        };
        let mut alpha = config.learning_rate;
        let mut next = None;
        if config.step_scaling == StepScaling::LevenbergMarquardt {
            let mut curvature = objective_curvature(problem, &sens, observations);
            for i in 0..n_agents {
                curvature[(theta_dim + i, theta_dim + i)] += 2.0 * config.gamma_regularizer;
            }
            for i in (0..n_agents).filter(|i| frozen[*i]) {
                let c = theta_dim + i;
                curvature.row_mut(c).fill(0.0);
                curvature.column_mut(c).fill(0.0);
                curvature[(c, c)] = 1.0;
            }
            let floor = 1e-12 * curvature.diagonal().max().max(f64::MIN_POSITIVE);
            let mut solved_any = false;
            for attempt in 0..LM_MAX_REJECTIONS {
                let mut m = curvature.clone();
                for c in 0..m.nrows() {
                    m[(c, c)] += damping * curvature[(c, c)].max(floor);
                }
                let Some(direction) = m.cholesky().map(|ch| ch.solve(&grad)) else {
                    damping *= 10.0;
                    continue;
                };
                let candidate = step(&params, &direction, alpha, config.gamma_max, theta_dim);
                match solve_micp(problem, &candidate, &init, &config.solver) {
                    Ok(s) => {
                        solved_any = true;
                        let p = observations.objective(&problem.trajectory(&s.v).states)?;
                        let trial =
                            regularized_objective(p, &candidate.gamma, config.gamma_regularizer);
                        if trial < current {
                            damping = (damping * 0.3).max(1e-9);
                            next = Some((candidate, s));
                            break;
                        }
                        damping *= 10.0;
                    }
                    Err(e) => {
                        warn!("inner solve failed at outer iteration {k} (attempt {attempt}): {e}; raising damping");
                        damping *= 10.0;
                    }
                }
            }
            // no damping level lowers the objective: a zero step, which meets the stopping rule
            if next.is_none() && solved_any {
                alpha = 0.0;
                next = Some((params.clone(), solution.clone()));
            }
        } else {
            let dnorm = direction.norm();
            if config.normalized_gradient && dnorm > 1.0 {
                direction /= dnorm;
            }
            for attempt in 0..=config.max_step_halvings {
                let candidate = step(&params, &direction, alpha, config.gamma_max, theta_dim);
                match solve_micp(problem, &candidate, &init, &config.solver) {
                    Ok(s) => {
                        next = Some((candidate, s));
                        break;
                    }
                    Err(e) => {
                        warn!("inner solve failed at outer iteration {k} (attempt {attempt}): {e}; halving step");
                        alpha *= 0.5;
                    }
                }
            }
        }
        let grad_theta_norm = grad.rows(0, theta_dim).norm();
        let grad_gamma_norm = grad.rows(theta_dim, n_agents).norm();
        let Some((candidate, new_solution)) = next else {
            log.push(IterationRecord {
                k,
                objective,
                regularized_objective: regularized_objective(
                    objective,
                    &params.gamma,
                    config.gamma_regularizer,
                ),
                gamma: params.gamma.clone(),
                grad_theta_norm,
                grad_gamma_norm,
                theta_step: 0.0,
                gamma_step: 0.0,
                step_size: 0.0,
                inner_iterations: 0,
            });
            aborted = true;
            break;
        };
        let theta_step = dist(&candidate.theta, &params.theta);
        let gamma_step = dist(&candidate.gamma, &params.gamma);
        log.push(IterationRecord {
            k,
            objective,
            regularized_objective: regularized_objective(
                objective,
                &params.gamma,
                config.gamma_regularizer,
            ),
            gamma: params.gamma.clone(),
            grad_theta_norm,
            grad_gamma_norm,
            theta_step,
            gamma_step,
            step_size: alpha,
            inner_iterations: new_solution.iterations,
        });
        debug!(
            "outer {k}: P = {objective:e}, |Δθ| = {theta_step:e}, γ = {:?}",
            candidate.gamma
        );
        params = candidate;
        solution = new_solution;
        if theta_step <= config.convergence_tol
            && (!config.gamma_in_convergence || gamma_step <= config.convergence_tol)
        {
            converged = true;
            break;
        }
    }
    let trajectory = problem.trajectory(&solution.v);
    let objective = observations.objective(&trajectory.states)?;
    info!("inverse game finished after {iterations} iterations (converged: {converged}), P = {objective:e}");
    Ok(InverseResult {
        theta: params.theta,
        gamma: params.gamma,
        trajectory,
        iterations,
        converged,
        aborted,
        objective,
        log,
        solution,
    })
}

fn step(
    params: &Params,
    direction: &DVector<f64>,
    alpha: f64,
    gamma_max: f64,
    theta_dim: usize,
) -> Params {
    let theta = params
        .theta
        .iter()
        .enumerate()
        .map(|(k, t)| t - alpha * direction[k])
        .collect();
    let gamma = params
        .gamma
        .iter()
        .enumerate()
        .map(|(i, g)| (g - alpha * direction[theta_dim + i]).clamp(0.0, gamma_max))
        .collect();
    Params::new(theta, gamma)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}
