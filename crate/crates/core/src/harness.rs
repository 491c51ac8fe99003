//! Experiment orchestration: fixtures, Monte Carlo sweeps over observation noise, bootstrap
//! summaries and finite-difference gradient checks.

use std::fs;
use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameDefinition, Params, Trajectory};
use crate::inverse::{infer_with_problem, GammaMode, InverseConfig, StepScaling};
use crate::observation::{
    observe, ObjectiveWeighting, ObservationKind, ObservationModel, ObservationSequence,
};
use crate::rng::{splitmix64, substream, trial_seed};
use crate::scenarios::{
    build_bundled_intersection, build_crosswalk, build_driving, CrosswalkConfig, DrivingConfig,
    IntersectionConfig, IntersectionScenario, RecedingHorizonConfig,
};
use crate::sensitivity::{inverse_gradient, partition_active, solution_sensitivity_robust};
use crate::solver::{solve_micp, MicpSolution, SolverConfig};
use crate::transcription::{transcribe, MicpProblem, TranscriptionOptions};

/// `|x - x_gt|²` over the stacked entries.
pub fn trajectory_error(x: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if x.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "trajectory {:?} vs ground truth {:?}",
            x.shape(),
            truth.shape()
        )));
    }
    Ok(x.iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioSpec {
    Crosswalk(CrosswalkConfig),
    Intersection(IntersectionConfig),
    Driving(DrivingConfig),
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::Crosswalk(CrosswalkConfig::default())
    }
}

/// A game with known ground-truth parameters.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub game: GameDefinition,
    pub truth: Params,
    intersection: Option<IntersectionScenario>,
}

impl Fixture {
    /// Driving games span `driving_horizon` stages from the cars' start states.
    pub fn build(spec: &ScenarioSpec, driving_horizon: usize) -> Result<Self> {
        match spec {
            ScenarioSpec::Crosswalk(c) => {
                let (game, truth) = build_crosswalk(c);
                Ok(Self {
                    game,
                    truth,
                    intersection: None,
                })
            }
            ScenarioSpec::Intersection(c) => {
                let sc = build_bundled_intersection(c)?;
                Ok(Self {
                    game: sc.game.clone(),
                    truth: sc.truth.clone(),
                    intersection: Some(sc),
                })
            }
            ScenarioSpec::Driving(c) => {
                let x1: Vec<f64> = c.cars.iter().flat_map(|car| car.start).collect();
                let game = build_driving(c, &x1, driving_horizon)?;
                Ok(Self {
                    game,
                    truth: c.truth(),
                    intersection: None,
                })
            }
        }
    }

    /// Cold-start point for solves at `params`.
    pub fn start(
        &self,
        problem: &MicpProblem,
        params: &Params,
        config: &SolverConfig,
    ) -> Result<Vec<f64>> {
        match &self.intersection {
            Some(sc) => sc.initial_point(problem, params, config),
            None => Ok(problem.initial_point()),
        }
    }

    pub fn solve(
        &self,
        params: &Params,
        options: &TranscriptionOptions,
        config: &SolverConfig,
    ) -> Result<(MicpProblem, MicpSolution)> {
        let problem = transcribe(&self.game, options)?;
        let v0 = self.start(&problem, params, config)?;
        let sol = solve_micp(&problem, params, &v0, config)?;
        Ok((problem, sol))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Foresighted,
    BaselineGammaOne,
}

impl Method {
    pub fn gamma_mode(self) -> GammaMode {
        match self {
            Method::Foresighted => GammaMode::Learn,
            Method::BaselineGammaOne => GammaMode::FixedAtOne,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Foresighted => "foresighted",
            Method::BaselineGammaOne => "baseline_gamma_one",
        }
    }
}

/// Inverse settings used by the experiments: Levenberg-Marquardt steps with the tolerance applied
/// to θ and γ, `c_γ = 1e-3`, and inner solves capped at 50 iterations so rejected steps stay cheap.
pub fn experiment_inverse_config() -> InverseConfig {
    InverseConfig {
        learning_rate: 1.0,
        max_iterations: 500,
        convergence_tol: 1e-4,
        gamma_regularizer: 1e-3,
        step_scaling: StepScaling::LevenbergMarquardt,
        gamma_in_convergence: true,
        solver: SolverConfig {
            max_iterations: 50,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    /// Number of σ² values, evenly spaced on `[0, max_sigma2]`.
    pub noise_levels: usize,
    pub max_sigma2: f64,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub master_seed: u64,
    pub output_dir: Option<std::path::PathBuf>,
    pub observation: ObservationKind,
    /// θ₀ = θ* + U(-s, s) per component.
    pub theta_perturbation: f64,
    pub bootstrap_resamples: usize,
    pub inverse: InverseConfig,
    /// Used for the ground-truth solve.
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            noise_levels: 10,
            max_sigma2: 0.01,
            trials: 10,
            methods: vec![Method::Foresighted, Method::BaselineGammaOne],
            master_seed: 0,
            output_dir: None,
            observation: ObservationKind::FullState,
            theta_perturbation: 0.5,
            bootstrap_resamples: 1000,
            inverse: experiment_inverse_config(),
            solver: SolverConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// 50 noise levels × 50 trials.
    pub fn paper_scale() -> Self {
        Self {
            noise_levels: 50,
            trials: 50,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_levels == 0 || self.trials == 0 || self.methods.is_empty() {
            return Err(Error::Parameter(
                "noise levels, trials and methods must be non-empty".into(),
            ));
        }
        if !(self.max_sigma2 >= 0.0 && self.max_sigma2.is_finite()) {
            return Err(Error::Parameter(format!("max σ² = {}", self.max_sigma2)));
        }
        if !(self.theta_perturbation >= 0.0) {
            return Err(Error::Parameter(
                "θ perturbation must be nonnegative".into(),
            ));
        }
        if self.bootstrap_resamples < 100 {
            return Err(Error::Parameter("at least 100 bootstrap resamples".into()));
        }
        if matches!(self.scenario, ScenarioSpec::Driving(_)) {
            return Err(Error::Parameter(
                "Monte Carlo sweeps run on the crosswalk or intersection".into(),
            ));
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return Err(Error::Parameter("duplicate method".into()));
        }
        self.inverse.validate()
    }

    /// `σ²_l = l · max / (L - 1)`; a single level is noiseless.
    pub fn noise_grid(&self) -> Vec<f64> {
        if self.noise_levels == 1 {
            return vec![0.0];
        }
        let step = self.max_sigma2 / (self.noise_levels - 1) as f64;
        (0..self.noise_levels).map(|l| l as f64 * step).collect()
    }
}

/// Seed of trial `trial` at noise level `level`. It does not depend on the grid size, so a
/// trial's data is the same in any sweep that contains it.
pub fn trial_seed_for(master: u64, level: usize, trial: usize) -> u64 {
    trial_seed(master, ((level as u64) << 32) | trial as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub level: usize,
    pub sigma2: f64,
    pub sigma: f64,
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    /// `None` marks a failed trial, excluded from every aggregate.
    pub error: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: Option<f64>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub message: Option<String>,
}

impl TrialRow {
    pub fn failed(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub count: usize,
    pub failures: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (`n - 1`).
    pub std: Option<f64>,
    pub bootstrap_mean: Option<f64>,
    pub bootstrap_se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub sigma2: f64,
    pub sigma: f64,
    pub methods: Vec<MethodSummary>,
    /// `1 - mean(foresighted) / mean(baseline)`.
    pub relative_improvement: Option<f64>,
}

impl LevelSummary {
    pub fn mean(&self, method: Method) -> Option<f64> {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .and_then(|m| m.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub master_seed: u64,
    pub trials: usize,
    pub noise_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub bootstrap_resamples: usize,
    pub rows: Vec<TrialRow>,
    pub levels: Vec<LevelSummary>,
    /// Mean over every successful trial of each method.
    pub overall: Vec<MethodSummary>,
    pub relative_improvement: Option<f64>,
    pub total_rows: usize,
    pub failed_rows: usize,
}

/// Mean of resample means and their standard deviation.
pub fn bootstrap_summary(samples: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples.len() < 2 || resamples < 100 {
        return Err(Error::Parameter(format!(
            "bootstrap needs >= 2 samples and >= 100 resamples, got {} and {resamples}",
            samples.len()
        )));
    }
    let n = samples.len();
    let mut rng = substream(seed, 0);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let (mean, sd) = mean_std(&means);
    Ok((mean, sd.unwrap_or(0.0)))
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

fn summarize(method: Method, rows: &[&TrialRow], resamples: usize, seed: u64) -> MethodSummary {
    let errors: Vec<f64> = rows.iter().filter_map(|r| r.error).collect();
    let failures = rows.len() - errors.len();
    let (mean, std) = if errors.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&errors);
        (Some(m), s)
    };
    let boot = bootstrap_summary(&errors, resamples, seed).ok();
    MethodSummary {
        method,
        count: errors.len(),
        failures,
        mean,
        std,
        bootstrap_mean: boot.map(|b| b.0),
        bootstrap_se: boot.map(|b| b.1),
    }
}

fn improvement(summaries: &[MethodSummary]) -> Option<f64> {
    let get = |m| {
        summaries
            .iter()
            .find(|s| s.method == m)
            .and_then(|s| s.mean)
    };
    let (f, b) = (get(Method::Foresighted)?, get(Method::BaselineGammaOne)?);
    (b > 0.0).then(|| 1.0 - f / b)
}

struct TrialContext<'a> {
    config: &'a ExperimentConfig,
    fixture: &'a Fixture,
    problem: &'a MicpProblem,
    truth: &'a Trajectory,
}

fn observation_model(
    game: &GameDefinition,
    kind: ObservationKind,
    sigma2: f64,
) -> ObservationModel {
    let model = match kind {
        ObservationKind::FullState => ObservationModel::full_state(game, sigma2),
        ObservationKind::PositionOnly => ObservationModel::position_only(game, sigma2),
    };
    model.with_weighting(ObjectiveWeighting::Identity)
}

/// Initial guess of a trial: γ₀ ~ U[0, 1] per agent and θ₀ = θ* + U(-s, s).
pub fn initial_guess(truth: &Params, perturbation: f64, seed: u64) -> Params {
    let mut rng = substream(splitmix64(seed), 0);
    let gamma = truth.gamma.iter().map(|_| rng.gen::<f64>()).collect();
    let theta = truth
        .theta
        .iter()
        .map(|t| {
            if perturbation > 0.0 {
                t + rng.gen_range(-perturbation..perturbation)
            } else {
                *t
            }
        })
        .collect();
    Params::new(theta, gamma)
}

fn run_trial(ctx: &TrialContext, level: usize, sigma2: f64, trial: usize) -> Vec<TrialRow> {
    let cfg = ctx.config;
    let seed = trial_seed_for(cfg.master_seed, level, trial);
    let row = |method: Method| TrialRow {
        level,
        sigma2,
        sigma: sigma2.sqrt(),
        trial,
        seed,
        method,
        error: None,
        converged: false,
        iterations: 0,
        objective: None,
        theta: vec![],
        gamma: vec![],
        message: None,
    };
    let model = observation_model(&ctx.fixture.game, cfg.observation, sigma2);
    let obs = match observe(ctx.truth, &model, seed) {
        Ok(o) => o,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|&m| TrialRow {
                    message: Some(e.to_string()),
                    ..row(m)
                })
                .collect()
        }
    };
    let guess = initial_guess(&ctx.fixture.truth, cfg.theta_perturbation, seed);
    cfg.methods
        .iter()
        .map(|&method| {
            let inverse = InverseConfig {
                gamma_mode: method.gamma_mode(),
                ..cfg.inverse.clone()
            };
            let outcome = run_method(ctx, &obs, &guess, &inverse);
            match outcome {
                Ok((r, error)) => TrialRow {
                    error: Some(error),
                    converged: r.converged,
                    iterations: r.iterations,
                    objective: Some(r.objective),
                    theta: r.theta,
                    gamma: r.gamma,
                    ..row(method)
                },
                Err(e) => {
                    warn!("level {level} trial {trial} {}: {e}", method.name());
                    TrialRow {
                        message: Some(e.to_string()),
                        ..row(method)
                    }
                }
            }
        })
        .collect()
}

fn run_method(
    ctx: &TrialContext,
    obs: &ObservationSequence,
    guess: &Params,
    inverse: &InverseConfig,
) -> Result<(crate::inverse::InverseResult, f64)> {
    let start_params = match inverse.gamma_mode {
        GammaMode::Learn => guess.clone(),
        GammaMode::FixedAtOne => Params::new(guess.theta.clone(), vec![1.0; guess.gamma.len()]),
    };
    let v0 = ctx
        .fixture
        .start(ctx.problem, &start_params, &inverse.solver)?;
    let r = infer_with_problem(
        ctx.problem,
        obs,
        &guess.theta,
        &guess.gamma,
        Some(&v0),
        inverse,
    )?;
    let error = trajectory_error(&r.trajectory.states, &ctx.truth.states)?;
    Ok((r, error))
}

/// Sweep the noise grid; trials run in parallel and rows are sorted by (level, trial, method).
pub fn monte_carlo(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let fixture = Fixture::build(&config.scenario, 0)?;
    let problem = transcribe(&fixture.game, &config.inverse.transcription)?;
    let v0 = fixture.start(&problem, &fixture.truth, &config.solver)?;
    let truth_sol = solve_micp(&problem, &fixture.truth, &v0, &config.solver)?;
    let truth = problem.trajectory(&truth_sol.v);
    let ctx = TrialContext {
        config,
        fixture: &fixture,
        problem: &problem,
        truth: &truth,
    };
    let grid = config.noise_grid();
    let units: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|l| (0..config.trials).map(move |t| (l, t)))
        .collect();
    info!(
        "{} levels x {} trials x {} methods",
        grid.len(),
        config.trials,
        config.methods.len()
    );
    let mut rows: Vec<TrialRow> = units
        .par_iter()
        .flat_map_iter(|&(l, t)| run_trial(&ctx, l, grid[l], t))
        .collect();
    rows.sort_by(|a, b| (a.level, a.trial, a.method).cmp(&(b.level, b.trial, b.method)));

    let mut methods = config.methods.clone();
    methods.sort();
    let levels: Vec<LevelSummary> = grid
        .iter()
        .enumerate()
        .map(|(l, &sigma2)| {
            let summaries: Vec<MethodSummary> = methods
                .iter()
                .enumerate()
                .map(|(k, &m)| {
                    let sel: Vec<&TrialRow> = rows
                        .iter()
                        .filter(|r| r.level == l && r.method == m)
                        .collect();
                    let seed =
                        trial_seed(config.master_seed ^ 0xB007, (l * methods.len() + k) as u64);
                    summarize(m, &sel, config.bootstrap_resamples, seed)
                })
                .collect();
            LevelSummary {
                level: l,
                sigma2,
                sigma: sigma2.sqrt(),
                relative_improvement: improvement(&summaries),
                methods: summaries,
            }
        })
        .collect();
    let overall: Vec<MethodSummary> = methods
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let sel: Vec<&TrialRow> = rows.iter().filter(|r| r.method == m).collect();
            let seed = trial_seed(config.master_seed ^ 0xA11, k as u64);
            summarize(m, &sel, config.bootstrap_resamples, seed)
        })
        .collect();
    let failed_rows = rows.iter().filter(|r| r.failed()).count();
    Ok(MetricsReport {
        master_seed: config.master_seed,
        trials: config.trials,
        noise_grid: grid,
        methods,
        bootstrap_resamples: config.bootstrap_resamples,
        total_rows: rows.len(),
        failed_rows,
        relative_improvement: improvement(&overall),
        overall,
        levels,
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricsReport {
    /// Writes `trials.csv`, `summary.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_trials_csv(&dir.join("trials.csv"))?;
        self.write_summary_csv(&dir.join("summary.csv"))?;
        let mut f = fs::File::create(dir.join("report.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        std::io::Write::write_all(&mut f, b"\n")?;
        Ok(())
    }

    pub fn write_trials_csv(&self, path: &Path) -> Result<()> {
        let n_theta = self.rows.iter().map(|r| r.theta.len()).max().unwrap_or(0);
        let n_gamma = self.rows.iter().map(|r| r.gamma.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = [
            "level",
            "sigma2",
            "sigma",
            "trial",
            "seed",
            "method",
            "status",
            "error",
            "converged",
            "iterations",
            "objective",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((1..=n_theta).map(|k| format!("theta_{k}")));
        header.extend((1..=n_gamma).map(|k| format!("gamma_{k}")));
        header.push("message".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.level.to_string(),
                format!("{:?}", r.sigma2),
                format!("{:?}", r.sigma),
                r.trial.to_string(),
                r.seed.to_string(),
                r.method.name().to_string(),
                if r.failed() { "failed" } else { "ok" }.to_string(),
                opt(r.error),
                r.converged.to_string(),
                r.iterations.to_string(),
                opt(r.objective),
            ];
            for k in 0..n_theta {
                rec.push(opt(r.theta.get(k).copied()));
            }
            for k in 0..n_gamma {
                rec.push(opt(r.gamma.get(k).copied()));
            }
            rec.push(r.message.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "level",
            "sigma2",
            "sigma",
            "method",
            "count",
            "failures",
            "mean",
            "std",
            "bootstrap_mean",
            "bootstrap_se",
            "relative_improvement",
        ])?;
        for l in &self.levels {
            for m in &l.methods {
                w.write_record([
                    l.level.to_string(),
                    format!("{:?}", l.sigma2),
                    format!("{:?}", l.sigma),
                    m.method.name().to_string(),
                    m.count.to_string(),
                    m.failures.to_string(),
                    opt(m.mean),
                    opt(m.std),
                    opt(m.bootstrap_mean),
                    opt(m.bootstrap_se),
                    opt(l.relative_improvement),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub points: usize,
    /// Central-difference step.
    pub step: f64,
    /// Residual tolerance of every inner solve.
    pub inner_tolerance: f64,
    /// Noise of the observations the objective is measured against.
    pub sigma2: f64,
    /// θ = θ* + U(-s, s).
    pub theta_spread: f64,
    pub gamma_range: [f64; 2],
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 10,
            step: 1e-5,
            inner_tolerance: 1e-10,
            sigma2: 0.01,
            theta_spread: 0.5,
            gamma_range: [0.4, 0.95],
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub point: usize,
    pub params: Params,
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub abs_error: f64,
    /// `|g - g_fd|_inf / |g_fd|_inf`.
    pub relative_error: f64,
    pub strict_complementarity: bool,
    /// Strictly complementary and within tolerance. Weak points are reported but not judged.
    pub passed: Option<bool>,
}

/// Analytic `∇P` against central differences at random parameters around the truth.
pub fn check_grad(fixture: &Fixture, config: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    if config.points == 0 || !(config.step > 0.0) || !(config.inner_tolerance > 0.0) {
        return Err(Error::Parameter("gradient check settings".into()));
    }
    let [g_lo, g_hi] = config.gamma_range;
    if !(0.0 <= g_lo && g_lo < g_hi) {
        return Err(Error::Parameter(format!(
            "γ range {:?}",
            config.gamma_range
        )));
    }
    let solver = SolverConfig {
        residual_tolerance: config.inner_tolerance,
        ..Default::default()
    };
    let problem = transcribe(&fixture.game, &Default::default())?;
    let v0 = fixture.start(&problem, &fixture.truth, &solver)?;
    let truth = problem.trajectory(&solve_micp(&problem, &fixture.truth, &v0, &solver)?.v);
    let model = observation_model(&fixture.game, ObservationKind::FullState, config.sigma2);
    let obs = observe(&truth, &model, config.seed)?;
    let mut rng = substream(splitmix64(config.seed), 1);
    let theta_dim = fixture.truth.theta.len();
    let mut rows = Vec::with_capacity(config.points);
    for point in 0..config.points {
        let params = Params::new(
            fixture
                .truth
                .theta
                .iter()
                .map(|t| t + rng.gen_range(-config.theta_spread..=config.theta_spread))
                .collect(),
            (0..fixture.truth.gamma.len())
                .map(|_| rng.gen_range(g_lo..g_hi))
                .collect(),
        );
        let start = fixture.start(&problem, &params, &solver)?;
        let s = solve_micp(&problem, &params, &start, &solver)?;
        let part = partition_active(&s, solver.activation_tolerance);
        let sens = solution_sensitivity_robust(&problem, &s, &part, &params)?;
        let g = inverse_gradient(&problem, &s, &sens, &obs)?;
        let objective = |p: &Params| -> Result<f64> {
            let r = solve_micp(&problem, p, &s.v, &solver)?;
            obs.objective(&problem.trajectory(&r.v).states)
        };
        let base = params.stacked();
        let mut fd = vec![0.0; base.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus[k] += config.step;
            minus[k] -= config.step;
            *slot = (objective(&Params::from_stacked(&plus, theta_dim))?
                - objective(&Params::from_stacked(&minus, theta_dim))?)
                / (2.0 * config.step);
        }
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let abs_error = fd
            .iter()
            .zip(g.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let relative_error = abs_error / scale.max(f64::MIN_POSITIVE);
        rows.push(GradCheckRow {
            point,
            params,
            analytic: g.iter().copied().collect(),
            finite_difference: fd,
            abs_error,
            relative_error,
            strict_complementarity: part.strict,
            passed: part.strict.then_some(relative_error <= config.tolerance),
        });
    }
    Ok(rows)
}

pub fn write_grad_table(rows: &[GradCheckRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = rows.first().map(|r| r.analytic.len()).unwrap_or(0);
    let mut header: Vec<String> = ["point", "strict", "abs_error", "relative_error", "passed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in 0..dim {
        header.extend([
            format!("param_{k}"),
            format!("analytic_{k}"),
            format!("fd_{k}"),
        ]);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.point.to_string(),
            r.strict_complementarity.to_string(),
            format!("{:e}", r.abs_error),
            format!("{:e}", r.relative_error),
            r.passed
                .map(|p| p.to_string())
                .unwrap_or_else(|| "skipped".into()),
        ];
        for (k, p) in r.params.stacked().iter().enumerate() {
            rec.extend([
                format!("{p:?}"),
                format!("{:?}", r.analytic[k]),
                format!("{:?}", r.finite_difference[k]),
            ]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a CLI scenario file can carry. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioFile {
    pub scenario: ScenarioSpec,
    pub solver: SolverConfig,
    pub transcription: TranscriptionOptions,
    pub inverse: InverseConfig,
    /// Starting point of `infer`; defaults to the fixture's nominal θ.
    pub theta0: Option<Vec<f64>>,
    /// Defaults to a seeded U[0, 1] draw.
    pub gamma0: Option<Vec<f64>>,
    pub receding: RecedingHorizonConfig,
    pub check_grad: GradCheckConfig,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            solver: SolverConfig::default(),
            transcription: TranscriptionOptions::default(),
            inverse: experiment_inverse_config(),
            theta0: None,
            gamma0: None,
            receding: RecedingHorizonConfig::default(),
            check_grad: GradCheckConfig::default(),
        }
    }
}

impl ScenarioFile {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(
            fs::File::open(path)?,
        ))?)
    }

    pub fn fixture(&self) -> Result<Fixture> {
        Fixture::build(&self.scenario, self.receding.total_steps)
    }
}

/// Trajectory CSV: `t, x_1 .. x_n`, then each agent's controls `u{i}_{k}`.
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.states.ncols()).map(|k| format!("x_{k}")));
    for (i, u) in traj.controls.iter().enumerate() {
        header.extend((1..=u.ncols()).map(|k| format!("u{i}_{k}")));
    }
    w.write_record(&header)?;
    for t in 0..traj.horizon() {
        let rec: Vec<String> = std::iter::once(t.to_string())
            .chain(traj.stage_vector(t).iter().map(|v| format!("{v:?}")))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
