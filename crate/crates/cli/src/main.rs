use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use foresight_core::harness::{
    check_grad, initial_guess, monte_carlo, write_grad_table, write_trajectory_csv,
    ExperimentConfig, Method, ScenarioFile, ScenarioSpec,
};
use foresight_core::inverse::{infer_with_problem, GammaMode};
use foresight_core::observation::{
    observe, ObjectiveWeighting, ObservationModel, ObservationSequence,
};
use foresight_core::scenarios::{receding_horizon_run, DrivingScenario};
use foresight_core::transcription::transcribe;
use foresight_core::Error;

const EXIT_NONCONVERGENCE: u8 = 2;
const EXIT_BAD_INPUT: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "foresight",
    version,
    about = "Discounted dynamic games: solve, infer, and experiment"
)]
struct Cli {
    /// Seed for random draws; overrides seeds given in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "foresight-out")]
    out: PathBuf,
    /// Learn discount factors or freeze them at one.
    #[arg(long, global = true, value_enum)]
    gamma_mode: Option<GammaArg>,
    /// Regularizer weight c_γ on |1 - γ|².
    #[arg(long, global = true)]
    reg: Option<f64>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GammaArg {
    Learn,
    One,
}

impl GammaArg {
    fn mode(self) -> GammaMode {
        match self {
            GammaArg::Learn => GammaMode::Learn,
            GammaArg::One => GammaMode::FixedAtOne,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward equilibrium at the scenario's true parameters.
    Solve {
        scenario: PathBuf,
        /// Also write noisy full-state observations with this σ².
        #[arg(long)]
        observe: Option<f64>,
    },
    /// Estimate (θ, γ) from an observation CSV with its JSON sidecar.
    Infer {
        scenario: PathBuf,
        observations: PathBuf,
    },
    /// Monte Carlo sweep over observation noise.
    Montecarlo {
        experiment: PathBuf,
        /// 50 noise levels × 50 trials.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Receding-horizon driving simulation.
    Rhplan {
        scenario: PathBuf,
        /// Observation noise σ² of the other cars.
        #[arg(long, default_value_t = 0.01)]
        sigma2: f64,
    },
    /// Analytic inverse gradient against central finite differences.
    CheckGrad { scenario: PathBuf },
}

/// Failure with its exit code.
struct Failure(u8, anyhow::Error);

fn classify(e: anyhow::Error) -> Failure {
    let code = match e.downcast_ref::<Error>() {
        Some(Error::NonConvergence { .. } | Error::InferenceFailed(_)) => EXIT_NONCONVERGENCE,
        Some(Error::SensitivityFailure(_) | Error::Io(_)) => 1,
        Some(_) => EXIT_BAD_INPUT,
        None => EXIT_BAD_INPUT,
    };
    Failure(code, e)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_INPUT } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))
        .map_err(|e| Failure(1, e))?;
    match &cli.command {
        Command::Solve { scenario, observe } => solve(cli, scenario, *observe),
        Command::Infer {
            scenario,
            observations,
        } => infer(cli, scenario, observations),
        Command::Montecarlo {
            experiment,
            paper_scale,
        } => montecarlo(cli, experiment, *paper_scale),
        Command::Rhplan { scenario, sigma2 } => rhplan(cli, scenario, *sigma2),
        Command::CheckGrad { scenario } => grad(cli, scenario),
    }
}

fn read_scenario(cli: &Cli, path: &Path) -> Result<ScenarioFile, Failure> {
    let mut file = ScenarioFile::read(path)
        .with_context(|| format!("reading scenario {}", path.display()))
        .map_err(|e| Failure(EXIT_BAD_INPUT, e))?;
    if let Some(mode) = cli.gamma_mode {
        file.inverse.gamma_mode = mode.mode();
    }
    if let Some(c) = cli.reg {
        file.inverse.gamma_regularizer = c;
    }
    Ok(file)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    std::io::Write::write_all(&mut f, b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    converged: bool,
    residual: f64,
    iterations: usize,
    active_set: &'a [usize],
    theta: &'a [f64],
    gamma: &'a [f64],
}

fn solve(cli: &Cli, path: &Path, sigma2: Option<f64>) -> Result<u8, Failure> {
    let file = read_scenario(cli, path)?;
    let fixture = file.fixture().map_err(|e| classify(e.into()))?;
    let (problem, sol) = fixture
        .solve(&fixture.truth, &file.transcription, &file.solver)
        .map_err(|e| classify(e.into()))?;
    let traj = problem.trajectory(&sol.v);
    let out = &cli.out;
    (|| -> Result<()> {
        write_trajectory_csv(&traj, &out.join("trajectory.csv"))?;
        sol.write_trace_csv(&out.join("trace.csv"))?;
        write_json(
            &out.join("solution.json"),
            &SolveSummary {
                converged: sol.converged,
                residual: sol.residual,
                iterations: sol.iterations,
                active_set: &sol.active_set,
                theta: &fixture.truth.theta,
                gamma: &fixture.truth.gamma,
            },
        )?;
        if let Some(s2) = sigma2 {
            let model = ObservationModel::full_state(&fixture.game, s2)
                .with_weighting(ObjectiveWeighting::Identity);
            observe(&traj, &model, cli.seed.unwrap_or(0))?
                .write_csv(&out.join("observations.csv"))?;
        }
        Ok(())
    })()
    .map_err(classify)?;
    println!(
        "solved in {} iterations, residual {:.2e}; wrote {}",
        sol.iterations,
        sol.residual,
        out.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct InferSummary<'a> {
    theta: &'a [f64],
    gamma: &'a [f64],
    theta0: &'a [f64],
    gamma0: &'a [f64],
    iterations: usize,
    converged: bool,
    aborted: bool,
    objective: f64,
}

fn infer(cli: &Cli, path: &Path, obs_path: &Path) -> Result<u8, Failure> {
    let file = read_scenario(cli, path)?;
    let fixture = file.fixture().map_err(|e| classify(e.into()))?;
    let obs = ObservationSequence::read_csv(obs_path)
        .with_context(|| format!("reading observations {}", obs_path.display()))
        .map_err(|e| Failure(EXIT_BAD_INPUT, e))?;
    let guess = initial_guess(&fixture.truth, 0.0, cli.seed.unwrap_or(0));
    let theta0 = file.theta0.clone().unwrap_or(guess.theta);
    let gamma0 = file.gamma0.clone().unwrap_or(guess.gamma);
    let config = foresight_core::inverse::InverseConfig {
        transcription: file.transcription.clone(),
        ..file.inverse.clone()
    };
    let r = (|| -> foresight_core::Result<_> {
        let problem = transcribe(&fixture.game, &config.transcription)?;
        let start = foresight_core::game::Params::new(theta0.clone(), gamma0.clone());
        let v0 = fixture.start(&problem, &start, &config.solver)?;
        infer_with_problem(&problem, &obs, &theta0, &gamma0, Some(&v0), &config)
    })()
    .map_err(|e| classify(e.into()))?;
    let out = &cli.out;
    (|| -> Result<()> {
        r.write_log_csv(&out.join("iterations.csv"))?;
        write_trajectory_csv(&r.trajectory, &out.join("trajectory.csv"))?;
        write_json(
            &out.join("result.json"),
            &InferSummary {
                theta: &r.theta,
                gamma: &r.gamma,
                theta0: &theta0,
                gamma0: &gamma0,
                iterations: r.iterations,
                converged: r.converged,
                aborted: r.aborted,
                objective: r.objective,
            },
        )
    })()
    .map_err(classify)?;
    println!(
        "{} after {} iterations: P = {:.4e}, gamma = {:?}",
        if r.converged { "converged" } else { "stopped" },
        r.iterations,
        r.objective,
        r.gamma
    );
    Ok(if r.converged { 0 } else { EXIT_NONCONVERGENCE })
}

fn montecarlo(cli: &Cli, path: &Path, paper_scale: bool) -> Result<u8, Failure> {
    let mut config: ExperimentConfig = fs::File::open(path)
        .map_err(anyhow::Error::from)
        .and_then(|f| Ok(serde_json::from_reader(std::io::BufReader::new(f))?))
        .with_context(|| format!("reading experiment {}", path.display()))
        .map_err(|e| Failure(EXIT_BAD_INPUT, e))?;
    if paper_scale {
        config.noise_levels = 50;
        config.trials = 50;
    }
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(mode) = cli.gamma_mode {
        config.methods = vec![match mode {
            GammaArg::Learn => Method::Foresighted,
            GammaArg::One => Method::BaselineGammaOne,
        }];
    }
    if let Some(c) = cli.reg {
        config.inverse.gamma_regularizer = c;
    }
    let dir = config.output_dir.clone().unwrap_or_else(|| cli.out.clone());
    let report = monte_carlo(&config).map_err(|e| classify(e.into()))?;
    report.write(&dir).map_err(|e| classify(e.into()))?;
    for level in &report.levels {
        let means: Vec<String> = level
            .methods
            .iter()
            .map(|m| match m.mean {
                Some(v) => format!("{} {:.4e}", m.method.name(), v),
                None => format!("{} -", m.method.name()),
            })
            .collect();
        println!("sigma2 {:.5}: {}", level.sigma2, means.join(", "));
    }
    if let Some(r) = report.relative_improvement {
        println!("overall relative improvement {:.1}%", 100.0 * r);
    }
    println!(
        "{} rows ({} failed); wrote {}",
        report.total_rows,
        report.failed_rows,
        dir.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct RhSummary {
    seed: u64,
    sigma2: f64,
    min_distance: f64,
    d_min: f64,
    initial_goal_distance: f64,
    final_goal_distance: f64,
    fallbacks: usize,
    max_gamma_drift: f64,
}

fn rhplan(cli: &Cli, path: &Path, sigma2: f64) -> Result<u8, Failure> {
    let file = read_scenario(cli, path)?;
    let ScenarioSpec::Driving(driving) = &file.scenario else {
        return Err(Failure(
            EXIT_BAD_INPUT,
            anyhow::anyhow!("rhplan needs a driving scenario"),
        ));
    };
    let mut rh = file.receding.clone();
    if let Some(mode) = cli.gamma_mode {
        rh.inference.gamma_mode = mode.mode();
    }
    if let Some(c) = cli.reg {
        rh.inference.gamma_regularizer = c;
    }
    let seed = cli.seed.unwrap_or(0);
    let scenario = DrivingScenario::new(driving.clone(), rh.total_steps, &file.solver)
        .map_err(|e| classify(e.into()))?;
    info!(
        "scripted equilibrium ready, simulating {} steps",
        rh.total_steps
    );
    let log = receding_horizon_run(&scenario, &rh, sigma2, seed).map_err(|e| classify(e.into()))?;
    let out = &cli.out;
    let summary = RhSummary {
        seed,
        sigma2,
        min_distance: log.min_distance(),
        d_min: log.d_min,
        initial_goal_distance: log.initial_goal_distance(),
        final_goal_distance: log.final_goal_distance(),
        fallbacks: log.fallbacks(),
        max_gamma_drift: log.max_gamma_drift(),
    };
    (|| -> Result<()> {
        log.write_csv(&out.join("rh_log.csv"))?;
        write_json(&out.join("rh_summary.json"), &summary)
    })()
    .map_err(classify)?;
    println!(
        "min distance {:.3} m (d_min {}), goal distance {:.2} -> {:.2} m, {} fallbacks",
        summary.min_distance,
        summary.d_min,
        summary.initial_goal_distance,
        summary.final_goal_distance,
        summary.fallbacks
    );
    Ok(0)
}

fn grad(cli: &Cli, path: &Path) -> Result<u8, Failure> {
    let file = read_scenario(cli, path)?;
    let fixture = file.fixture().map_err(|e| classify(e.into()))?;
    let mut config = file.check_grad.clone();
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let rows = check_grad(&fixture, &config).map_err(|e| classify(e.into()))?;
    write_grad_table(&rows, &cli.out.join("grad_check.csv")).map_err(|e| classify(e.into()))?;
    println!(
        "{:>5} {:>7} {:>12} {:>12}  result",
        "point", "strict", "abs err", "rel err"
    );
    for r in &rows {
        println!(
            "{:>5} {:>7} {:>12.3e} {:>12.3e}  {}",
            r.point,
            r.strict_complementarity,
            r.abs_error,
            r.relative_error,
            match r.passed {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "skipped",
            }
        );
    }
    Ok(0)
}
