use std::path::{Path, PathBuf};
use std::time::Instant;

use rdlab::analysis::{accuracy_table, oscillation_threshold, spectrum_report, OscillationScan};
use rdlab::discretize::{initial_condition, RdProblem};
use rdlab::newton::{basin_scan, newton_solve};
use rdlab::steppers::{
    adaptive_evolve, evolve, AdaptiveOptions, StepperError, StepperKind, Trajectory,
};

use crate::config::{ExperimentConfig, OutputFormat, SpectrumState};
use crate::output::{
    accuracy_csv, basin_csv, convergence_csv, iterates_csv, oscillation_csv, sci, spectrum_csv,
    trajectory_csv, write_file, BasinRow, CsvTable, Payload, ResultBundle, RunMetadata,
    SolveResult, ThresholdPoint,
};
use crate::plot::{Chart, Series};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Integrate the problem in time and write the trajectory.
    Solve,
    /// Step-halving error and order-of-accuracy table.
    AccuracyTable,
    /// Eigenvalues of the two-level method matrix.
    Spectrum,
    /// Newton iteration for the steady state.
    Newton,
    /// Smallest oscillatory step size for each grid spacing.
    OscillationScan,
    /// Classify Newton steady states over a family of starting profiles.
    BasinScan,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::AccuracyTable => "accuracy-table",
            Command::Spectrum => "spectrum",
            Command::Newton => "newton",
            Command::OscillationScan => "oscillation-scan",
            Command::BasinScan => "basin-scan",
        }
    }
}

/// Everything a subcommand produced, ready to be written.
#[derive(Debug)]
pub struct Report {
    pub bundle: ResultBundle,
    pub tables: Vec<(&'static str, CsvTable)>,
    pub plots: Vec<(&'static str, Chart)>,
    /// Set when the run finished with partial results (blow-up, Newton
    /// running out of iterations); the outputs are still written.
    pub failure: Option<String>,
}

struct Parts {
    payload: Payload,
    tables: Vec<(&'static str, CsvTable)>,
    plots: Vec<(&'static str, Chart)>,
    failure: Option<String>,
}

pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let started = Instant::now();
    let p = cfg.validate_problem()?;
    let parts = match command {
        Command::Solve => solve(cfg, &p)?,
        Command::AccuracyTable => accuracy(cfg, &p)?,
        Command::Spectrum => spectrum(cfg, &p)?,
        Command::Newton => newton(cfg, &p)?,
        Command::OscillationScan => oscillation(cfg, &p)?,
        Command::BasinScan => basins(cfg, &p)?,
    };
    Ok(Report {
        bundle: ResultBundle {
            metadata: RunMetadata {
                command: command.name().into(),
                version: env!("CARGO_PKG_VERSION").into(),
                wall_time_s: started.elapsed().as_secs_f64(),
                config: cfg.clone(),
            },
            payload: parts.payload,
        },
        tables: parts.tables,
        plots: parts.plots,
        failure: parts.failure,
    })
}

/// Writes the report into `dir` and returns the paths written.
pub fn emit(
    report: &Report,
    dir: &Path,
    format: OutputFormat,
    plots: bool,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, contents: &str| -> Result<(), CliError> {
        let path = dir.join(name);
        write_file(&path, contents)?;
        written.push(path);
        Ok(())
    };
    put("config.toml", &report.bundle.metadata.config.to_toml())?;
    match format {
        OutputFormat::Csv => {
            for (name, table) in &report.tables {
                put(name, &table.render())?;
            }
        }
        OutputFormat::Json => put("result.json", &report.bundle.to_json())?,
    }
    if plots {
        for (name, chart) in &report.plots {
            put(name, &chart.render())?;
        }
    }
    Ok(written)
}

fn u0(cfg: &ExperimentConfig, p: &RdProblem) -> Result<Vec<f64>, CliError> {
    initial_condition(p, &cfg.initial).map_err(|e| CliError::Config(format!("initial: {e}")))
}

fn thin(traj: &Trajectory, stride: usize) -> Trajectory {
    if stride <= 1 || traj.states.len() <= 2 {
        return traj.clone();
    }
    let last = traj.states.len() - 1;
    let keep: Vec<usize> = (0..=last)
        .filter(|k| k % stride == 0 || *k == last)
        .collect();
    Trajectory {
        times: keep.iter().map(|&k| traj.times[k]).collect(),
        states: keep.iter().map(|&k| traj.states[k].clone()).collect(),
        step_sizes: keep
            .windows(2)
            .map(|w| traj.times[w[1]] - traj.times[w[0]])
            .collect(),
    }
}

/// Node coordinates with the boundary values attached.
fn profile(p: &RdProblem, u: &[f64]) -> Vec<(f64, f64)> {
    let n = u.len();
    std::iter::once((0.0, p.bc.a))
        .chain(u.iter().enumerate().map(|(i, &v)| (p.grid.x(i + 1), v)))
        .chain(std::iter::once((p.grid.x(n + 1), p.bc.b)))
        .collect()
}

/// Runs the `solve` section. A blow-up or step underflow is not an error
/// here: the partial trajectory comes back with the failure message.
fn integrate(
    cfg: &ExperimentConfig,
    p: &RdProblem,
) -> Result<(Trajectory, Option<String>), CliError> {
    let s = &cfg.solve;
    let u0 = u0(cfg, p)?;
    let outcome = match s.stepper {
        StepperKind::Rosenbrock {
            adaptive: true,
            rtol,
            atol,
        } => {
            let opts = AdaptiveOptions {
                initial_step: s.dt,
                ..AdaptiveOptions::new(rtol, atol)
            };
            adaptive_evolve(p, &u0, &opts, s.t_end)
        }
        kind => evolve(kind, p, &u0, s.dt.expect("validated"), s.t_end),
    };
    Ok(match outcome {
        Ok(t) => (t, None),
        Err(e @ (StepperError::BlowUp { .. } | StepperError::StepUnderflow { .. })) => {
            let partial = e
                .partial_trajectory()
                .cloned()
                .unwrap_or_else(|| Trajectory::start(u0.clone()));
            (partial, Some(e.to_string()))
        }
        Err(e) => return Err(e.into()),
    })
}

fn solve(cfg: &ExperimentConfig, p: &RdProblem) -> Result<Parts, CliError> {
    cfg.validate_solve()?;
    let s = &cfg.solve;
    let (traj, failure) = integrate(cfg, p)?;
    let traj = thin(&traj, s.stride);

    let mut chart = Chart::new(
        &format!("{} to t = {}", s.stepper.name(), traj.final_time()),
        "x",
        "u",
    );
    let n = traj.states.len();
    let shown = 12.min(n);
    for j in 0..shown {
        let k = if shown == 1 {
            0
        } else {
            j * (n - 1) / (shown - 1)
        };
        chart.series.push(Series::line(profile(p, &traj.states[k])));
    }
    if let Some(last) = chart.series.last_mut() {
        last.color = Some("black");
    }

    Ok(Parts {
        tables: vec![("trajectory.csv", trajectory_csv(&traj))],
        plots: vec![("trajectory.svg", chart)],
        payload: Payload::Trajectory(SolveResult {
            trajectory: traj,
            failure: failure.clone(),
        }),
        failure,
    })
}

fn accuracy(cfg: &ExperimentConfig, p: &RdProblem) -> Result<Parts, CliError> {
    cfg.validate_accuracy()?;
    let a = &cfg.accuracy;
    let table = accuracy_table(p, a.stepper, &u0(cfg, p)?, &a.dt_list, a.t_end)?;

    let mut chart = Chart::new("step-halving error", "log2 dt", "error");
    chart.log_y = true;
    let pts: Vec<(f64, f64)> = table
        .rows
        .iter()
        .filter_map(|r| Some((r.dt.log2(), r.approx_error?)))
        .collect();
    chart.series.push(Series::line(pts.clone()));
    chart.series.push(Series::dots(pts));

    let failure = table
        .rows
        .iter()
        .any(|r| r.unstable)
        .then(|| "at least one run blew up".to_string());
    Ok(Parts {
        tables: vec![("accuracy.csv", accuracy_csv(&table))],
        plots: vec![("accuracy.svg", chart)],
        payload: Payload::AccuracyTable(table),
        failure,
    })
}

fn spectrum(cfg: &ExperimentConfig, p: &RdProblem) -> Result<Parts, CliError> {
    cfg.validate_spectrum()?;
    let s = &cfg.spectrum;
    let (u, dt) = match s.state {
        SpectrumState::Initial => (u0(cfg, p)?, s.dt.expect("validated")),
        SpectrumState::Solved => {
            let (traj, failure) = integrate(cfg, p)?;
            if let Some(f) = failure {
                return Err(CliError::Numerical(f));
            }
            let dt = s.dt.or_else(|| traj.max_step()).ok_or_else(|| {
                CliError::Config("spectrum.dt: the solve run took no steps to take it from".into())
            })?;
            (traj.final_state().to_vec(), dt)
        }
    };
    let report = spectrum_report(p, s.stepper, &u, dt, s.c)?;

    let mut chart = Chart::new(
        &format!("{} spectrum, dt = {}", s.stepper.name(), sci(dt)),
        "Re",
        "Im",
    );
    chart.equal_aspect = true;
    chart.unit_circle = true;
    chart.series.push(Series::dots(
        report
            .spectrum
            .eigenvalues
            .iter()
            .map(|z| (z.re, z.im))
            .collect(),
    ));
    Ok(Parts {
        tables: vec![("spectrum.csv", spectrum_csv(&report))],
        plots: vec![("spectrum.svg", chart)],
        payload: Payload::Spectrum(report),
        failure: None,
    })
}

fn newton(cfg: &ExperimentConfig, p: &RdProblem) -> Result<Parts, CliError> {
    cfg.validate_newton()?;
    let trace = newton_solve(p, &u0(cfg, p)?, &cfg.newton.options())?;

    let mut errors = Chart::new("Newton updates", "iteration", "max-norm update");
    errors.log_y = true;
    let pts: Vec<(f64, f64)> = trace
        .errors
        .iter()
        .enumerate()
        .map(|(k, &e)| ((k + 1) as f64, e))
        .collect();
    errors.series.push(Series::line(pts.clone()));
    errors.series.push(Series::dots(pts));

    let mut iterates = Chart::new("Newton iterates", "x", "u");
    for u in &trace.iterates {
        iterates.series.push(Series::line(profile(p, u)));
    }
    if let Some(last) = iterates.series.last_mut() {
        last.color = Some("black");
    }

    let failure = (!trace.converged)
        .then(|| format!("no convergence within {} iterations", trace.iterations_used));
    Ok(Parts {
        tables: vec![
            ("iterates.csv", iterates_csv(&trace)),
            ("convergence.csv", convergence_csv(&trace)),
        ],
        plots: vec![
            ("newton_errors.svg", errors),
            ("newton_iterates.svg", iterates),
        ],
        payload: Payload::Newton(trace),
        failure,
    })
}

fn oscillation(cfg: &ExperimentConfig, p: &RdProblem) -> Result<Parts, CliError> {
    cfg.validate_oscillation()?;
    let o = &cfg.oscillation;
    let scan = OscillationScan {
        horizon: o.horizon,
        rel_width: o.rel_width,
    };
    let mut points = Vec::with_capacity(o.dx_list.len());
    for &dx in &o.dx_list {
        let lower_bound = dx * dx / (2.0 * p.delta);
        let lo = o.dt_lo.min(lower_bound);
        let dt_star = oscillation_threshold(p, o.stepper, &cfg.initial, dx, o.dt_hi, lo, &scan)?;
        points.push(ThresholdPoint {
            dx,
            dt_star,
            lower_bound,
        });
    }

    let mut chart = Chart::new("oscillation threshold", "dx", "dt");
    chart.series.push(Series::dots(
        points.iter().map(|q| (q.dx, q.dt_star)).collect(),
    ));
    let mut bound = Series::line(points.iter().map(|q| (q.dx, q.lower_bound)).collect());
    bound.color = Some("#888");
    chart.series.push(bound);
    Ok(Parts {
        tables: vec![("oscillation.csv", oscillation_csv(&points))],
        plots: vec![("oscillation.svg", chart)],
        payload: Payload::OscillationScan(points),
        failure: None,
    })
}

fn basins(cfg: &ExperimentConfig, p: &RdProblem) -> Result<Parts, CliError> {
    cfg.validate_basin()?;
    let b = &cfg.basin;
    let entries = basin_scan(p, &b.family.members(), &cfg.newton.options(), b.noise_floor)?;
    let rows: Vec<BasinRow> = b
        .family
        .parameters()
        .into_iter()
        .zip(entries)
        .map(|(parameter, entry)| BasinRow { parameter, entry })
        .collect();

    let mut chart = Chart::new("steady-state extrema", "parameter", "extrema");
    chart.series.push(Series::dots(
        rows.iter()
            .filter(|r| !r.entry.class.diverged)
            .map(|r| (r.parameter, r.entry.class.extremum_count as f64))
            .collect(),
    ));
    Ok(Parts {
        tables: vec![("basins.csv", basin_csv(&rows))],
        plots: vec![("basins.svg", chart)],
        payload: Payload::BasinScan(rows),
        failure: None,
    })
}
