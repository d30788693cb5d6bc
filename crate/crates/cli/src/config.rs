//! Experiment configuration.
//!
//! A config file is a TOML tree with one table per concern. Every key is
//! optional; missing keys take the documented defaults, and the fully
//! resolved tree is echoed into every result so a run can be reproduced from
//! its output alone.

use std::path::{Path, PathBuf};

use rdlab::discretize::{DirichletBc, Grid1D, InitialConditionSpec, RdProblem, ReactionSpec};
use rdlab::newton::{NewtonOptions, DEFAULT_NOISE_FLOOR};
use rdlab::steppers::StepperKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub a: f64,
    pub b: f64,
    pub length: f64,
    pub delta: f64,
    pub dx: f64,
    pub frame_speed: f64,
    pub reaction: ReactionSpec,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            a: 0.0,
            b: 1.0,
            length: 10.0,
            delta: 1.0,
            dx: 0.05,
            frame_speed: 0.0,
            reaction: ReactionSpec::Logistic { rho: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub stepper: StepperKind,
    /// Fixed step, or the first trial step of an adaptive run.
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Keep every `stride`-th state in the trajectory file (the last state
    /// is always kept).
    pub stride: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            stepper: StepperKind::rosenbrock_adaptive(1e-3, 1e-6),
            dt: None,
            t_end: 200.0,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccuracyConfig {
    pub stepper: StepperKind,
    pub dt_list: Vec<f64>,
    pub t_end: f64,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            stepper: StepperKind::CrankNicolsonSemiImplicit,
            dt_list: (0..8).map(|k| 0.5f64.powi(k)).collect(),
            t_end: 10.0,
        }
    }
}

/// State at which a nonlinear method matrix is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumState {
    /// The configured initial condition.
    Initial,
    /// The final state of the `solve` run.
    Solved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub stepper: StepperKind,
    pub state: SpectrumState,
    /// Step size of the method matrix. Without it, the largest step taken by
    /// the `solve` run is used (only with `state = "solved"`).
    pub dt: Option<f64>,
    /// Growth allowance in the von Neumann bound `ρ ≤ 1 + C dt`.
    pub c: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            stepper: StepperKind::CrankNicolsonSemiImplicit,
            state: SpectrumState::Solved,
            dt: None,
            c: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        let d = NewtonOptions::default();
        Self {
            tol: d.tol,
            max_iter: d.max_iter,
        }
    }
}

impl NewtonConfig {
    pub fn options(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OscillationConfig {
    pub stepper: StepperKind,
    pub dx_list: Vec<f64>,
    /// Oscillatory end of the bisection bracket.
    pub dt_hi: f64,
    /// Quiet end of the bracket; capped per grid at `dx² / 2δ`.
    pub dt_lo: f64,
    pub horizon: f64,
    pub rel_width: f64,
}

impl Default for OscillationConfig {
    fn default() -> Self {
        Self {
            stepper: StepperKind::CrankNicolsonSemiImplicit,
            dx_list: vec![0.05, 0.1, 0.5, 1.0],
            dt_hi: 2.0,
            dt_lo: 1e-3,
            horizon: 20.0,
            rel_width: 1e-2,
        }
    }
}

/// Initial-condition family swept by `basin-scan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasinFamily {
    /// `sin(kπx/L)` for each listed `k`.
    SineModes { modes: Vec<usize> },
    /// Polynomial fits of fixed degree through interior anchors at each height.
    AnchorHeights { degree: usize, heights: Vec<f64> },
}

impl BasinFamily {
    pub fn len(&self) -> usize {
        match self {
            BasinFamily::SineModes { modes } => modes.len(),
            BasinFamily::AnchorHeights { heights, .. } => heights.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The swept parameter of each member, in order.
    pub fn parameters(&self) -> Vec<f64> {
        match self {
            BasinFamily::SineModes { modes } => modes.iter().map(|&k| k as f64).collect(),
            BasinFamily::AnchorHeights { heights, .. } => heights.clone(),
        }
    }

    pub fn members(&self) -> Vec<InitialConditionSpec> {
        match self {
            BasinFamily::SineModes { modes } => modes
                .iter()
                .map(|&k| InitialConditionSpec::SineMode { k })
                .collect(),
            BasinFamily::AnchorHeights { degree, heights } => heights
                .iter()
                .map(|&c| InitialConditionSpec::PolynomialFit { degree: *degree, c })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasinConfig {
    pub family: BasinFamily,
    pub noise_floor: f64,
}

impl Default for BasinConfig {
    fn default() -> Self {
        Self {
            family: BasinFamily::AnchorHeights {
                degree: 2,
                heights: (-4..=8).map(|k| 0.25 * k as f64).collect(),
            },
            noise_floor: DEFAULT_NOISE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: OutputFormat,
    /// Write SVG plots next to the data files.
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("rdlab-out"),
            format: OutputFormat::Csv,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub initial: InitialConditionSpec,
    pub solve: SolveConfig,
    pub accuracy: AccuracyConfig,
    pub spectrum: SpectrumConfig,
    pub newton: NewtonConfig,
    pub oscillation: OscillationConfig,
    pub basin: BasinConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            initial: InitialConditionSpec::default_polynomial(),
            solve: SolveConfig::default(),
            accuracy: AccuracyConfig::default(),
            spectrum: SpectrumConfig::default(),
            newton: NewtonConfig::default(),
            oscillation: OscillationConfig::default(),
            basin: BasinConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn field_error(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config(format!("{field}: {}", message.into()))
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(field_error(
            field,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(field_error(
            field,
            format!("must be non-negative and finite, got {v}"),
        ))
    }
}

fn check_stepper(field: &str, kind: &StepperKind) -> Result<(), CliError> {
    if let StepperKind::Rosenbrock { rtol, atol, .. } = kind {
        positive(&format!("{field}.rtol"), *rtol)?;
        positive(&format!("{field}.atol"), *atol)?;
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses a TOML document. Syntax and type errors carry the line and
    /// column reported by the parser.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Replaces the seed of the perturbed initial condition.
    pub fn override_seed(&mut self, seed: u64) -> Result<(), CliError> {
        if !matches!(self.initial, InitialConditionSpec::Perturbed { .. }) {
            return Err(field_error(
                "initial",
                "--seed needs a `perturbed` initial condition to apply to",
            ));
        }
        self.initial = self.initial.with_seed(seed);
        Ok(())
    }

    /// The continuous problem on the configured grid.
    pub fn problem(&self) -> Result<RdProblem, CliError> {
        self.problem_with_dx(self.problem.dx)
    }

    pub fn problem_with_dx(&self, dx: f64) -> Result<RdProblem, CliError> {
        let c = &self.problem;
        let grid =
            Grid1D::new(c.length, dx).map_err(|e| field_error("problem.dx", e.to_string()))?;
        RdProblem::new(
            grid,
            DirichletBc { a: c.a, b: c.b },
            c.delta,
            c.reaction,
            c.frame_speed,
        )
        .map_err(|e| field_error("problem", e.to_string()))
    }

    /// Checks the fields the problem and initial condition depend on.
    pub fn validate_problem(&self) -> Result<RdProblem, CliError> {
        let c = &self.problem;
        positive("problem.length", c.length)?;
        positive("problem.dx", c.dx)?;
        positive("problem.delta", c.delta)?;
        non_negative("problem.frame_speed", c.frame_speed)?;
        let p = self.problem()?;
        rdlab::discretize::initial_condition(&p, &self.initial)
            .map_err(|e| field_error("initial", e.to_string()))?;
        Ok(p)
    }

    pub fn validate_solve(&self) -> Result<(), CliError> {
        let s = &self.solve;
        non_negative("solve.t_end", s.t_end)?;
        check_stepper("solve.stepper", &s.stepper)?;
        if s.stride == 0 {
            return Err(field_error("solve.stride", "must be at least 1"));
        }
        match (s.dt, s.stepper) {
            (Some(dt), _) => positive("solve.dt", dt),
            (None, StepperKind::Rosenbrock { adaptive: true, .. }) => Ok(()),
            (None, _) => Err(field_error("solve.dt", "required for fixed-step steppers")),
        }
    }

    pub fn validate_accuracy(&self) -> Result<(), CliError> {
        let a = &self.accuracy;
        positive("accuracy.t_end", a.t_end)?;
        check_stepper("accuracy.stepper", &a.stepper)?;
        if a.dt_list.is_empty() {
            return Err(field_error("accuracy.dt_list", "must not be empty"));
        }
        for (i, &dt) in a.dt_list.iter().enumerate() {
            positive(&format!("accuracy.dt_list[{i}]"), dt)?;
        }
        for (i, w) in a.dt_list.windows(2).enumerate() {
            if (w[1] - 0.5 * w[0]).abs() > 1e-12 * w[0] {
                return Err(field_error(
                    &format!("accuracy.dt_list[{}]", i + 1),
                    format!(
                        "each step must halve the previous one ({} after {})",
                        w[1], w[0]
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn validate_spectrum(&self) -> Result<(), CliError> {
        match (self.spectrum.dt, self.spectrum.state) {
            (Some(dt), _) => positive("spectrum.dt", dt)?,
            (None, SpectrumState::Solved) => {}
            (None, SpectrumState::Initial) => {
                return Err(field_error(
                    "spectrum.dt",
                    "required with state = \"initial\"",
                ))
            }
        }
        if self.spectrum.state == SpectrumState::Solved {
            self.validate_solve()?;
        }
        non_negative("spectrum.c", self.spectrum.c)?;
        check_stepper("spectrum.stepper", &self.spectrum.stepper)
    }

    pub fn validate_newton(&self) -> Result<(), CliError> {
        positive("newton.tol", self.newton.tol)?;
        if self.newton.max_iter == 0 {
            return Err(field_error("newton.max_iter", "must be at least 1"));
        }
        Ok(())
    }

    pub fn validate_oscillation(&self) -> Result<(), CliError> {
        let o = &self.oscillation;
        check_stepper("oscillation.stepper", &o.stepper)?;
        if o.dx_list.is_empty() {
            return Err(field_error("oscillation.dx_list", "must not be empty"));
        }
        for (i, &dx) in o.dx_list.iter().enumerate() {
            let field = format!("oscillation.dx_list[{i}]");
            positive(&field, dx)?;
            self.problem_with_dx(dx)
                .map_err(|e| field_error(&field, e.to_string()))?;
        }
        positive("oscillation.dt_hi", o.dt_hi)?;
        positive("oscillation.dt_lo", o.dt_lo)?;
        if o.dt_lo >= o.dt_hi {
            return Err(field_error("oscillation.dt_lo", "must be below dt_hi"));
        }
        positive("oscillation.horizon", o.horizon)?;
        positive("oscillation.rel_width", o.rel_width)
    }

    pub fn validate_basin(&self) -> Result<(), CliError> {
        if self.basin.family.is_empty() {
            return Err(field_error("basin.family", "must list at least one member"));
        }
        non_negative("basin.noise_floor", self.basin.noise_floor)?;
        self.validate_newton()
    }
}
