//! Time integration of `dU/dt = D U + R(U) + B`.
//!
//! Five fixed-step schemes share the [`FixedStepper`] driver. Implicit solves
//! always go through [`thomas_solve`] on `I - θ dt D`; no inverse is formed.
//! The Rosenbrock integrator is the two-stage W-method pair used by MATLAB's
//! `ode23s` (γ = 1/(2+√2)), run either with a frozen step or with error control.

use crate::discretize::{build_operator, DiscreteOperator, RdProblem, DiscretizeError};
use crate::linalg::{inf_norm, thomas_solve, DenseMatrix, LinalgError, TridiagonalMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// States whose max norm exceeds this are reported as [`StepperError::BlowUp`].
pub const BLOW_UP_THRESHOLD: f64 = 1e12;

/// Tolerance for `t_end` being an integer multiple of `dt`.
pub const STEP_DIVISIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepperKind {
    ForwardEuler,
    BackwardEulerLinear,
    CrankNicolsonLinear,
    CrankNicolsonSemiImplicit,
    CrankNicolsonImprovedEuler,
    Rosenbrock { adaptive: bool, rtol: f64, atol: f64 },
}

impl StepperKind {
    /// Schemes that only make sense without a reaction term.
    pub fn is_linear_only(&self) -> bool {
        matches!(
            self,
            StepperKind::BackwardEulerLinear | StepperKind::CrankNicolsonLinear
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            StepperKind::ForwardEuler => "forward_euler",
            StepperKind::BackwardEulerLinear => "backward_euler_linear",
            StepperKind::CrankNicolsonLinear => "crank_nicolson_linear",
            StepperKind::CrankNicolsonSemiImplicit => "crank_nicolson_semi_implicit",
            StepperKind::CrankNicolsonImprovedEuler => "crank_nicolson_improved_euler",
            StepperKind::Rosenbrock { .. } => "rosenbrock",
        }
    }

    /// Rosenbrock with the step frozen at `dt`.
    pub fn rosenbrock_fixed() -> Self {
        StepperKind::Rosenbrock {
            adaptive: false,
            rtol: 1e-3,
            atol: 1e-6,
        }
    }

    pub fn rosenbrock_adaptive(rtol: f64, atol: f64) -> Self {
        StepperKind::Rosenbrock {
            adaptive: true,
            rtol,
            atol,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepperError {
    #[error("solution blew up at t = {time}: max norm {norm:e}")]
    BlowUp {
        time: f64,
        norm: f64,
        /// Trajectory up to the last finite, bounded state.
        partial: Option<Box<Trajectory>>,
    },
    #[error("{stepper} requires a problem without reaction term")]
    IncompatibleStepper { stepper: &'static str },
    #[error("{0} has no constant two-level matrix form")]
    Unsupported(&'static str),
    #[error("adaptive step size {dt:e} underflowed at t = {time}")]
    StepUnderflow {
        time: f64,
        dt: f64,
        /// Accepted steps up to the failure.
        partial: Option<Box<Trajectory>>,
    },
    #[error("invalid time stepping request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

pub type Result<T> = std::result::Result<T, StepperError>;

/// Time-ordered interior states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `step_sizes[k] = times[k + 1] - times[k]` as taken by the integrator.
    pub step_sizes: Vec<f64>,
}

impl StepperError {
    /// The trajectory computed before a blow-up or step-size underflow.
    pub fn partial_trajectory(&self) -> Option<&Trajectory> {
        match self {
            StepperError::BlowUp { partial, .. } | StepperError::StepUnderflow { partial, .. } => {
                partial.as_deref()
            }
            _ => None,
        }
    }
}

impl Trajectory {
    pub fn start(u0: Vec<f64>) -> Self {
        Self {
            times: vec![0.0],
            states: vec![u0],
            step_sizes: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, dt: f64, u: Vec<f64>) {
        self.times.push(t);
        self.step_sizes.push(dt);
        self.states.push(u);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    pub fn max_step(&self) -> Option<f64> {
        self.step_sizes.iter().copied().reduce(f64::max)
    }
}

/// `U^{n+1} = M U^n + N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelForm {
    pub m: DenseMatrix,
    pub n: Vec<f64>,
}

impl TwoLevelForm {
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = self.m.mul_vec(u);
        for (o, n) in out.iter_mut().zip(&self.n) {
            *o += n;
        }
        out
    }
}

/// The semidiscrete vector field of a problem.
#[derive(Debug, Clone)]
pub struct Semidiscrete {
    problem: RdProblem,
    op: DiscreteOperator,
}

impl Semidiscrete {
    pub fn new(problem: &RdProblem) -> Result<Self> {
        problem.validate()?;
        Ok(Self {
            op: build_operator(problem)?,
            problem: problem.clone(),
        })
    }

    pub fn problem(&self) -> &RdProblem {
        &self.problem
    }

    pub fn operator(&self) -> &DiscreteOperator {
        &self.op
    }

    pub fn dim(&self) -> usize {
        self.op.d.dim()
    }

    /// `D u + R(u) + B`.
    pub fn rhs(&self, u: &[f64]) -> Vec<f64> {
        let r = &self.problem.reaction;
        let mut out = self.op.d.mul_vec(u);
        for ((o, &v), b) in out.iter_mut().zip(u).zip(self.op.b.as_slice()) {
            *o += r.value(v) + b;
        }
        out
    }

    /// `D + diag(R'(u))`.
    pub fn jacobian(&self, u: &[f64]) -> TridiagonalMatrix {
        let r = &self.problem.reaction;
        let extra: Vec<f64> = u.iter().map(|&v| r.derivative(v)).collect();
        self.op.d.add_diagonal(&extra)
    }

    fn secant(&self, u: &[f64]) -> Vec<f64> {
        let r = &self.problem.reaction;
        u.iter().map(|&v| r.secant_coefficient(v)).collect()
    }

    /// One step of the `ode23s` Rosenbrock pair: second-order update plus the
    /// max-norm of the embedded error estimate.
    pub fn rosenbrock(&self, u: &[f64], h: f64) -> Result<(Vec<f64>, f64)> {
        let gamma = 1.0 / (2.0 + std::f64::consts::SQRT_2);
        let e32 = 6.0 + std::f64::consts::SQRT_2;
        let w = self.jacobian(u).scaled_shift(1.0, -h * gamma);

        let f0 = self.rhs(u);
        let k1 = thomas_solve(&w, &f0)?;

        let mid: Vec<f64> = u.iter().zip(&k1).map(|(y, k)| y + 0.5 * h * k).collect();
        let f1 = self.rhs(&mid);
        let rhs2: Vec<f64> = f1.iter().zip(&k1).map(|(f, k)| f - k).collect();
        let k2: Vec<f64> = thomas_solve(&w, &rhs2)?
            .into_iter()
            .zip(&k1)
            .map(|(s, k)| s + k)
            .collect();

        let u_new: Vec<f64> = u.iter().zip(&k2).map(|(y, k)| y + h * k).collect();
        let f2 = self.rhs(&u_new);
        let rhs3: Vec<f64> = (0..u.len())
            .map(|i| f2[i] - e32 * (k2[i] - f1[i]) - 2.0 * (k1[i] - f0[i]))
            .collect();
        let k3 = thomas_solve(&w, &rhs3)?;

        let err = (0..u.len())
            .map(|i| (h / 6.0 * (k1[i] - 2.0 * k2[i] + k3[i])).abs())
            .fold(0.0, f64::max);
        Ok((u_new, err))
    }
}

fn check_state(u: &[f64], time: f64) -> Result<()> {
    let norm = inf_norm(u);
    if !norm.is_finite() || norm > BLOW_UP_THRESHOLD || u.iter().any(|v| !v.is_finite()) {
        return Err(StepperError::BlowUp {
            time,
            norm,
            partial: None,
        });
    }
    Ok(())
}

fn check_compatible(kind: &StepperKind, p: &RdProblem) -> Result<()> {
    if kind.is_linear_only() && !p.reaction.is_linear() {
        return Err(StepperError::IncompatibleStepper {
            stepper: kind.name(),
        });
    }
    Ok(())
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(StepperError::InvalidRequest(format!(
            "time step must be positive, got {dt}"
        )));
    }
    Ok(())
}

fn check_len(u: &[f64], m: usize) -> Result<()> {
    if u.len() != m {
        return Err(StepperError::InvalidRequest(format!(
            "state has {} entries, grid has {m} interior nodes",
            u.len()
        )));
    }
    Ok(())
}

/// A scheme bound to one problem and one step size, with its implicit
/// matrices prebuilt.
#[derive(Debug, Clone)]
pub struct FixedStepper {
    kind: StepperKind,
    sys: Semidiscrete,
    dt: f64,
    /// `I - θ dt D` for the implicit schemes.
    implicit: Option<TridiagonalMatrix>,
    /// `I + dt/2 D` for the Crank-Nicolson family.
    explicit_half: Option<TridiagonalMatrix>,
}

impl FixedStepper {
    pub fn new(kind: StepperKind, p: &RdProblem, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        check_compatible(&kind, p)?;
        let sys = Semidiscrete::new(p)?;
        let d = &sys.op.d;
        let (implicit, explicit_half) = match kind {
            StepperKind::BackwardEulerLinear => (Some(d.scaled_shift(1.0, -dt)), None),
            StepperKind::CrankNicolsonLinear | StepperKind::CrankNicolsonSemiImplicit => (
                Some(d.scaled_shift(1.0, -0.5 * dt)),
                Some(d.scaled_shift(1.0, 0.5 * dt)),
            ),
            _ => (None, None),
        };
        Ok(Self {
            kind,
            sys,
            dt,
            implicit,
            explicit_half,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn kind(&self) -> StepperKind {
        self.kind
    }

    pub fn system(&self) -> &Semidiscrete {
        &self.sys
    }

    /// Advances one step without the blow-up check.
    fn advance(&self, u: &[f64]) -> Result<Vec<f64>> {
        let dt = self.dt;
        let b = self.sys.op.b.as_slice();
        let r = &self.sys.problem.reaction;
        match self.kind {
            StepperKind::ForwardEuler => {
                let f = self.sys.rhs(u);
                Ok(u.iter().zip(&f).map(|(y, f)| y + dt * f).collect())
            }
            StepperKind::BackwardEulerLinear => {
                let rhs: Vec<f64> = u.iter().zip(b).map(|(y, b)| y + dt * b).collect();
                Ok(thomas_solve(self.implicit.as_ref().unwrap(), &rhs)?)
            }
            StepperKind::CrankNicolsonLinear | StepperKind::CrankNicolsonSemiImplicit => {
                let mut rhs = self.explicit_half.as_ref().unwrap().mul_vec(u);
                for ((o, &y), b) in rhs.iter_mut().zip(u).zip(b) {
                    *o += dt * (r.value(y) + b);
                }
                Ok(thomas_solve(self.implicit.as_ref().unwrap(), &rhs)?)
            }
            StepperKind::CrankNicolsonImprovedEuler => {
                let f0 = self.sys.rhs(u);
                let predictor: Vec<f64> = u.iter().zip(&f0).map(|(y, f)| y + dt * f).collect();
                let d = &self.sys.op.d;
                let sum: Vec<f64> = u.iter().zip(&predictor).map(|(a, b)| a + b).collect();
                let dsum = d.mul_vec(&sum);
                Ok((0..u.len())
                    .map(|i| {
                        u[i] + 0.5 * dt * dsum[i]
                            + 0.5 * dt * (r.value(u[i]) + r.value(predictor[i]))
                            + dt * b[i]
                    })
                    .collect())
            }
            StepperKind::Rosenbrock { .. } => Ok(self.sys.rosenbrock(u, dt)?.0),
        }
    }

    pub fn step(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len(u, self.sys.dim())?;
        let next = self.advance(u)?;
        check_state(&next, f64::NAN)?;
        Ok(next)
    }

    /// Runs `steps` steps, recording every state.
    pub fn run(&self, u0: &[f64], steps: usize) -> Result<Trajectory> {
        let mut traj = Trajectory::start(u0.to_vec());
        self.run_with(u0, steps, |t, dt, u| traj.push(t, dt, u.to_vec()))
            .map_err(|e| attach_partial(e, &traj))?;
        Ok(traj)
    }

    /// Runs `steps` steps, handing each new state to `observe` instead of
    /// storing it. Returns the final state.
    pub fn run_with<F>(&self, u0: &[f64], steps: usize, mut observe: F) -> Result<Vec<f64>>
    where
        F: FnMut(f64, f64, &[f64]),
    {
        check_len(u0, self.sys.dim())?;
        let mut u = u0.to_vec();
        for n in 1..=steps {
            let t = n as f64 * self.dt;
            let next = self.advance(&u)?;
            check_state(&next, t)?;
            observe(t, self.dt, &next);
            u = next;
        }
        Ok(u)
    }
}

fn attach_partial(err: StepperError, traj: &Trajectory) -> StepperError {
    match err {
        StepperError::BlowUp { time, norm, .. } => StepperError::BlowUp {
            time,
            norm,
            partial: Some(Box::new(traj.clone())),
        },
        other => other,
    }
}

/// One step of `kind` from `u`.
pub fn step(kind: StepperKind, p: &RdProblem, u: &[f64], dt: f64) -> Result<Vec<f64>> {
    FixedStepper::new(kind, p, dt)?.step(u)
}

/// One frozen-step Rosenbrock update and its error estimate.
pub fn rosenbrock_step(p: &RdProblem, u: &[f64], dt: f64) -> Result<(Vec<f64>, f64)> {
    check_dt(dt)?;
    let sys = Semidiscrete::new(p)?;
    check_len(u, sys.dim())?;
    let (next, err) = sys.rosenbrock(u, dt)?;
    check_state(&next, dt)?;
    Ok((next, err))
}

/// Number of fixed steps of size `dt` that reach `t_end`.
pub fn step_count(dt: f64, t_end: f64) -> Result<usize> {
    check_dt(dt)?;
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(StepperError::InvalidRequest(format!(
            "end time must be non-negative, got {t_end}"
        )));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > STEP_DIVISIBILITY_TOL * t_end.max(1.0) {
        return Err(StepperError::InvalidRequest(format!(
            "dt = {dt} does not divide t_end = {t_end}"
        )));
    }
    Ok(n as usize)
}

/// Integrates from `t = 0` to `t_end`.
///
/// Fixed-step kinds need `dt` to divide `t_end`. For adaptive Rosenbrock `dt`
/// is only the initial step guess.
pub fn evolve(
    kind: StepperKind,
    p: &RdProblem,
    u0: &[f64],
    dt: f64,
    t_end: f64,
) -> Result<Trajectory> {
    if let StepperKind::Rosenbrock {
        adaptive: true,
        rtol,
        atol,
    } = kind
    {
        let opts = AdaptiveOptions {
            initial_step: Some(dt),
            ..AdaptiveOptions::new(rtol, atol)
        };
        return adaptive_evolve(p, u0, &opts, t_end);
    }
    let steps = step_count(dt, t_end)?;
    let stepper = FixedStepper::new(kind, p, dt)?;
    let mut traj = stepper.run(u0, steps)?;
    if let Some(last) = traj.times.last_mut() {
        if steps > 0 {
            *last = t_end;
        }
    }
    Ok(traj)
}

/// Fixed-step integration for a given number of steps.
pub fn evolve_steps(
    kind: StepperKind,
    p: &RdProblem,
    u0: &[f64],
    dt: f64,
    steps: usize,
) -> Result<Trajectory> {
    FixedStepper::new(kind, p, dt)?.run(u0, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Largest step allowed; defaults to a tenth of the time span.
    pub max_step: Option<f64>,
    pub initial_step: Option<f64>,
}

impl AdaptiveOptions {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            max_step: None,
            initial_step: None,
        }
    }
}

/// Error-controlled Rosenbrock integration.
///
/// A step is accepted when its error estimate is at most
/// `atol + rtol * ‖U‖∞`; the next step is scaled by `0.8 (tol/err)^(1/3)`
/// clamped to `[0.2, 5]`. Only accepted steps are recorded.
pub fn adaptive_evolve(
    p: &RdProblem,
    u0: &[f64],
    opts: &AdaptiveOptions,
    t_end: f64,
) -> Result<Trajectory> {
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(StepperError::InvalidRequest(
            "rtol and atol must be positive".into(),
        ));
    }
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(StepperError::InvalidRequest(format!(
            "end time must be non-negative, got {t_end}"
        )));
    }
    let sys = Semidiscrete::new(p)?;
    check_len(u0, sys.dim())?;
    let mut traj = Trajectory::start(u0.to_vec());
    if t_end == 0.0 {
        return Ok(traj);
    }
    let max_step = opts.max_step.unwrap_or(t_end / 10.0).min(t_end);
    let min_step = 1e-14 * t_end;

    let mut u = u0.to_vec();
    let mut t = 0.0;
    let mut h = match opts.initial_step {
        Some(h0) if h0 > 0.0 => h0.min(max_step),
        _ => initial_step_guess(&sys, &u, opts, max_step),
    };
    let mut just_rejected = false;
    while t < t_end {
        if h < min_step {
            return Err(StepperError::StepUnderflow {
                time: t,
                dt: h,
                partial: Some(Box::new(traj)),
            });
        }
        let remaining = t_end - t;
        let last = h >= remaining * (1.0 - 1e-12);
        let h_try = if last { remaining } else { h };

        let (next, err) = match sys.rosenbrock(&u, h_try) {
            Ok(v) => v,
            Err(StepperError::Linalg(LinalgError::ZeroPivot { .. })) => {
                h *= 0.2;
                just_rejected = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        let finite = next.iter().all(|v| v.is_finite()) && err.is_finite();
        let tol = opts.atol + opts.rtol * inf_norm(&u).max(inf_norm(&next));
        if !finite || err > tol {
            let factor = if finite {
                (0.8 * (tol / err).cbrt()).clamp(0.2, 1.0)
            } else {
                0.2
            };
            h = h_try * factor;
            just_rejected = true;
            continue;
        }
        let t_new = if last { t_end } else { t + h_try };
        if let Err(e) = check_state(&next, t_new) {
            return Err(attach_partial(e, &traj));
        }
        traj.push(t_new, h_try, next.clone());
        u = next;
        t = t_new;

        let mut factor = if err == 0.0 {
            5.0
        } else {
            (0.8 * (tol / err).cbrt()).clamp(0.2, 5.0)
        };
        if just_rejected {
            factor = factor.min(1.0);
        }
        just_rejected = false;
        h = (h_try * factor).min(max_step);
    }
    Ok(traj)
}

fn initial_step_guess(sys: &Semidiscrete, u: &[f64], opts: &AdaptiveOptions, max_step: f64) -> f64 {
    let f0 = sys.rhs(u);
    let threshold = opts.atol / opts.rtol;
    let rh = f0
        .iter()
        .zip(u)
        .map(|(f, y)| (f / y.abs().max(threshold)).abs())
        .fold(0.0, f64::max)
        * 1.25
        / opts.rtol.cbrt();
    if max_step * rh > 1.0 {
        1.0 / rh
    } else {
        max_step
    }
}

/// Assembles `M` and `N` with `step(U) = M U + N` at `u_current`.
pub fn two_level_form(
    kind: StepperKind,
    p: &RdProblem,
    u_current: &[f64],
    dt: f64,
) -> Result<TwoLevelForm> {
    if matches!(kind, StepperKind::Rosenbrock { .. }) {
        return Err(StepperError::Unsupported("rosenbrock"));
    }
    let stepper = FixedStepper::new(kind, p, dt)?;
    let sys = &stepper.sys;
    check_len(u_current, sys.dim())?;
    let m = sys.dim();
    let d = &sys.op.d;
    let b = sys.op.b.as_slice();

    let unit = |j: usize| {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        e
    };

    match kind {
        StepperKind::ForwardEuler => {
            let q: Vec<f64> = sys.secant(u_current).iter().map(|v| dt * v).collect();
            let mat = d.scaled_shift(1.0, dt).add_diagonal(&q).to_dense();
            Ok(TwoLevelForm {
                m: mat,
                n: b.iter().map(|v| dt * v).collect(),
            })
        }
        StepperKind::BackwardEulerLinear => {
            let a = stepper.implicit.as_ref().unwrap();
            let cols = (0..m)
                .map(|j| thomas_solve(a, &unit(j)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n = thomas_solve(a, b)?.into_iter().map(|v| dt * v).collect();
            Ok(TwoLevelForm {
                m: DenseMatrix::from_columns(&cols)?,
                n,
            })
        }
        StepperKind::CrankNicolsonLinear | StepperKind::CrankNicolsonSemiImplicit => {
            let a = stepper.implicit.as_ref().unwrap();
            let q: Vec<f64> = sys.secant(u_current).iter().map(|v| dt * v).collect();
            let explicit = stepper.explicit_half.as_ref().unwrap().add_diagonal(&q);
            let cols = (0..m)
                .map(|j| thomas_solve(a, &explicit.mul_vec(&unit(j))))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n = thomas_solve(a, b)?.into_iter().map(|v| dt * v).collect();
            Ok(TwoLevelForm {
                m: DenseMatrix::from_columns(&cols)?,
                n,
            })
        }
        StepperKind::CrankNicolsonImprovedEuler => {
            // U* = M_fe U + dt B, and
            // U' = [I + dt/2 (D + Q(U))] U + dt/2 (D + Q(U*)) U* + dt B.
            let q_now: Vec<f64> = sys.secant(u_current);
            let fe = d
                .scaled_shift(1.0, dt)
                .add_diagonal(&q_now.iter().map(|v| dt * v).collect::<Vec<_>>());
            let predictor = {
                let mut v = fe.mul_vec(u_current);
                for (o, b) in v.iter_mut().zip(b) {
                    *o += dt * b;
                }
                v
            };
            let q_pred = sys.secant(&predictor);
            let first = d
                .scaled_shift(1.0, 0.5 * dt)
                .add_diagonal(&q_now.iter().map(|v| 0.5 * dt * v).collect::<Vec<_>>());
            let second = d
                .scaled_shift(0.0, 0.5 * dt)
                .add_diagonal(&q_pred.iter().map(|v| 0.5 * dt * v).collect::<Vec<_>>());
            let cols: Vec<Vec<f64>> = (0..m)
                .map(|j| {
                    let e = unit(j);
                    let mut col = first.mul_vec(&e);
                    for (c, s) in col.iter_mut().zip(second.mul_vec(&fe.mul_vec(&e))) {
                        *c += s;
                    }
                    col
                })
                .collect();
            let dtb: Vec<f64> = b.iter().map(|v| dt * v).collect();
            let n = second
                .mul_vec(&dtb)
                .into_iter()
                .zip(&dtb)
                .map(|(s, b)| s + b)
                .collect();
            Ok(TwoLevelForm {
                m: DenseMatrix::from_columns(&cols)?,
                n,
            })
        }
        StepperKind::Rosenbrock { .. } => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{
        initial_condition, linear_profile, DirichletBc, Grid1D, InitialConditionSpec,
        ReactionSpec,
    };

    const FIXED: [StepperKind; 5] = [
        StepperKind::ForwardEuler,
        StepperKind::BackwardEulerLinear,
        StepperKind::CrankNicolsonLinear,
        StepperKind::CrankNicolsonSemiImplicit,
        StepperKind::CrankNicolsonImprovedEuler,
    ];

    fn small(reaction: ReactionSpec, a: f64, b: f64) -> RdProblem {
        RdProblem::new(
            Grid1D::new(10.0, 0.5).unwrap(),
            DirichletBc { a, b },
            1.0,
            reaction,
            0.0,
        )
        .unwrap()
    }

    fn pseudo_random(m: usize, seed: u64) -> Vec<f64> {
        crate::discretize::normal_stream(seed).take(m).collect()
    }

    #[test]
    fn forward_euler_keeps_line() {
        let p = RdProblem::test_defaults();
        let f = linear_profile(&p);
        let next = step(StepperKind::ForwardEuler, &p, &f, 1e-3).unwrap();
        for (a, b) in next.iter().zip(&f) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn linear_only_schemes_reject_reaction() {
        let p = RdProblem::fisher_defaults();
        let u = vec![0.5; p.interior()];
        for kind in [StepperKind::BackwardEulerLinear, StepperKind::CrankNicolsonLinear] {
            assert!(matches!(
                step(kind, &p, &u, 0.1),
                Err(StepperError::IncompatibleStepper { .. })
            ));
        }
    }

    #[test]
    fn zero_end_time_gives_single_state() {
        let p = RdProblem::test_defaults();
        let u0 = linear_profile(&p);
        for kind in FIXED.iter().copied().chain([StepperKind::rosenbrock_adaptive(1e-6, 1e-8)]) {
            let t = evolve(kind, &p, &u0, 0.1, 0.0).unwrap();
            assert_eq!(t.len(), 1);
            assert_eq!(t.times, vec![0.0]);
        }
    }

    #[test]
    fn dt_must_divide_t_end() {
        let p = RdProblem::test_defaults();
        let u0 = linear_profile(&p);
        assert!(matches!(
            evolve(StepperKind::CrankNicolsonLinear, &p, &u0, 0.3, 1.0),
            Err(StepperError::InvalidRequest(_))
        ));
        assert!(evolve(StepperKind::CrankNicolsonLinear, &p, &u0, 0.1, 1.0).is_ok());
    }

    #[test]
    fn two_level_matches_step_linear() {
        let p = small(ReactionSpec::None, 0.3, -1.2);
        let u = pseudo_random(p.interior(), 3);
        for kind in FIXED {
            let dt = 0.05;
            let form = two_level_form(kind, &p, &u, dt).unwrap();
            for seed in 0..3 {
                let v = pseudo_random(p.interior(), 10 + seed);
                let direct = step(kind, &p, &v, dt).unwrap();
                let via = form.apply(&v);
                for (a, b) in direct.iter().zip(&via) {
                    assert!((a - b).abs() <= 1e-12, "{kind:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn two_level_matches_step_at_linearization_state() {
        let p = small(ReactionSpec::Logistic { rho: 1.0 }, 0.0, 1.0);
        let u: Vec<f64> = pseudo_random(p.interior(), 5)
            .iter()
            .map(|v| 0.5 + 0.2 * v)
            .collect();
        for kind in [
            StepperKind::ForwardEuler,
            StepperKind::CrankNicolsonSemiImplicit,
            StepperKind::CrankNicolsonImprovedEuler,
        ] {
            let form = two_level_form(kind, &p, &u, 0.05).unwrap();
            let direct = step(kind, &p, &u, 0.05).unwrap();
            for (a, b) in direct.iter().zip(form.apply(&u)) {
                assert!((a - b).abs() <= 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn forward_euler_matrix_is_identity_plus_dt_d() {
        let p = small(ReactionSpec::None, 0.0, 1.0);
        let dt = 0.01;
        let form = two_level_form(StepperKind::ForwardEuler, &p, &vec![0.0; p.interior()], dt)
            .unwrap();
        let op = build_operator(&p).unwrap();
        let expected = op.d.scaled_shift(1.0, dt).to_dense();
        assert_eq!(form.m, expected);
        for (n, b) in form.n.iter().zip(op.b.as_slice()) {
            assert_eq!(*n, dt * b);
        }
    }

    #[test]
    fn semi_implicit_at_one_equals_linear_cn() {
        let p = small(ReactionSpec::Logistic { rho: 1.0 }, 1.0, 1.0);
        let lin = small(ReactionSpec::None, 1.0, 1.0);
        let ones = vec![1.0; p.interior()];
        let a = two_level_form(StepperKind::CrankNicolsonSemiImplicit, &p, &ones, 0.2).unwrap();
        let b = two_level_form(StepperKind::CrankNicolsonLinear, &lin, &ones, 0.2).unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(a.n, b.n);
    }

    #[test]
    fn rosenbrock_has_no_two_level_form() {
        let p = RdProblem::test_defaults();
        let u = linear_profile(&p);
        assert!(matches!(
            two_level_form(StepperKind::rosenbrock_fixed(), &p, &u, 0.1),
            Err(StepperError::Unsupported(_))
        ));
    }

    #[test]
    fn equilibrium_zero_is_fixed_by_every_scheme() {
        let p = small(ReactionSpec::Logistic { rho: 1.0 }, 0.0, 0.0);
        let zero = vec![0.0; p.interior()];
        for kind in [
            StepperKind::ForwardEuler,
            StepperKind::CrankNicolsonSemiImplicit,
            StepperKind::CrankNicolsonImprovedEuler,
            StepperKind::rosenbrock_fixed(),
        ] {
            assert_eq!(step(kind, &p, &zero, 0.1).unwrap(), zero, "{kind:?}");
        }
    }

    #[test]
    fn affine_for_linear_problem() {
        let p = small(ReactionSpec::None, 0.4, 0.9);
        let u1 = pseudo_random(p.interior(), 1);
        let u2 = pseudo_random(p.interior(), 2);
        let alpha = 0.3;
        let mix: Vec<f64> = u1
            .iter()
            .zip(&u2)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        for kind in FIXED {
            let s1 = step(kind, &p, &u1, 0.05).unwrap();
            let s2 = step(kind, &p, &u2, 0.05).unwrap();
            let sm = step(kind, &p, &mix, 0.05).unwrap();
            for i in 0..sm.len() {
                let combo = alpha * s1[i] + (1.0 - alpha) * s2[i];
                assert!((sm[i] - combo).abs() <= 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn schemes_agree_to_first_order_in_one_step() {
        let p = small(ReactionSpec::None, 0.0, 1.0);
        let u = initial_condition(&p, &InitialConditionSpec::SineMode { k: 1 }).unwrap();
        let spread = |dt: f64| {
            let outs: Vec<Vec<f64>> = FIXED.iter().map(|k| step(*k, &p, &u, dt).unwrap()).collect();
            let mut worst: f64 = 0.0;
            for a in &outs {
                for b in &outs {
                    worst = worst.max(crate::linalg::inf_norm_diff(a, b));
                }
            }
            worst
        };
        let ratio = spread(1e-2) / spread(1e-3);
        assert!((ratio - 100.0).abs() < 10.0, "ratio {ratio}");
    }

    #[test]
    fn rosenbrock_zero_field() {
        // tiny diffusion and zero data: the field vanishes on U = 0
        let p = small(ReactionSpec::None, 0.0, 0.0);
        let zero = vec![0.0; p.interior()];
        let (next, err) = rosenbrock_step(&p, &zero, 0.5).unwrap();
        assert_eq!(next, zero);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn blow_up_is_reported_with_partial_trajectory() {
        let p = RdProblem::test_defaults();
        let u0 = initial_condition(&p, &InitialConditionSpec::SineMode { k: 1 }).unwrap();
        let dt = 0.51 * 0.05 * 0.05;
        match evolve_steps(StepperKind::ForwardEuler, &p, &u0, dt, 5000) {
            Err(StepperError::BlowUp { partial: Some(t), .. }) => {
                assert!(t.len() > 1);
                assert!(t.states.iter().all(|s| inf_norm(s) <= BLOW_UP_THRESHOLD));
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn adaptive_run_is_deterministic() {
        let p = RdProblem::fisher_defaults();
        let u0 = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        let opts = AdaptiveOptions::new(1e-4, 1e-7);
        let a = adaptive_evolve(&p, &u0, &opts, 5.0).unwrap();
        let b = adaptive_evolve(&p, &u0, &opts, 5.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.final_time(), 5.0);
        assert!(a.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn adaptive_rejects_bad_tolerances() {
        let p = RdProblem::test_defaults();
        let u0 = linear_profile(&p);
        assert!(adaptive_evolve(&p, &u0, &AdaptiveOptions::new(0.0, 1e-6), 1.0).is_err());
    }

    /// Sine modes are eigenvectors of D under homogeneous data, so every
    /// linear scheme multiplies them by a known scalar.
    fn sine_setup(k: usize) -> (RdProblem, Vec<f64>, f64) {
        let p = small(ReactionSpec::None, 0.0, 0.0);
        let m = p.interior() as f64;
        let kd = p.delta / (p.grid.dx() * p.grid.dx());
        let lambda = kd * (-2.0 + 2.0 * (k as f64 * std::f64::consts::PI / (m + 1.0)).cos());
        let v = initial_condition(&p, &InitialConditionSpec::SineMode { k }).unwrap();
        (p, v, lambda)
    }

    #[test]
    fn sine_mode_amplification_factors() {
        for k in [1, 4, 11] {
            let (p, v, lam) = sine_setup(k);
            let dt = 0.07;
            let z = lam * dt;
            let cases = [
                (StepperKind::ForwardEuler, 1.0 + z),
                (StepperKind::BackwardEulerLinear, 1.0 / (1.0 - z)),
                (StepperKind::CrankNicolsonLinear, (1.0 + z / 2.0) / (1.0 - z / 2.0)),
                (StepperKind::CrankNicolsonSemiImplicit, (1.0 + z / 2.0) / (1.0 - z / 2.0)),
                (StepperKind::CrankNicolsonImprovedEuler, 1.0 + z + z * z / 2.0),
            ];
            for (kind, g) in cases {
                let next = step(kind, &p, &v, dt).unwrap();
                for (a, b) in next.iter().zip(&v) {
                    assert!((a - g * b).abs() <= 1e-12, "{kind:?} k={k}");
                }
            }
        }
    }

    #[test]
    fn crank_nicolson_converges_to_exponential_at_second_order() {
        let (p, v, lam) = sine_setup(2);
        let t_end = 1.0;
        let exact: Vec<f64> = v.iter().map(|x| x * (lam * t_end).exp()).collect();
        let err = |dt: f64| {
            let t = evolve(StepperKind::CrankNicolsonLinear, &p, &v, dt, t_end).unwrap();
            crate::linalg::inf_norm_diff(t.final_state(), &exact)
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn rosenbrock_local_error_is_third_order() {
        let (p, v, lam) = sine_setup(1);
        let local = |h: f64| {
            let (next, _) = rosenbrock_step(&p, &v, h).unwrap();
            let exact: Vec<f64> = v.iter().map(|x| x * (lam * h).exp()).collect();
            crate::linalg::inf_norm_diff(&next, &exact)
        };
        let ratio = local(0.2) / local(0.1);
        assert!((ratio - 8.0).abs() < 0.8, "ratio {ratio}");
    }

    #[test]
    fn rosenbrock_error_estimate_shrinks_with_step() {
        let p = small(ReactionSpec::Logistic { rho: 1.0 }, 0.0, 1.0);
        let u = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        let (_, e1) = rosenbrock_step(&p, &u, 0.2).unwrap();
        let (_, e2) = rosenbrock_step(&p, &u, 0.1).unwrap();
        assert!(e2 < e1 && e1 > 0.0);
    }

    /// Exact semidiscrete solution of the Test problem: f∞ plus the sine
    /// expansion of `u0 − f∞`, each mode decaying with its own eigenvalue.
    fn test_exact(p: &RdProblem, u0: &[f64], t: f64) -> Vec<f64> {
        let line = linear_profile(p);
        let m = p.interior();
        let h = std::f64::consts::PI / (m + 1) as f64;
        let kd = p.delta / (p.grid.dx() * p.grid.dx());
        let mut out = line.clone();
        for k in 1..=m {
            let v: Vec<f64> = (1..=m).map(|j| ((k * j) as f64 * h).sin()).collect();
            let coef: f64 = (0..m).map(|j| (u0[j] - line[j]) * v[j]).sum::<f64>() * 2.0
                / (m + 1) as f64;
            let lambda = kd * (-2.0 + 2.0 * (k as f64 * h).cos());
            for j in 0..m {
                out[j] += coef * (lambda * t).exp() * v[j];
            }
        }
        out
    }

    #[test]
    fn adaptive_test_equation_follows_exact_decay() {
        let p = RdProblem::test_defaults();
        let u0 = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        let traj = adaptive_evolve(&p, &u0, &AdaptiveOptions::new(1e-6, 1e-6), 60.0).unwrap();
        let exact = test_exact(&p, &u0, 60.0);
        assert!(crate::linalg::inf_norm_diff(traj.final_state(), &exact) < 2e-5);
        // the slowest mode is still ~4.6e-4 away from the line at t = 60
        let long = adaptive_evolve(&p, &u0, &AdaptiveOptions::new(1e-6, 1e-6), 150.0).unwrap();
        assert!(crate::linalg::inf_norm_diff(long.final_state(), &linear_profile(&p)) < 1e-4);
    }

    #[test]
    fn stable_steppers_reach_the_line() {
        let p = RdProblem::test_defaults();
        let u0 = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        let line = linear_profile(&p);
        for kind in [
            StepperKind::BackwardEulerLinear,
            StepperKind::CrankNicolsonLinear,
            StepperKind::CrankNicolsonSemiImplicit,
            StepperKind::rosenbrock_fixed(),
        ] {
            let t = evolve(kind, &p, &u0, 0.5, 250.0).unwrap();
            assert!(crate::linalg::inf_norm_diff(t.final_state(), &line) <= 1e-6, "{kind:?}");
        }
    }

    #[test]
    fn adaptive_steps_grow_to_cap_near_steady_state() {
        let p = RdProblem::fisher_defaults();
        let u0 = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        let traj = adaptive_evolve(&p, &u0, &AdaptiveOptions::new(1e-3, 1e-6), 60.0).unwrap();
        let cap = 6.0;
        let first_cap = traj.step_sizes.iter().position(|&h| h == cap).expect("cap reached");
        let tail = &traj.step_sizes[first_cap.saturating_sub(5)..traj.step_sizes.len() - 1];
        assert!(tail.windows(2).all(|w| w[1] >= w[0]), "{tail:?}");
        assert!(traj.step_sizes.iter().all(|&h| h <= cap));
    }

    #[test]
    fn underflow_keeps_accepted_steps() {
        // a negative dip makes the logistic term blow up in finite time
        let p = RdProblem::fisher_defaults();
        let u0 = vec![-2.0; p.interior()];
        let err = adaptive_evolve(&p, &u0, &AdaptiveOptions::new(1e-3, 1e-6), 50.0).unwrap_err();
        let partial = err.partial_trajectory().expect("partial trajectory");
        assert!(partial.len() > 1);
        assert!(inf_norm(partial.final_state()) > 100.0);
    }
}
