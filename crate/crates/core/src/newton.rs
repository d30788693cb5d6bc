//! Newton iteration for the discrete steady-state problem `0 = D U + B + R(U)`.

use crate::discretize::{
    build_operator, initial_condition, DiscretizeError, InitialConditionSpec, RdProblem,
};
use crate::linalg::{inf_norm, thomas_solve, LinalgError, TridiagonalMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ten machine epsilons.
pub const DEFAULT_TOL: f64 = 10.0 * f64::EPSILON;
pub const DEFAULT_MAX_ITER: usize = 50;
/// Iterates with a larger max norm abort the solve.
pub const DIVERGENCE_LIMIT: f64 = 1e8;
pub const DEFAULT_NOISE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NewtonError {
    #[error("singular Jacobian at iteration {iteration}: {source}")]
    SingularJacobian {
        iteration: usize,
        #[source]
        source: LinalgError,
    },
    #[error("Newton iterate diverged at iteration {iteration} (max norm {norm:e})")]
    Diverged { iteration: usize, norm: f64 },
    #[error("order estimates need positive errors, got {0:e}")]
    NonPositiveError(f64),
    #[error("invalid Newton request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NewtonError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// `p = ln ε_{i+1} / ln ε_i`. The rounded value is withheld while `ε_i ≥ 1`,
/// where the ratio of logarithms has no meaning as an order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderEstimate {
    pub raw: f64,
    pub rounded: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonTrace {
    /// `U⁽⁰⁾, U⁽¹⁾, …`
    pub iterates: Vec<Vec<f64>>,
    /// `errors[k] = ‖U⁽ᵏ⁺¹⁾ − U⁽ᵏ⁾‖∞`
    pub errors: Vec<f64>,
    /// One entry per consecutive pair of positive errors.
    pub order_estimates: Vec<OrderEstimate>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl NewtonTrace {
    pub fn solution(&self) -> &[f64] {
        self.iterates.last().expect("trace holds the initial guess")
    }
}

/// `G(U) = D U + B + R(U)`.
pub fn residual(p: &RdProblem, u: &[f64]) -> Result<Vec<f64>> {
    let op = build_operator(p)?;
    check_len(p, u)?;
    Ok(residual_with(p, &op.d, op.b.as_slice(), u))
}

fn residual_with(p: &RdProblem, d: &TridiagonalMatrix, b: &[f64], u: &[f64]) -> Vec<f64> {
    let mut g = d.mul_vec(u);
    for ((g, &v), b) in g.iter_mut().zip(u).zip(b) {
        *g += b + p.reaction.value(v);
    }
    g
}

/// `J = D + diag(R'(U))`.
pub fn jacobian(p: &RdProblem, u: &[f64]) -> Result<TridiagonalMatrix> {
    let op = build_operator(p)?;
    check_len(p, u)?;
    Ok(jacobian_with(p, &op.d, u))
}

fn jacobian_with(p: &RdProblem, d: &TridiagonalMatrix, u: &[f64]) -> TridiagonalMatrix {
    let extra: Vec<f64> = u.iter().map(|&v| p.reaction.derivative(v)).collect();
    d.add_diagonal(&extra)
}

fn check_len(p: &RdProblem, u: &[f64]) -> Result<()> {
    if u.len() != p.interior() {
        return Err(NewtonError::InvalidRequest(format!(
            "state has {} entries, grid has {} interior nodes",
            u.len(),
            p.interior()
        )));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(NewtonError::InvalidRequest("initial guess is not finite".into()));
    }
    Ok(())
}

/// Runs `U⁽ᵏ⁺¹⁾ = U⁽ᵏ⁾ − J⁻¹ G` until `‖ΔU‖∞ < tol` or `max_iter` updates.
///
/// Running out of iterations is not an error; the trace reports
/// `converged = false`.
pub fn newton_solve(p: &RdProblem, u0: &[f64], opts: &NewtonOptions) -> Result<NewtonTrace> {
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(NewtonError::InvalidRequest(
            "tol must be positive and max_iter at least 1".into(),
        ));
    }
    p.validate()?;
    check_len(p, u0)?;
    let op = build_operator(p)?;
    let b = op.b.as_slice();

    let mut iterates = vec![u0.to_vec()];
    let mut errors = Vec::new();
    let mut converged = false;
    let mut u = u0.to_vec();
    for iteration in 1..=opts.max_iter {
        let g = residual_with(p, &op.d, b, &u);
        let j = jacobian_with(p, &op.d, &u);
        let delta = thomas_solve(&j, &g)
            .map_err(|source| NewtonError::SingularJacobian { iteration, source })?;
        for (x, d) in u.iter_mut().zip(&delta) {
            *x -= d;
        }
        let norm = inf_norm(&u);
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(NewtonError::Diverged { iteration, norm });
        }
        let err = inf_norm(&delta);
        iterates.push(u.clone());
        errors.push(err);
        if err < opts.tol {
            converged = true;
            break;
        }
    }
    let positive = errors.iter().take_while(|e| **e > 0.0).count();
    let order_estimates = if positive >= 2 {
        order_of_convergence(&errors[..positive])?
    } else {
        Vec::new()
    };
    Ok(NewtonTrace {
        iterations_used: errors.len(),
        iterates,
        errors,
        order_estimates,
        converged,
    })
}

pub fn order_of_convergence(errors: &[f64]) -> Result<Vec<OrderEstimate>> {
    if errors.len() < 2 {
        return Err(NewtonError::InvalidRequest(
            "need at least two errors for an order estimate".into(),
        ));
    }
    if let Some(&bad) = errors.iter().find(|e| !(**e > 0.0)) {
        return Err(NewtonError::NonPositiveError(bad));
    }
    Ok(errors
        .windows(2)
        .map(|w| {
            let raw = w[1].ln() / w[0].ln();
            let rounded = (w[0] < 1.0 && raw.is_finite()).then(|| raw.round() as i64);
            OrderEstimate { raw, rounded }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteadyStateClass {
    pub extremum_count: usize,
    pub diverged: bool,
}

impl SteadyStateClass {
    pub fn diverged() -> Self {
        Self {
            extremum_count: 0,
            diverged: true,
        }
    }
}

/// Counts interior extrema: sign changes between successive first
/// differences, ignoring differences at or below `noise_floor`.
pub fn classify_steady_state(u: &[f64], noise_floor: f64) -> SteadyStateClass {
    let mut last_sign = 0.0;
    let mut count = 0;
    for w in u.windows(2) {
        let d = w[1] - w[0];
        if d.abs() <= noise_floor {
            continue;
        }
        let s = d.signum();
        if last_sign != 0.0 && s != last_sign {
            count += 1;
        }
        last_sign = s;
    }
    SteadyStateClass {
        extremum_count: count,
        diverged: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinEntry {
    pub index: usize,
    pub class: SteadyStateClass,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the solve failed or ran out of iterations.
    pub failure: Option<String>,
    pub solution: Option<Vec<f64>>,
}

/// Runs Newton from every initial condition in `family` and classifies the
/// result. Entries are independent and evaluated in parallel; the output
/// order matches `family`.
pub fn basin_scan(
    p: &RdProblem,
    family: &[InitialConditionSpec],
    opts: &NewtonOptions,
    noise_floor: f64,
) -> Result<Vec<BasinEntry>> {
    if family.is_empty() {
        return Err(NewtonError::InvalidRequest("empty initial-condition family".into()));
    }
    p.validate()?;
    Ok(family
        .par_iter()
        .enumerate()
        .map(|(index, spec)| basin_entry(p, index, spec, opts, noise_floor))
        .collect())
}

fn basin_entry(
    p: &RdProblem,
    index: usize,
    spec: &InitialConditionSpec,
    opts: &NewtonOptions,
    noise_floor: f64,
) -> BasinEntry {
    let failed = |failure: String, iterations| BasinEntry {
        index,
        class: SteadyStateClass::diverged(),
        converged: false,
        iterations,
        failure: Some(failure),
        solution: None,
    };
    let u0 = match initial_condition(p, spec) {
        Ok(u) => u,
        Err(e) => return failed(e.to_string(), 0),
    };
    match newton_solve(p, &u0, opts) {
        Ok(trace) if trace.converged => BasinEntry {
            index,
            class: classify_steady_state(trace.solution(), noise_floor),
            converged: true,
            iterations: trace.iterations_used,
            failure: None,
            solution: Some(trace.solution().to_vec()),
        },
        Ok(trace) => failed(
            format!("no convergence in {} iterations", trace.iterations_used),
            trace.iterations_used,
        ),
        Err(NewtonError::Diverged { iteration, norm }) => failed(
            NewtonError::Diverged { iteration, norm }.to_string(),
            iteration,
        ),
        Err(e) => failed(e.to_string(), 0),
    }
}
