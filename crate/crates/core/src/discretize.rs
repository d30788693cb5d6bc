//! Grids, discrete operators, reaction terms and initial profiles.
//!
//! A problem `u_t = δ u_xx + c u_x + R(u)` on `[0, L]` with Dirichlet data is
//! reduced by centred differences to the semidiscrete system
//! `dU/dt = D U + R(U) + B` on the interior nodes `x_m = m dx`.

use crate::linalg::{LinalgError, TridiagonalMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizeError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid initial condition: {0}")]
    InvalidInitialCondition(String),
    #[error("polynomial degree {degree} needs more points than the {available} grid nodes")]
    DegreeTooHigh { degree: usize, available: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DiscretizeError>;

/// Uniform grid on `[0, L]`; only interior nodes carry unknowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    length: f64,
    dx: f64,
    interior: usize,
}

impl Grid1D {
    pub fn new(length: f64, dx: f64) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(DiscretizeError::InvalidGrid(format!(
                "length must be positive, got {length}"
            )));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(DiscretizeError::InvalidGrid(format!(
                "dx must be positive, got {dx}"
            )));
        }
        let cells = length / dx;
        let rounded = cells.round();
        if (cells - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(DiscretizeError::InvalidGrid(format!(
                "dx = {dx} does not tile [0, {length}]"
            )));
        }
        let cells = rounded as usize;
        if cells < 2 {
            return Err(DiscretizeError::InvalidGrid(format!(
                "dx = {dx} leaves no interior nodes on [0, {length}]"
            )));
        }
        Ok(Self {
            length,
            dx,
            interior: cells - 1,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Number of interior nodes (unknowns).
    pub fn interior(&self) -> usize {
        self.interior
    }

    pub fn x(&self, m: usize) -> f64 {
        m as f64 * self.dx
    }

    /// Interior coordinates `x_1 .. x_M`.
    pub fn nodes(&self) -> Vec<f64> {
        (1..=self.interior).map(|m| self.x(m)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletBc {
    /// Value at `x = 0`.
    pub a: f64,
    /// Value at `x = L`.
    pub b: f64,
}

/// Pointwise reaction term `R(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReactionSpec {
    None,
    /// `ρ u (1 - u)`
    Logistic { rho: f64 },
    /// `ρ u (u - α)(1 - u)`
    FitzHughNagumo { rho: f64, alpha: f64 },
}

impl ReactionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ReactionSpec::None => Ok(()),
            ReactionSpec::Logistic { rho } => check_rho(rho),
            ReactionSpec::FitzHughNagumo { rho, alpha } => {
                check_rho(rho)?;
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(DiscretizeError::InvalidProblem(format!(
                        "FitzHugh-Nagumo alpha must lie in (0, 1), got {alpha}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_linear(&self) -> bool {
        match *self {
            ReactionSpec::None => true,
            ReactionSpec::Logistic { rho } | ReactionSpec::FitzHughNagumo { rho, .. } => {
                rho == 0.0
            }
        }
    }

    /// Reaction rate, or 0 when there is none.
    pub fn rho(&self) -> f64 {
        match *self {
            ReactionSpec::None => 0.0,
            ReactionSpec::Logistic { rho } | ReactionSpec::FitzHughNagumo { rho, .. } => rho,
        }
    }

    pub fn value(&self, u: f64) -> f64 {
        match *self {
            ReactionSpec::None => 0.0,
            ReactionSpec::Logistic { rho } => rho * u * (1.0 - u),
            ReactionSpec::FitzHughNagumo { rho, alpha } => rho * u * (u - alpha) * (1.0 - u),
        }
    }

    pub fn derivative(&self, u: f64) -> f64 {
        match *self {
            ReactionSpec::None => 0.0,
            ReactionSpec::Logistic { rho } => rho * (1.0 - 2.0 * u),
            ReactionSpec::FitzHughNagumo { rho, alpha } => {
                rho * (-3.0 * u * u + 2.0 * (1.0 + alpha) * u - alpha)
            }
        }
    }

    /// `R(u) / u` as a polynomial, so that `R(U) = diag(q(U)) U` exactly.
    pub fn secant_coefficient(&self, u: f64) -> f64 {
        match *self {
            ReactionSpec::None => 0.0,
            ReactionSpec::Logistic { rho } => rho * (1.0 - u),
            ReactionSpec::FitzHughNagumo { rho, alpha } => rho * (u - alpha) * (1.0 - u),
        }
    }

    /// Roots of `R`, ascending. Empty when there is no reaction.
    pub fn equilibria(&self) -> Vec<f64> {
        match *self {
            ReactionSpec::None => Vec::new(),
            _ if self.is_linear() => Vec::new(),
            ReactionSpec::Logistic { .. } => vec![0.0, 1.0],
            ReactionSpec::FitzHughNagumo { alpha, .. } => vec![0.0, alpha, 1.0],
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho >= 0.0 {
        Ok(())
    } else {
        Err(DiscretizeError::InvalidProblem(format!(
            "reaction rate must be finite and non-negative, got {rho}"
        )))
    }
}

/// Componentwise `R(U)`.
pub fn reaction_eval(r: &ReactionSpec, u: &[f64]) -> Vec<f64> {
    u.iter().map(|&v| r.value(v)).collect()
}

/// Componentwise `R'(U)`.
pub fn reaction_derivative(r: &ReactionSpec, u: &[f64]) -> Vec<f64> {
    u.iter().map(|&v| r.derivative(v)).collect()
}

/// Continuous problem description on `[0, L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdProblem {
    pub grid: Grid1D,
    pub bc: DirichletBc,
    pub delta: f64,
    pub reaction: ReactionSpec,
    /// Speed of the moving frame `z = x - c t`; zero is the lab frame.
    pub frame_speed: f64,
}

impl RdProblem {
    pub fn new(
        grid: Grid1D,
        bc: DirichletBc,
        delta: f64,
        reaction: ReactionSpec,
        frame_speed: f64,
    ) -> Result<Self> {
        let p = Self {
            grid,
            bc,
            delta,
            reaction,
            frame_speed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(DiscretizeError::InvalidProblem(format!(
                "diffusion delta must be positive, got {}",
                self.delta
            )));
        }
        if !(self.bc.a.is_finite() && self.bc.b.is_finite()) {
            return Err(DiscretizeError::InvalidProblem(
                "boundary values must be finite".into(),
            ));
        }
        if !(self.frame_speed.is_finite() && self.frame_speed >= 0.0) {
            return Err(DiscretizeError::InvalidProblem(format!(
                "frame speed must be finite and non-negative, got {}",
                self.frame_speed
            )));
        }
        self.reaction.validate()
    }

    /// `a = 0, b = 1, L = 10, δ = 1, dx = 0.05` with the given reaction.
    pub fn with_defaults(reaction: ReactionSpec) -> Self {
        Self {
            grid: Grid1D::new(10.0, 0.05).expect("default grid is valid"),
            bc: DirichletBc { a: 0.0, b: 1.0 },
            delta: 1.0,
            reaction,
            frame_speed: 0.0,
        }
    }

    /// Fisher-KPP, `ρ = 1`, default domain and boundary data.
    pub fn fisher_defaults() -> Self {
        Self::with_defaults(ReactionSpec::Logistic { rho: 1.0 })
    }

    /// Heat equation with the default domain and boundary data.
    pub fn test_defaults() -> Self {
        Self::with_defaults(ReactionSpec::None)
    }

    pub fn interior(&self) -> usize {
        self.grid.interior()
    }

    /// Diffusion number `δ dt / dx²`.
    pub fn diffusion_number(&self, dt: f64) -> f64 {
        self.delta * dt / (self.grid.dx() * self.grid.dx())
    }
}

/// `B` in `dU/dt = D U + R(U) + B`; nonzero only in the first and last slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryVector(pub Vec<f64>);

impl BoundaryVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Discrete linear part `D` and boundary contribution `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperator {
    pub d: TridiagonalMatrix,
    pub b: BoundaryVector,
}

/// Centred second difference scaled by `δ/dx²`, plus the two-band frame
/// advection `(c/dx)·[-1 1]` on bands `[-1 0]` when `frame_speed > 0`.
pub fn build_operator(p: &RdProblem) -> Result<DiscreteOperator> {
    let m = p.interior();
    if m < 1 {
        return Err(DiscretizeError::InvalidGrid("no interior nodes".into()));
    }
    let dx = p.grid.dx();
    let k = p.delta / (dx * dx);
    let adv = p.frame_speed / dx;

    let sub = vec![k - adv; m - 1];
    let diag = vec![-2.0 * k + adv; m];
    let sup = vec![k; m - 1];
    let d = TridiagonalMatrix::new(sub, diag, sup)?;

    let mut b = vec![0.0; m];
    b[0] += k * p.bc.a - adv * p.bc.a;
    b[m - 1] += k * p.bc.b;
    Ok(DiscreteOperator {
        d,
        b: BoundaryVector(b),
    })
}

/// Initial profile recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialConditionSpec {
    /// Least-squares polynomial through `(0, a)`, `(L, b)` and `degree - 1`
    /// equally spaced interior anchors at height `c`.
    PolynomialFit { degree: usize, c: f64 },
    /// `sin(k π x / L)`.
    SineMode { k: usize },
    Explicit { values: Vec<f64> },
    /// `base + amplitude * g` with `g` a seeded standard-normal stream.
    Perturbed {
        base: Box<InitialConditionSpec>,
        seed: u64,
        amplitude: f64,
    },
}

impl InitialConditionSpec {
    /// Quadratic through the boundary values and a midpoint anchor at 1/3.
    pub fn default_polynomial() -> Self {
        InitialConditionSpec::PolynomialFit {
            degree: 2,
            c: 1.0 / 3.0,
        }
    }

    /// Replaces the seed of every `Perturbed` layer.
    pub fn with_seed(&self, new_seed: u64) -> Self {
        match self {
            InitialConditionSpec::Perturbed {
                base, amplitude, ..
            } => InitialConditionSpec::Perturbed {
                base: Box::new(base.with_seed(new_seed)),
                seed: new_seed,
                amplitude: *amplitude,
            },
            other => other.clone(),
        }
    }
}

pub fn initial_condition(p: &RdProblem, spec: &InitialConditionSpec) -> Result<Vec<f64>> {
    let m = p.interior();
    match spec {
        InitialConditionSpec::PolynomialFit { degree, c } => {
            let degree = *degree;
            if degree < 1 {
                return Err(DiscretizeError::InvalidInitialCondition(
                    "polynomial degree must be at least 1".into(),
                ));
            }
            let available = m + 2;
            if degree + 1 > available {
                return Err(DiscretizeError::DegreeTooHigh { degree, available });
            }
            let l = p.grid.length();
            let mut xs = vec![0.0, l];
            let mut ys = vec![p.bc.a, p.bc.b];
            for j in 1..degree {
                xs.push(l * j as f64 / degree as f64);
                ys.push(*c);
            }
            let coeffs = polyfit(&xs, &ys, degree, l)?;
            Ok(p.grid
                .nodes()
                .iter()
                .map(|&x| polyval(&coeffs, x / l))
                .collect())
        }
        InitialConditionSpec::SineMode { k } => {
            if *k < 1 {
                return Err(DiscretizeError::InvalidInitialCondition(
                    "sine mode index must be at least 1".into(),
                ));
            }
            let l = p.grid.length();
            Ok(p.grid
                .nodes()
                .iter()
                .map(|&x| (*k as f64 * std::f64::consts::PI * x / l).sin())
                .collect())
        }
        InitialConditionSpec::Explicit { values } => {
            if values.len() != m {
                return Err(DiscretizeError::InvalidInitialCondition(format!(
                    "explicit profile has {} values, grid has {m} interior nodes",
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(DiscretizeError::InvalidInitialCondition(
                    "explicit profile contains non-finite values".into(),
                ));
            }
            Ok(values.clone())
        }
        InitialConditionSpec::Perturbed {
            base,
            seed,
            amplitude,
        } => {
            if !(amplitude.is_finite() && *amplitude >= 0.0) {
                return Err(DiscretizeError::InvalidInitialCondition(format!(
                    "perturbation amplitude must be non-negative, got {amplitude}"
                )));
            }
            let mut u = initial_condition(p, base)?;
            if *amplitude > 0.0 {
                for (v, g) in u.iter_mut().zip(normal_stream(*seed)) {
                    *v += amplitude * g;
                }
            }
            Ok(u)
        }
    }
}

/// Deterministic standard-normal samples for a given seed.
pub fn normal_stream(seed: u64) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || StandardNormal.sample(&mut rng))
}

/// Least-squares polynomial coefficients (ascending powers of `x / scale`)
/// via Householder QR of the Vandermonde matrix.
fn polyfit(xs: &[f64], ys: &[f64], degree: usize, scale: f64) -> Result<Vec<f64>> {
    let rows = xs.len();
    let cols = degree + 1;
    let mut a: Vec<Vec<f64>> = xs
        .iter()
        .map(|&x| (0..cols).map(|j| (x / scale).powi(j as i32)).collect())
        .collect();
    let mut y = ys.to_vec();
    for k in 0..cols {
        let norm: f64 = (k..rows).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(DiscretizeError::InvalidInitialCondition(
                "polynomial fit is rank deficient".into(),
            ));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..rows).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|t| t * t).sum();
        if vv > 0.0 {
            for j in k..cols {
                let dot: f64 = (k..rows).map(|i| v[i - k] * a[i][j]).sum();
                let f = 2.0 * dot / vv;
                for i in k..rows {
                    a[i][j] -= f * v[i - k];
                }
            }
            let dot: f64 = (k..rows).map(|i| v[i - k] * y[i]).sum();
            let f = 2.0 * dot / vv;
            for i in k..rows {
                y[i] -= f * v[i - k];
            }
        }
    }
    let mut coeffs = vec![0.0; cols];
    for k in (0..cols).rev() {
        let s: f64 = (k + 1..cols).map(|j| a[k][j] * coeffs[j]).sum();
        if a[k][k].abs() < 1e-14 {
            return Err(DiscretizeError::InvalidInitialCondition(
                "polynomial fit is rank deficient".into(),
            ));
        }
        coeffs[k] = (y[k] - s) / a[k][k];
    }
    Ok(coeffs)
}

fn polyval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

/// A limiting steady-state shape sampled on the interior nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitingProfile {
    /// `"f_inf"` or `"f0(<equilibrium>)"`.
    pub label: String,
    pub values: Vec<f64>,
}

/// Interior samples of the boundary-fitting line and of each equilibrium plateau.
pub fn limiting_steady_states(p: &RdProblem) -> Vec<LimitingProfile> {
    let mut out = vec![LimitingProfile {
        label: "f_inf".into(),
        values: linear_profile(p),
    }];
    for eq in p.reaction.equilibria() {
        out.push(LimitingProfile {
            label: format!("f0({eq})"),
            values: vec![eq; p.interior()],
        });
    }
    out
}

/// Samples of `(b - a) x / L + a` on the interior nodes.
pub fn linear_profile(p: &RdProblem) -> Vec<f64> {
    let (a, b, l) = (p.bc.a, p.bc.b, p.grid.length());
    p.grid.nodes().iter().map(|&x| (b - a) * x / l + a).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn problem(l: f64, dx: f64, a: f64, b: f64, reaction: ReactionSpec) -> RdProblem {
        RdProblem::new(
            Grid1D::new(l, dx).unwrap(),
            DirichletBc { a, b },
            1.0,
            reaction,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn grid_must_tile() {
        assert!(Grid1D::new(10.0, 0.3).is_err());
        assert!(Grid1D::new(1.0, 1.0).is_err());
        assert!(Grid1D::new(-1.0, 0.1).is_err());
        let g = Grid1D::new(10.0, 0.05).unwrap();
        assert_eq!(g.interior(), 199);
        assert_abs_diff_eq!(g.nodes()[198], 9.95, epsilon = 1e-12);
    }

    #[test]
    fn small_operator_by_hand() {
        let p = problem(2.0, 0.5, 0.0, 1.0, ReactionSpec::None);
        let op = build_operator(&p).unwrap();
        assert_eq!(op.d.diag(), &[-8.0, -8.0, -8.0]);
        assert_eq!(op.d.sub(), &[4.0, 4.0]);
        assert_eq!(op.d.sup(), &[4.0, 4.0]);
        assert_eq!(op.b.as_slice(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn default_operator_entries() {
        let op = build_operator(&RdProblem::test_defaults()).unwrap();
        assert_eq!(op.d.dim(), 199);
        for d in op.d.diag() {
            assert_abs_diff_eq!(*d, -800.0, epsilon = 1e-9);
        }
        for s in op.d.sub().iter().chain(op.d.sup()) {
            assert_abs_diff_eq!(*s, 400.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(op.b.0[198], 400.0, epsilon = 1e-9);
        assert!(op.b.0[1..198].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn row_sums() {
        let p = problem(10.0, 0.5, 0.3, -0.7, ReactionSpec::None);
        let op = build_operator(&p).unwrap();
        let ones = vec![1.0; p.interior()];
        let sums = op.d.mul_vec(&ones);
        let k = p.delta / (0.5 * 0.5);
        assert_abs_diff_eq!(sums[0], -k, epsilon = 1e-12);
        assert_abs_diff_eq!(sums[sums.len() - 1], -k, epsilon = 1e-12);
        assert!(sums[1..sums.len() - 1].iter().all(|s| s.abs() < 1e-12));
        assert_eq!(op.d.sub(), op.d.sup());
    }

    #[test]
    fn line_is_discrete_steady_state() {
        for (a, b) in [(0.0, 1.0), (2.0, -3.0), (0.5, 0.5)] {
            let p = problem(10.0, 0.05, a, b, ReactionSpec::None);
            let op = build_operator(&p).unwrap();
            let f = linear_profile(&p);
            let du = op.d.mul_vec(&f);
            for (x, bb) in du.iter().zip(op.b.as_slice()) {
                assert!((x + bb).abs() <= 1e-12, "residual {}", x + bb);
            }
        }
    }

    #[test]
    fn moving_frame_bands() {
        let mut p = problem(2.0, 0.5, 1.0, 1.0, ReactionSpec::None);
        p.frame_speed = 2.0;
        let op = build_operator(&p).unwrap();
        // δ/dx² = 4, c/dx = 4: sub 4-4, main -8+4, super 4
        assert_eq!(op.d.sub(), &[0.0, 0.0]);
        assert_eq!(op.d.diag(), &[-4.0, -4.0, -4.0]);
        assert_eq!(op.d.sup(), &[4.0, 4.0]);
        assert_eq!(op.b.as_slice(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn reaction_values() {
        let l = ReactionSpec::Logistic { rho: 1.0 };
        assert_eq!(reaction_eval(&l, &[0.0, 1.0]), vec![0.0, 0.0]);
        let l2 = ReactionSpec::Logistic { rho: 2.0 };
        assert_eq!(reaction_eval(&l2, &[0.5]), vec![0.5]);
        let f = ReactionSpec::FitzHughNagumo {
            rho: 1.0,
            alpha: 0.25,
        };
        assert_eq!(reaction_eval(&f, &[0.0, 0.25, 1.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(reaction_eval(&ReactionSpec::None, &[3.0]), vec![0.0]);
    }

    #[test]
    fn reaction_derivative_values() {
        let l = ReactionSpec::Logistic { rho: 1.0 };
        assert_eq!(reaction_derivative(&l, &[0.5, 0.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn secant_coefficient_reproduces_reaction() {
        for r in [
            ReactionSpec::Logistic { rho: 1.5 },
            ReactionSpec::FitzHughNagumo {
                rho: 2.0,
                alpha: 0.3,
            },
        ] {
            for u in [-0.5, 0.0, 0.2, 0.9, 1.7] {
                assert_abs_diff_eq!(r.secant_coefficient(u) * u, r.value(u), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn fhn_alpha_validated() {
        let bad = ReactionSpec::FitzHughNagumo {
            rho: 1.0,
            alpha: 1.0,
        };
        assert!(bad.validate().is_err());
        assert!(ReactionSpec::Logistic { rho: -1.0 }.validate().is_err());
    }

    #[test]
    fn sine_mode_midpoint() {
        let p = RdProblem::test_defaults();
        let u = initial_condition(&p, &InitialConditionSpec::SineMode { k: 1 }).unwrap();
        // x_100 = 5.0
        assert_abs_diff_eq!(u[99], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_fit_through_midpoint() {
        let p = problem(10.0, 0.05, 0.0, 0.0, ReactionSpec::None);
        let u = initial_condition(
            &p,
            &InitialConditionSpec::PolynomialFit { degree: 2, c: 1.0 },
        )
        .unwrap();
        for (x, v) in p.grid.nodes().iter().zip(&u) {
            assert_abs_diff_eq!(*v, x * (10.0 - x) / 25.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn default_quadratic_matches_hand_solution() {
        // through (0,0), (5,1/3), (10,1): x/30 + x²/150
        let p = RdProblem::fisher_defaults();
        let u = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        for (x, v) in p.grid.nodes().iter().zip(&u) {
            assert_abs_diff_eq!(*v, x / 30.0 + x * x / 150.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_fit_is_the_boundary_line() {
        let p = problem(10.0, 0.5, 1.0, 3.0, ReactionSpec::None);
        let u = initial_condition(
            &p,
            &InitialConditionSpec::PolynomialFit { degree: 1, c: 99.0 },
        )
        .unwrap();
        for (a, b) in u.iter().zip(linear_profile(&p)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn degree_too_high() {
        let p = problem(2.0, 0.5, 0.0, 1.0, ReactionSpec::None);
        let err = initial_condition(
            &p,
            &InitialConditionSpec::PolynomialFit { degree: 5, c: 0.0 },
        )
        .unwrap_err();
        assert_eq!(
            err,
            DiscretizeError::DegreeTooHigh {
                degree: 5,
                available: 5
            }
        );
    }

    #[test]
    fn perturbation_zero_amplitude_and_determinism() {
        let p = RdProblem::fisher_defaults();
        let base = InitialConditionSpec::default_polynomial();
        let u0 = initial_condition(&p, &base).unwrap();
        let zero = InitialConditionSpec::Perturbed {
            base: Box::new(base.clone()),
            seed: 42,
            amplitude: 0.0,
        };
        assert_eq!(initial_condition(&p, &zero).unwrap(), u0);

        let noisy = InitialConditionSpec::Perturbed {
            base: Box::new(base),
            seed: 42,
            amplitude: 1e-3,
        };
        let a = initial_condition(&p, &noisy).unwrap();
        let b = initial_condition(&p, &noisy).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, u0);
        let c = initial_condition(&p, &noisy.with_seed(7)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn explicit_length_checked() {
        let p = problem(2.0, 0.5, 0.0, 1.0, ReactionSpec::None);
        assert!(initial_condition(
            &p,
            &InitialConditionSpec::Explicit {
                values: vec![1.0, 2.0]
            }
        )
        .is_err());
        let v = vec![1.0, 2.0, 3.0];
        assert_eq!(
            initial_condition(&p, &InitialConditionSpec::Explicit { values: v.clone() }).unwrap(),
            v
        );
    }

    #[test]
    fn limiting_profiles() {
        let p = RdProblem::fisher_defaults();
        let profiles = limiting_steady_states(&p);
        assert_eq!(profiles.len(), 3);
        for (x, v) in p.grid.nodes().iter().zip(&profiles[0].values) {
            assert_abs_diff_eq!(*v, x / 10.0, epsilon = 1e-15);
        }
        assert!(profiles[1].values.iter().all(|v| *v == 0.0));
        assert!(profiles[2].values.iter().all(|v| *v == 1.0));

        let t = limiting_steady_states(&RdProblem::test_defaults());
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].label, "f_inf");

        let fhn = RdProblem::with_defaults(ReactionSpec::FitzHughNagumo {
            rho: 1.0,
            alpha: 0.25,
        });
        assert_eq!(limiting_steady_states(&fhn).len(), 4);
    }
}
