//! Stability, spectrum, oscillation and accuracy analysis of the steppers.

use crate::discretize::{initial_condition, DiscretizeError, Grid1D, InitialConditionSpec, RdProblem};
use crate::linalg::{eigenvalues, inf_norm, inf_norm_diff, spectral_radius, ComplexSpectrum, LinalgError};
use crate::steppers::{evolve, two_level_form, FixedStepper, StepperError, StepperKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Factors of the reversal test must exceed this in magnitude.
pub const REVERSAL_FLOOR: f64 = 1e-12;
/// Slack used by the spectral flags.
pub const SPECTRUM_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("reference state has zero norm")]
    ZeroReference,
    #[error("expected a positive error, got {0:e}")]
    NonPositiveError(f64),
    #[error("no closed-form growth factor for {0}")]
    Unsupported(&'static str),
    #[error("trajectory has {0} states, need at least 3")]
    TooShort(usize),
    #[error("oscillation bracket invalid: dt_hi = {dt_hi} oscillatory = {hi_osc}, dt_lo = {dt_lo} oscillatory = {lo_osc}")]
    BracketInvalid {
        dt_hi: f64,
        dt_lo: f64,
        hi_osc: bool,
        lo_osc: bool,
    },
    #[error("invalid analysis request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Stepper(#[from] StepperError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// `‖U_next − U_prev‖∞ / ‖U_next‖∞ × 100`, in percent.
pub fn approximate_relative_error(u_next: &[f64], u_prev: &[f64]) -> Result<f64> {
    if u_next.len() != u_prev.len() {
        return Err(AnalysisError::InvalidRequest(format!(
            "length mismatch: {} vs {}",
            u_next.len(),
            u_prev.len()
        )));
    }
    let reference = inf_norm(u_next);
    if reference == 0.0 {
        return Err(AnalysisError::ZeroReference);
    }
    Ok(inf_norm_diff(u_next, u_prev) / reference * 100.0)
}

/// `floor(log10(0.5 / E))`, clamped at zero.
pub fn significant_figures(e: f64) -> Result<u32> {
    if !(e > 0.0) {
        return Err(AnalysisError::NonPositiveError(e));
    }
    Ok((0.5 / e).log10().floor().max(0.0) as u32)
}

/// `log2(E_k / E_{k+1})` and its nearest integer.
pub fn order_of_accuracy(e_k: f64, e_k1: f64) -> Result<(f64, i64)> {
    for e in [e_k, e_k1] {
        if !(e > 0.0) {
            return Err(AnalysisError::NonPositiveError(e));
        }
    }
    let raw = (e_k / e_k1).log2();
    Ok((raw, raw.round() as i64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub dt: f64,
    /// Relative max-norm difference to the run with `dt / 2`, as a fraction.
    pub approx_error: Option<f64>,
    pub sig_figs: Option<u32>,
    pub order_raw: Option<f64>,
    pub order_rounded: Option<i64>,
    /// Set when either run for this row blew up.
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub stepper: StepperKind,
    pub t_end: f64,
    pub rows: Vec<AccuracyRow>,
}

/// Step-halving accuracy study at `t_end`.
///
/// Row `k` compares the run at `dt_list[k]` with one at half that step, so
/// one extra run at `dt_list.last() / 2` is made. The order column uses rows
/// `k` and `k + 1`, leaving the last row without one. Runs are independent
/// and execute in parallel. Adaptive Rosenbrock is run with frozen steps.
///
/// The error column is the tabulated convention: a plain ratio, i.e. the
/// percentage of [`approximate_relative_error`] divided by 100, which is also
/// what [`significant_figures`] expects.
pub fn accuracy_table(
    p: &RdProblem,
    kind: StepperKind,
    u0: &[f64],
    dt_list: &[f64],
    t_end: f64,
) -> Result<AccuracyTable> {
    if dt_list.is_empty() {
        return Err(AnalysisError::InvalidRequest("empty dt list".into()));
    }
    for w in dt_list.windows(2) {
        if (w[1] - 0.5 * w[0]).abs() > 1e-12 * w[0] {
            return Err(AnalysisError::InvalidRequest(format!(
                "dt list must halve: {} then {}",
                w[0], w[1]
            )));
        }
    }
    let kind = match kind {
        StepperKind::Rosenbrock { rtol, atol, .. } => StepperKind::Rosenbrock {
            adaptive: false,
            rtol,
            atol,
        },
        k => k,
    };
    let mut steps: Vec<f64> = dt_list.to_vec();
    steps.push(dt_list[dt_list.len() - 1] / 2.0);
    // surface configuration errors before fanning out
    crate::steppers::step_count(steps[steps.len() - 1], t_end)?;
    FixedStepper::new(kind, p, steps[0])?;

    let finals: Vec<Option<Vec<f64>>> = steps
        .par_iter()
        .map(|&dt| match evolve(kind, p, u0, dt, t_end) {
            Ok(t) => Ok(Some(t.final_state().to_vec())),
            Err(StepperError::BlowUp { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<std::result::Result<_, _>>()?;

    let errors: Vec<Option<f64>> = (0..dt_list.len())
        .map(|k| match (&finals[k], &finals[k + 1]) {
            (Some(coarse), Some(fine)) => approximate_relative_error(fine, coarse)
                .ok()
                .map(|pct| pct / 100.0),
            _ => None,
        })
        .collect();

    let rows = dt_list
        .iter()
        .enumerate()
        .map(|(k, &dt)| {
            let approx_error = errors[k];
            let sig_figs = approx_error.and_then(|e| significant_figures(e).ok());
            let order = match (approx_error, errors.get(k + 1).copied().flatten()) {
                (Some(a), Some(b)) => order_of_accuracy(a, b).ok(),
                _ => None,
            };
            AccuracyRow {
                dt,
                approx_error,
                sig_figs,
                order_raw: order.map(|o| o.0),
                order_rounded: order.map(|o| o.1),
                unstable: finals[k].is_none() || finals[k + 1].is_none(),
            }
        })
        .collect();
    Ok(AccuracyTable {
        stepper: kind,
        t_end,
        rows,
    })
}

/// Closed-form amplification factor of mode `θ` (with `s = sin²(θ/2)`).
///
/// Reaction terms enter through the linearisation `ρ(1 − ũ)` at a constant
/// state `ũ`; pass `rho = 0` for the pure diffusion factors.
pub fn growth_factor(
    kind: StepperKind,
    r: f64,
    theta: f64,
    dt: f64,
    rho: f64,
    u_tilde: f64,
) -> Result<f64> {
    let s = (0.5 * theta).sin().powi(2);
    let react = dt * rho * (1.0 - u_tilde);
    match kind {
        StepperKind::ForwardEuler => Ok(1.0 - 4.0 * r * s + react),
        StepperKind::BackwardEulerLinear => Ok(1.0 / (1.0 + 4.0 * r * s)),
        StepperKind::CrankNicolsonLinear => Ok((1.0 - 2.0 * r * s) / (1.0 + 2.0 * r * s)),
        StepperKind::CrankNicolsonSemiImplicit => {
            Ok((1.0 - 2.0 * r * s + react) / (1.0 + 2.0 * r * s))
        }
        StepperKind::CrankNicolsonImprovedEuler => Err(AnalysisError::Unsupported(kind.name())),
        StepperKind::Rosenbrock { .. } => Err(AnalysisError::Unsupported(kind.name())),
    }
}

/// Dirichlet sine-mode angles `θ_k = kπΔx/L` for `k = 1..M`.
pub fn mode_angles(grid: &Grid1D) -> Vec<f64> {
    let m = grid.interior();
    (1..=m)
        .map(|k| k as f64 * std::f64::consts::PI / (m + 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub spectrum: ComplexSpectrum,
    pub spectral_radius: f64,
    pub min_real_part: f64,
    pub max_imag_abs: f64,
    pub r_ratio: f64,
    pub dt: f64,
    /// Growth allowance `C` in `μ ≤ 1 + C dt`.
    pub c: f64,
    pub von_neumann_ok: bool,
    pub nonneg_ok: bool,
}

/// Eigen-analysis of the two-level method matrix at `u_current`.
pub fn spectrum_report(
    p: &RdProblem,
    kind: StepperKind,
    u_current: &[f64],
    dt: f64,
    c: f64,
) -> Result<SpectrumReport> {
    let form = two_level_form(kind, p, u_current, dt)?;
    let spectrum = eigenvalues(&form.m)?;
    let rho = spectral_radius(&spectrum)?;
    let min_real_part = spectrum.min_real();
    let max_imag_abs = spectrum.max_imag_abs();
    Ok(SpectrumReport {
        spectral_radius: rho,
        min_real_part,
        max_imag_abs,
        r_ratio: p.diffusion_number(dt),
        dt,
        c,
        von_neumann_ok: rho <= 1.0 + c * dt + SPECTRUM_TOL,
        nonneg_ok: min_real_part >= -SPECTRUM_TOL && max_imag_abs <= SPECTRUM_TOL,
        spectrum,
    })
}

/// All eigenvalues real and non-negative (within [`SPECTRUM_TOL`]).
pub fn nonneg_eigenvalue_check(report: &SpectrumReport) -> bool {
    report.spectrum.min_real() >= -SPECTRUM_TOL && report.spectrum.max_imag_abs() <= SPECTRUM_TOL
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OscillationReport {
    pub reversal_counts: Vec<usize>,
    pub oscillatory: bool,
}

/// Streaming reversal counter: feed states in time order.
#[derive(Debug, Clone, Default)]
pub struct OscillationTracker {
    prev2: Option<Vec<f64>>,
    prev1: Option<Vec<f64>>,
    counts: Vec<usize>,
    seen: usize,
}

impl OscillationTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, u: &[f64]) {
        self.seen += 1;
        if self.counts.is_empty() {
            self.counts = vec![0; u.len()];
        }
        if let (Some(a), Some(b)) = (&self.prev2, &self.prev1) {
            for i in 0..u.len() {
                let d1 = a[i] - b[i];
                let d2 = b[i] - u[i];
                if d1 * d2 < 0.0 && d1.abs() > REVERSAL_FLOOR && d2.abs() > REVERSAL_FLOOR {
                    self.counts[i] += 1;
                }
            }
        }
        self.prev2 = self.prev1.take();
        self.prev1 = Some(u.to_vec());
    }

    pub fn states_seen(&self) -> usize {
        self.seen
    }

    pub fn is_oscillatory(&self) -> bool {
        self.counts.iter().any(|&c| c >= 2)
    }

    pub fn report(&self) -> OscillationReport {
        OscillationReport {
            oscillatory: self.is_oscillatory(),
            reversal_counts: self.counts.clone(),
        }
    }
}

pub fn detect_oscillations(states: &[Vec<f64>]) -> Result<OscillationReport> {
    if states.len() < 3 {
        return Err(AnalysisError::TooShort(states.len()));
    }
    let mut t = OscillationTracker::new();
    for s in states {
        t.push(s);
    }
    Ok(t.report())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationScan {
    /// Simulated time per probe; each probe takes `ceil(horizon / dt)` steps.
    pub horizon: f64,
    /// Bisection stops once `dt_hi / dt_lo − 1` is at most this.
    pub rel_width: f64,
}

impl Default for OscillationScan {
    fn default() -> Self {
        Self {
            horizon: 20.0,
            rel_width: 1e-2,
        }
    }
}

/// Runs `kind` for `ceil(horizon / dt)` steps and reports reversals.
/// A blow-up counts as oscillatory.
pub fn oscillates_at(
    p: &RdProblem,
    kind: StepperKind,
    u0: &[f64],
    dt: f64,
    horizon: f64,
) -> Result<bool> {
    let stepper = FixedStepper::new(kind, p, dt)?;
    let steps = (horizon / dt).ceil() as usize;
    let mut tracker = OscillationTracker::new();
    tracker.push(u0);
    match stepper.run_with(u0, steps, |_, _, u| tracker.push(u)) {
        Ok(_) => Ok(tracker.is_oscillatory()),
        Err(StepperError::BlowUp { .. }) => Ok(true),
        Err(e) => Err(e.into()),
    }
}

/// Smallest oscillatory step size on a grid of spacing `dx`, found by
/// geometric bisection between `dt_lo` (quiet) and `dt_hi` (oscillatory).
pub fn oscillation_threshold(
    p: &RdProblem,
    kind: StepperKind,
    ic: &InitialConditionSpec,
    dx: f64,
    dt_hi: f64,
    dt_lo: f64,
    scan: &OscillationScan,
) -> Result<f64> {
    if !(dt_lo > 0.0 && dt_hi > dt_lo) {
        return Err(AnalysisError::InvalidRequest(format!(
            "need 0 < dt_lo < dt_hi, got {dt_lo}, {dt_hi}"
        )));
    }
    let mut q = p.clone();
    q.grid = Grid1D::new(p.grid.length(), dx)?;
    q.validate()?;
    let u0 = initial_condition(&q, ic)?;
    let probe = |dt: f64| oscillates_at(&q, kind, &u0, dt, scan.horizon);

    let (hi_osc, lo_osc) = rayon::join(|| probe(dt_hi), || probe(dt_lo));
    let (hi_osc, lo_osc) = (hi_osc?, lo_osc?);
    if !hi_osc || lo_osc {
        return Err(AnalysisError::BracketInvalid {
            dt_hi,
            dt_lo,
            hi_osc,
            lo_osc,
        });
    }
    let (mut lo, mut hi) = (dt_lo, dt_hi);
    while hi / lo - 1.0 > scan.rel_width {
        let mid = (lo * hi).sqrt();
        if probe(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{linear_profile, ReactionSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn relative_error_examples() {
        assert_eq!(approximate_relative_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(approximate_relative_error(&[2.0], &[1.0]).unwrap(), 50.0);
        assert_eq!(
            approximate_relative_error(&[0.0], &[1.0]),
            Err(AnalysisError::ZeroReference)
        );
    }

    #[test]
    fn significant_figure_examples() {
        assert_eq!(significant_figures(3.8300e-05).unwrap(), 4);
        assert_eq!(significant_figures(2.3838e-06).unwrap(), 5);
        assert_eq!(significant_figures(5.0).unwrap(), 0);
        assert!(significant_figures(0.0).is_err());
    }

    #[test]
    fn order_examples() {
        let (raw, rounded) = order_of_accuracy(3.8300e-05, 9.5413e-06).unwrap();
        assert_abs_diff_eq!(raw, 2.0051, epsilon = 5e-5);
        assert_eq!(rounded, 2);
        let (raw, rounded) = order_of_accuracy(1e-3, 1e-3 / 8.0).unwrap();
        assert_abs_diff_eq!(raw, 3.0, epsilon = 1e-14);
        assert_eq!(rounded, 3);
        let (raw, rounded) = order_of_accuracy(6.7962e-06, 3.4578e-06).unwrap();
        assert_abs_diff_eq!(raw, 0.9749, epsilon = 5e-5);
        assert_eq!(rounded, 1);
        assert!(order_of_accuracy(-1.0, 1.0).is_err());
    }

    #[test]
    fn growth_factor_examples() {
        let pi = std::f64::consts::PI;
        let fe = growth_factor(StepperKind::ForwardEuler, 0.5, pi, 0.1, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(fe, -1.0, epsilon = 1e-15);
        for r in [0.1, 1.0, 50.0] {
            let cn = growth_factor(StepperKind::CrankNicolsonLinear, r, 0.0, 0.1, 0.0, 0.0).unwrap();
            assert_eq!(cn, 1.0);
            let si = growth_factor(StepperKind::CrankNicolsonSemiImplicit, r, 1.1, 0.0, 1.0, 0.3)
                .unwrap();
            let lin = growth_factor(StepperKind::CrankNicolsonLinear, r, 1.1, 0.0, 0.0, 0.0).unwrap();
            assert_eq!(si, lin);
        }
        assert!(matches!(
            growth_factor(StepperKind::CrankNicolsonImprovedEuler, 1.0, 1.0, 0.1, 0.0, 0.0),
            Err(AnalysisError::Unsupported(_))
        ));
    }

    fn test_problem(dx: f64) -> RdProblem {
        RdProblem {
            grid: Grid1D::new(10.0, dx).unwrap(),
            ..RdProblem::test_defaults()
        }
    }

    #[test]
    fn cn_spectrum_matches_growth_factors() {
        let p = test_problem(0.5);
        let u = linear_profile(&p);
        for r in [0.1, 1.0, 10.0] {
            let dt = r * 0.25;
            let rep = spectrum_report(&p, StepperKind::CrankNicolsonLinear, &u, dt, 0.0).unwrap();
            let mut expected: Vec<f64> = mode_angles(&p.grid)
                .iter()
                .map(|&t| growth_factor(StepperKind::CrankNicolsonLinear, r, t, dt, 0.0, 0.0).unwrap())
                .collect();
            expected.sort_by(f64::total_cmp);
            for (got, want) in rep.spectrum.real_parts().iter().zip(&expected) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-10);
            }
            assert!(rep.von_neumann_ok);
            assert_abs_diff_eq!(rep.r_ratio, r, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_euler_spectral_flags() {
        let p = test_problem(0.5);
        let u = linear_profile(&p);
        let bad = spectrum_report(&p, StepperKind::ForwardEuler, &u, 0.51 * 0.25, 0.0).unwrap();
        assert!(!bad.von_neumann_ok);
        let good = spectrum_report(&p, StepperKind::ForwardEuler, &u, 0.49 * 0.25, 0.0).unwrap();
        assert!(good.von_neumann_ok);
    }

    #[test]
    fn nonneg_condition_examples() {
        let p = test_problem(0.5);
        let u = linear_profile(&p);
        let check = |r: f64| {
            let rep = spectrum_report(&p, StepperKind::CrankNicolsonLinear, &u, r * 0.25, 0.0)
                .unwrap();
            assert_eq!(rep.nonneg_ok, nonneg_eigenvalue_check(&rep));
            rep.nonneg_ok
        };
        assert!(check(0.4));
        assert!(check(0.5));
        assert!(!check(5.0));
    }

    #[test]
    fn semi_implicit_fisher_von_neumann_with_c_rho() {
        let p = RdProblem {
            grid: Grid1D::new(10.0, 0.25).unwrap(),
            ..RdProblem::fisher_defaults()
        };
        let u = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        for dt in [0.125, 1.0, 2.0] {
            let rep = spectrum_report(&p, StepperKind::CrankNicolsonSemiImplicit, &u, dt, 1.0)
                .unwrap();
            assert!(rep.von_neumann_ok, "dt {dt}: {}", rep.spectral_radius);
        }
    }

    #[test]
    fn oscillation_examples() {
        let monotone: Vec<Vec<f64>> = (0..6).map(|k| vec![(-(k as f64)).exp()]).collect();
        let rep = detect_oscillations(&monotone).unwrap();
        assert_eq!(rep.reversal_counts, vec![0]);
        assert!(!rep.oscillatory);
        let zigzag: Vec<Vec<f64>> = [0.0, 1.0, 0.0, 1.0, 0.0].iter().map(|v| vec![*v]).collect();
        let rep = detect_oscillations(&zigzag).unwrap();
        assert_eq!(rep.reversal_counts, vec![3]);
        assert!(rep.oscillatory);
        assert_eq!(
            detect_oscillations(&zigzag[..2]),
            Err(AnalysisError::TooShort(2))
        );
    }

    #[test]
    fn tiny_reversals_are_ignored() {
        let dust: Vec<Vec<f64>> = [0.0, 1e-13, 0.0, 1e-13, 0.0].iter().map(|v| vec![*v]).collect();
        assert!(!detect_oscillations(&dust).unwrap().oscillatory);
    }

    #[test]
    fn degenerate_bracket_is_rejected() {
        let p = RdProblem::test_defaults();
        let err = oscillation_threshold(
            &p,
            StepperKind::CrankNicolsonLinear,
            &InitialConditionSpec::default_polynomial(),
            0.5,
            2.0,
            1.0,
            &OscillationScan::default(),
        );
        assert!(matches!(err, Err(AnalysisError::BracketInvalid { .. })));
    }

    #[test]
    fn accuracy_table_single_row_has_no_order() {
        let p = test_problem(0.5);
        let u0 = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        let t = accuracy_table(&p, StepperKind::CrankNicolsonLinear, &u0, &[0.5], 1.0).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(t.rows[0].approx_error.unwrap() > 0.0);
        assert_eq!(t.rows[0].order_raw, None);
    }

    #[test]
    fn accuracy_table_marks_unstable_rows() {
        let p = test_problem(0.5);
        let u0 = initial_condition(&p, &InitialConditionSpec::SineMode { k: 19 }).unwrap();
        // r = 4 at dt = 1 is far beyond the explicit limit
        let t = accuracy_table(&p, StepperKind::ForwardEuler, &u0, &[1.0, 0.5], 200.0).unwrap();
        assert!(t.rows[0].unstable);
        assert_eq!(t.rows[0].approx_error, None);
    }

    #[test]
    fn accuracy_table_rejects_non_halving_lists() {
        let p = test_problem(0.5);
        let u0 = linear_profile(&p);
        assert!(accuracy_table(&p, StepperKind::ForwardEuler, &u0, &[1.0, 0.3], 1.0).is_err());
    }

    #[test]
    fn improved_euler_is_second_order_on_fisher() {
        let p = RdProblem {
            grid: Grid1D::new(10.0, 0.5).unwrap(),
            reaction: ReactionSpec::Logistic { rho: 1.0 },
            ..RdProblem::test_defaults()
        };
        let u0 = initial_condition(&p, &InitialConditionSpec::default_polynomial()).unwrap();
        let dts = [0.05, 0.025, 0.0125];
        let t = accuracy_table(&p, StepperKind::CrankNicolsonImprovedEuler, &u0, &dts, 2.0).unwrap();
        for row in &t.rows[..2] {
            assert_eq!(row.order_rounded, Some(2), "{row:?}");
        }
    }
}
