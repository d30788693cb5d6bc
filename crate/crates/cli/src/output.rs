//! CSV and JSON emission.

use std::fmt::Write as _;
use std::path::Path;

use rdlab::analysis::{AccuracyTable, SpectrumReport};
use rdlab::newton::{BasinEntry, NewtonTrace};
use rdlab::steppers::Trajectory;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

/// `%.12e`: twelve mantissa digits and a signed, at least two-digit exponent.
pub fn sci(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let s = format!("{x:.12e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Bool(bool),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self, out: &mut String) {
        match self {
            Cell::Float(v) => out.push_str(&sci(*v)),
            Cell::Int(v) => write!(out, "{v}").unwrap(),
            Cell::Bool(v) => out.push_str(if *v { "true" } else { "false" }),
            Cell::Text(s) if s.contains([',', '"', '\n']) => {
                write!(out, "\"{}\"", s.replace('"', "\"\"")).unwrap()
            }
            Cell::Text(s) => out.push_str(s),
            Cell::Empty => {}
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v.into())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// A header row plus data rows, rendered deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                cell.render(&mut out);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, &self.render())
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(path.display().to_string(), e))
}

/// `t, x_1..x_M`: one row per stored state.
pub fn trajectory_csv(traj: &Trajectory) -> CsvTable {
    let m = traj.states.first().map_or(0, Vec::len);
    let mut table =
        CsvTable::new(std::iter::once("t".to_string()).chain((1..=m).map(|i| format!("x_{i}"))));
    for (t, u) in traj.times.iter().zip(&traj.states) {
        table.push(
            std::iter::once(Cell::Float(*t))
                .chain(u.iter().map(|&v| Cell::Float(v)))
                .collect(),
        );
    }
    table
}

pub fn accuracy_csv(table: &AccuracyTable) -> CsvTable {
    let mut out = CsvTable::new([
        "dt",
        "error",
        "sig_figs",
        "order_raw",
        "order_rounded",
        "unstable",
    ]);
    for r in &table.rows {
        out.push(vec![
            r.dt.into(),
            r.approx_error.into(),
            r.sig_figs.into(),
            r.order_raw.into(),
            r.order_rounded.into(),
            r.unstable.into(),
        ]);
    }
    out
}

pub fn spectrum_csv(report: &SpectrumReport) -> CsvTable {
    let mut out = CsvTable::new(["re", "im"]);
    for z in &report.spectrum.eigenvalues {
        out.push(vec![z.re.into(), z.im.into()]);
    }
    out
}

/// Every Newton iterate, one row per iteration.
pub fn iterates_csv(trace: &NewtonTrace) -> CsvTable {
    let m = trace.iterates.first().map_or(0, Vec::len);
    let mut out = CsvTable::new(
        std::iter::once("iteration".to_string()).chain((1..=m).map(|i| format!("x_{i}"))),
    );
    for (k, u) in trace.iterates.iter().enumerate() {
        out.push(
            std::iter::once(Cell::from(k))
                .chain(u.iter().map(|&v| Cell::Float(v)))
                .collect(),
        );
    }
    out
}

/// Iteration, update size and the order estimate that update completes.
pub fn convergence_csv(trace: &NewtonTrace) -> CsvTable {
    let mut out = CsvTable::new(["iteration", "error", "order_raw", "order_rounded"]);
    for (k, &e) in trace.errors.iter().enumerate() {
        let est = k.checked_sub(1).and_then(|i| trace.order_estimates.get(i));
        out.push(vec![
            (k + 1).into(),
            e.into(),
            est.map(|o| o.raw).into(),
            est.and_then(|o| o.rounded).into(),
        ]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub dx: f64,
    pub dt_star: f64,
    /// The non-negative eigenvalue bound `dx² / 2δ`.
    pub lower_bound: f64,
}

pub fn oscillation_csv(points: &[ThresholdPoint]) -> CsvTable {
    let mut out = CsvTable::new(["dx", "dt_star", "lower_bound"]);
    for p in points {
        out.push(vec![p.dx.into(), p.dt_star.into(), p.lower_bound.into()]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinRow {
    pub parameter: f64,
    #[serde(flatten)]
    pub entry: BasinEntry,
}

pub fn basin_csv(rows: &[BasinRow]) -> CsvTable {
    let mut out = CsvTable::new([
        "index",
        "parameter",
        "extremum_count",
        "diverged",
        "converged",
        "iterations",
        "failure",
    ]);
    for r in rows {
        let e = &r.entry;
        out.push(vec![
            e.index.into(),
            r.parameter.into(),
            e.class.extremum_count.into(),
            e.class.diverged.into(),
            e.converged.into(),
            e.iterations.into(),
            e.failure.clone().into(),
        ]);
    }
    out
}

/// A solve with its outcome; `failure` is set when the run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub trajectory: Trajectory,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum Payload {
    Trajectory(SolveResult),
    AccuracyTable(AccuracyTable),
    Spectrum(SpectrumReport),
    Newton(NewtonTrace),
    OscillationScan(Vec<ThresholdPoint>),
    BasinScan(Vec<BasinRow>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub metadata: RunMetadata,
    pub payload: Payload,
}

impl ResultBundle {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundle serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
