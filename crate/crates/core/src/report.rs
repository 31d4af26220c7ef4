//! Machine-readable outputs: the per-node profile CSV and the JSON report.
//!
//! The report body carries no timestamps or host data, so a fixed config and
//! build reproduce it byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::algebra::SpectralData;
use crate::config::{Mode, RunConfig};
use crate::discretization::{FieldVector, Grid};
use crate::problem::ValidationReport;
use crate::solver::{BoundsSummary, SolutionReport, Termination, TraceEntry};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub mode: Mode,
    pub status: Status,
    pub runs: Vec<RunRecord>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Status {
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// One pipeline pass; later blocks are absent when the run stopped earlier
/// or the mode does not reach them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectral: Option<SpectralRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solution: Option<SolutionRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

impl RunRecord {
    pub fn new(eps: Option<f64>) -> Self {
        Self { eps, validation: None, spectral: None, grid: None, tolerances: None, solution: None, profile: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralRecord {
    /// `ρ` of the configured kernel integrals; the solve uses `K/ρ`.
    pub kernel_scale: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
    pub xi: Vec<f64>,
    pub sigma: f64,
    pub k: f64,
    pub a_priori_iterations: usize,
}

impl SpectralRecord {
    pub fn new(s: &SpectralData, kernel_scale: f64, a_priori_iterations: usize) -> Self {
        Self {
            kernel_scale,
            a: rows(&s.a),
            b: rows(&s.b),
            eta: s.eta.iter().copied().collect(),
            xi: s.xi.iter().copied().collect(),
            sigma: s.sigma,
            k: s.k,
            a_priori_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRecord {
    pub radius: f64,
    pub n_cells: usize,
    pub h: f64,
    /// Truncation radius the search asked for before any sharing of grids.
    pub required_radius: f64,
    pub fft: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tolerances {
    pub tol_eig: f64,
    pub tol_alg: f64,
    pub tol_trunc: f64,
    pub tol_stop: f64,
    pub quad_tol: f64,
    pub validation_tol: f64,
    /// Constant-field consistency error, floored at roundoff.
    pub quadrature_error: f64,
    pub mono_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticsRecord {
    /// `f_i(−R)` and `f_i(R)`.
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    pub edge_deviation: f64,
    pub tail_integral: f64,
    pub half_tail_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionRecord {
    pub iterations: usize,
    pub termination: Termination,
    pub a_priori_iterations: usize,
    pub residual: f64,
    pub bounds: BoundsSummary,
    pub asymptotics: Vec<AsymptoticsRecord>,
    pub uniqueness_deviation: Option<f64>,
    /// `max |f_i(x) − f_i(−x)|`.
    pub symmetry_defect: f64,
    /// `max_x (f_i − η_i)` per component.
    pub peak_excess: Vec<f64>,
    pub trace: Vec<TraceEntry>,
}

impl SolutionRecord {
    pub fn new(rep: &SolutionReport, eta: &DVector<f64>) -> Self {
        let asymptotics = rep
            .asymptotics
            .iter()
            .zip(&rep.field.values)
            .map(|(a, row)| AsymptoticsRecord {
                alpha_minus: row[0],
                alpha_plus: row[row.len() - 1],
                edge_deviation: a.edge_deviation,
                tail_integral: a.tail_integral,
                half_tail_ratio: a.half_tail_ratio,
            })
            .collect();
        Self {
            iterations: rep.iterations,
            termination: rep.termination,
            a_priori_iterations: rep.a_priori_iterations,
            residual: rep.residual,
            bounds: rep.bounds.clone(),
            asymptotics,
            uniqueness_deviation: rep.uniqueness_deviation,
            symmetry_defect: rep.field.asymmetry(),
            peak_excess: peak_excess(&rep.field, eta),
            trace: rep.trace.clone(),
        }
    }
}

impl GridRecord {
    pub fn new(grid: &Grid, required_radius: f64, fft: bool) -> Self {
        Self { radius: grid.radius(), n_cells: grid.n_cells(), h: grid.h(), required_radius, fft }
    }
}

pub fn peak_excess(f: &FieldVector, eta: &DVector<f64>) -> Vec<f64> {
    f.values
        .iter()
        .zip(eta.iter())
        .map(|(row, e)| row.iter().map(|v| v - e).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `x,f_1..f_N,eta_gap_1..eta_gap_N`, one row per node, shortest
/// round-trip decimals.
pub fn write_profile<W: Write>(out: W, f: &FieldVector, eta: &DVector<f64>) -> csv::Result<()> {
    let n = f.n();
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = std::iter::once("x".to_string())
        .chain((1..=n).map(|i| format!("f_{i}")))
        .chain((1..=n).map(|i| format!("eta_gap_{i}")))
        .collect();
    w.write_record(&header)?;
    for (p, x) in f.grid.nodes().into_iter().enumerate() {
        let record: Vec<String> = std::iter::once(x)
            .chain(f.values.iter().map(|row| row[p]))
            .chain(f.values.iter().zip(eta.iter()).map(|(row, e)| row[p] - e))
            .map(|v| format!("{v}"))
            .collect();
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_profile(path: &Path, f: &FieldVector, eta: &DVector<f64>) -> std::io::Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_profile(file, f, eta).map_err(std::io::Error::other)
}

pub fn emit_report(path: &Path, report: &Report) -> std::io::Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, report)?;
    file.write_all(b"\n")?;
    file.flush()
}
