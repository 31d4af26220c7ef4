//! Orchestration: config → validation → spectral data → majorant → grid →
//! solve → diagnostics → files.
//!
//! Each stage maps its failures to a fixed exit code; a report is written
//! for every run that gets past config parsing.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use thiserror::Error;

use crate::algebra::{self, AlgebraError, SpectralData};
use crate::config::{ConfigError, Mode, NumericsConfig, RunConfig};
use crate::discretization::{self, Grid, OperatorPlan};
use crate::problem::{validate_with, ProblemSpec, ValidationOptions, ValidationReport};
use crate::report::{self, GridRecord, Report, RunRecord, SolutionRecord, SpectralRecord, Status, Tolerances};
use crate::solver::{self, SolutionReport, SolveOptions};
use crate::weights::build_b_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Validation,
    Spectral,
    Majorant,
    Solve,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 1,
            Stage::Validation => 2,
            Stage::Spectral => 3,
            Stage::Majorant => 4,
            Stage::Solve => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Validation => "validation",
            Stage::Spectral => "spectral",
            Stage::Majorant => "majorant",
            Stage::Solve => "solve",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Error)]
#[error("{stage} failed: {message}")]
pub struct RunError {
    pub stage: Stage,
    pub message: String,
}

impl RunError {
    fn new(stage: Stage, message: impl ToString) -> Self {
        Self { stage, message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::new(Stage::Config, e)
    }
}

fn algebra_stage(e: &AlgebraError) -> Stage {
    match e {
        AlgebraError::NotPositive(_) | AlgebraError::PowerIterationCap { .. } | AlgebraError::Dimension(_) => {
            Stage::Spectral
        }
        _ => Stage::Majorant,
    }
}

fn from_algebra(e: AlgebraError) -> RunError {
    RunError::new(algebra_stage(&e), e)
}

/// A validated-ready instance on the normalized kernel.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ProblemSpec,
    /// `ρ` of the configured kernel integrals (1 when left unscaled).
    pub kernel_scale: f64,
    pub eta: DVector<f64>,
}

/// Builds the instance: kernel normalized to `ρ(A) = 1` unless the config is
/// strict, `η` as the Perron vector anchored on the first declared `η_j`.
pub fn build_problem(cfg: &RunConfig, eps: Option<f64>) -> Result<Problem, RunError> {
    let num = &cfg.numerics;
    let raw = cfg.kernel()?;
    let weights = cfg.weights(eps)?;
    let scalars = raw.scalars(num.quad_tol).map_err(|e| RunError::new(Stage::Config, format!("kernel: {e}")))?;
    let rho = algebra::spectral_radius(&scalars.a, num.tol_eig).map_err(from_algebra)?;
    let (kernel, kernel_scale) = if num.strict_radius { (raw, 1.0) } else { (raw.scaled(1.0 / rho), rho) };
    let direction = algebra::perron_vector(&(scalars.a / rho), num.tol_eig).map_err(from_algebra)?;
    let declared = cfg.declared_eta();
    let anchor = declared
        .iter()
        .enumerate()
        .find_map(|(j, e)| e.map(|e| e / direction[j]))
        .unwrap_or(num.eta_scale);
    let eta = direction * anchor;
    let nonlins = cfg.nonlinearities(eta.as_slice())?;
    let phi = cfg.phi(&nonlins)?;
    let spec = ProblemSpec::new(kernel, weights, nonlins, phi, cfg.problem.labels.clone())
        .map_err(|e| RunError::new(Stage::Config, e))?;
    Ok(Problem { spec, kernel_scale, eta })
}

pub fn validate(problem: &Problem, num: &NumericsConfig) -> Result<ValidationReport, RunError> {
    let opts = ValidationOptions {
        samples: num.validation_samples,
        tol: num.validation_tol,
        quad_tol: num.quad_tol,
        eta: Some(problem.eta.clone()),
    };
    validate_with(&problem.spec, &opts).map_err(|e| RunError::new(Stage::Validation, e))
}

fn require_valid(report: &ValidationReport) -> Result<(), RunError> {
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<String> = report
        .failures()
        .map(|c| if c.note.is_empty() { format!("condition {}", c.id) } else { format!("condition {}: {}", c.id, c.note) })
        .collect();
    Err(RunError::new(Stage::Validation, failed.join("; ")))
}

/// `A`, `B` on the normalized kernel, then `ξ`, `σ`, `k`.
pub fn spectral(problem: &Problem, num: &NumericsConfig) -> Result<SpectralData, RunError> {
    let spec = &problem.spec;
    let scalars = spec.kernel.scalars(num.quad_tol).map_err(|e| RunError::new(Stage::Spectral, e))?;
    let ex = build_b_matrix(&spec.weights, &scalars).map_err(|e| RunError::new(Stage::Majorant, e))?;
    SpectralData::with_eta(scalars.a, ex.b, problem.eta.clone(), &spec.nonlins, &spec.phi, num.tol_alg)
        .map_err(from_algebra)
}

/// Truncation radius from the search, or the configured override.
pub fn required_radius(problem: &Problem, spectral: &SpectralData, num: &NumericsConfig) -> Result<f64, RunError> {
    if let Some(r) = num.radius {
        return Ok(r);
    }
    let g_max = problem
        .spec
        .nonlins
        .iter()
        .zip(spectral.xi.iter())
        .map(|(g, x)| g.eval(*x))
        .try_fold(0.0_f64, |m, v| v.map(|v| m.max(v)))
        .map_err(|e| RunError::new(Stage::Solve, e))?;
    discretization::choose_truncation(&problem.spec.kernel, &problem.spec.weights, g_max, num.tol_trunc)
        .map_err(|e| RunError::new(Stage::Solve, e))
}

pub fn make_grid(radius: f64, num: &NumericsConfig) -> Result<Grid, RunError> {
    match num.n_cells {
        Some(c) => Grid::new(radius, c),
        None => Grid::with_spacing(radius, num.h),
    }
    .map_err(|e| RunError::new(Stage::Solve, e))
}

/// Everything one solve produced.
#[derive(Debug, Clone)]
pub struct Solved {
    pub plan: OperatorPlan,
    pub quadrature_error: f64,
    pub options: SolveOptions,
    pub report: SolutionReport,
}

pub fn solve_on(
    problem: &Problem,
    spectral: &SpectralData,
    grid: Grid,
    num: &NumericsConfig,
) -> Result<Solved, RunError> {
    let fail = |e: &dyn fmt::Display| RunError::new(Stage::Solve, e);
    let spec = &problem.spec;
    let plan = discretization::build_plan(spec, grid, spectral, num.convolution).map_err(|e| fail(&e))?;
    let consistency =
        discretization::consistency_error(&plan, &spec.nonlins, &spectral.a, &spectral.eta).map_err(|e| fail(&e))?;
    let quadrature_error = solver::quadrature_error_estimate(consistency, &spectral.xi);
    let options = SolveOptions {
        tol_stop: num.tol_stop,
        max_iters: num.max_iters,
        mono_slack: num.mono_slack.unwrap_or(10.0 * quadrature_error),
        use_a_priori: num.use_a_priori,
    };
    log::info!(
        "grid R = {}, h = {}, {} nodes; quadrature error {:e}, slack {:e}",
        grid.radius(),
        grid.h(),
        grid.n_nodes(),
        quadrature_error,
        options.mono_slack
    );
    let mut report = solver::solve(&plan, &spec.nonlins, spectral, &options).map_err(|e| fail(&e))?;
    log::info!("converged in {} iterations, residual {:e}", report.iterations, report.residual);
    if let Some(scale) = num.uniqueness_scale {
        let dev = solver::uniqueness_probe(&plan, &spec.nonlins, spectral, &report, scale, &options)
            .map_err(|e| fail(&e))?;
        log::info!("restart from {scale} xi lands within {dev:e}");
        report.uniqueness_deviation = Some(dev);
    }
    Ok(Solved { plan, quadrature_error, options, report })
}

fn tolerances(num: &NumericsConfig, quadrature_error: f64, mono_slack: f64) -> Tolerances {
    Tolerances {
        tol_eig: num.tol_eig,
        tol_alg: num.tol_alg,
        tol_trunc: num.tol_trunc,
        tol_stop: num.tol_stop,
        quad_tol: num.quad_tol,
        validation_tol: num.validation_tol,
        quadrature_error,
        mono_slack,
    }
}

/// Result of [`execute`]: the report and the profiles to write, plus the
/// failure if any stage stopped the run.
#[derive(Debug, Clone)]
pub struct Execution {
    pub report: Report,
    pub profiles: Vec<(String, crate::discretization::FieldVector, DVector<f64>)>,
    pub error: Option<RunError>,
}

impl Execution {
    pub fn exit_code(&self) -> i32 {
        self.error.as_ref().map_or(0, RunError::exit_code)
    }
}

/// Partial progress of one pass, kept so failures still report what ran.
struct Pass {
    record: RunRecord,
    problem: Option<Problem>,
    spectral: Option<SpectralData>,
}

fn prepare(cfg: &RunConfig, eps: Option<f64>, pass: &mut Pass, need_spectral: bool) -> Result<(), RunError> {
    let num = &cfg.numerics;
    let problem = build_problem(cfg, eps)?;
    let validation = validate(&problem, num)?;
    pass.record.validation = Some(validation.clone());
    pass.problem = Some(problem);
    require_valid(&validation)?;
    if need_spectral {
        let problem = pass.problem.as_ref().expect("set above");
        let s = spectral(problem, num)?;
        let a_priori = algebra::a_priori_iterations(s.sigma, s.k, num.tol_stop);
        pass.record.spectral = Some(SpectralRecord::new(&s, problem.kernel_scale, a_priori));
        pass.spectral = Some(s);
    }
    Ok(())
}

fn finish(pass: &mut Pass, cfg: &RunConfig, grid: Grid, required: f64, profile: &str) -> Result<Solved, RunError> {
    let problem = pass.problem.as_ref().expect("prepared");
    let spectral = pass.spectral.as_ref().expect("prepared");
    let solved = solve_on(problem, spectral, grid, &cfg.numerics)?;
    pass.record.grid = Some(GridRecord::new(&grid, required, solved.plan.uses_fft()));
    pass.record.tolerances =
        Some(tolerances(&cfg.numerics, solved.quadrature_error, solved.options.mono_slack));
    pass.record.solution = Some(SolutionRecord::new(&solved.report, &spectral.eta));
    pass.record.profile = Some(profile.to_string());
    Ok(solved)
}

/// Runs the pipeline in memory; nothing is written.
pub fn execute(cfg: &RunConfig) -> Execution {
    let mut runs = Vec::new();
    let mut profiles = Vec::new();
    let error = match cfg.mode {
        Mode::Validate | Mode::Solve => {
            let mut pass = Pass { record: RunRecord::new(None), problem: None, spectral: None };
            let solve = cfg.mode == Mode::Solve;
            let outcome = prepare(cfg, None, &mut pass, solve).and_then(|()| {
                if !solve {
                    return Ok(());
                }
                let problem = pass.problem.as_ref().expect("prepared");
                let spectral = pass.spectral.as_ref().expect("prepared");
                let required = required_radius(problem, spectral, &cfg.numerics)?;
                let grid = make_grid(required, &cfg.numerics)?;
                let solved = finish(&mut pass, cfg, grid, required, &cfg.output.profile)?;
                let eta = pass.spectral.as_ref().expect("prepared").eta.clone();
                profiles.push((cfg.output.profile.clone(), solved.report.field, eta));
                Ok(())
            });
            runs.push(pass.record);
            outcome.err()
        }
        Mode::Sweep => sweep(cfg, &mut runs, &mut profiles).err(),
    };
    if let Some(e) = &error {
        log::error!("{e}");
    }
    let status = Status {
        exit_code: error.as_ref().map_or(0, RunError::exit_code),
        stage: error.as_ref().map(|e| e.stage.name().to_string()),
        message: error.as_ref().map(|e| e.message.clone()),
    };
    let report = Report { schema_version: report::SCHEMA_VERSION, mode: cfg.mode, status, runs, config: cfg.clone() };
    Execution { report, profiles, error }
}

/// One pass per `ε` on a shared grid sized for the largest required radius.
fn sweep(
    cfg: &RunConfig,
    runs: &mut Vec<RunRecord>,
    profiles: &mut Vec<(String, crate::discretization::FieldVector, DVector<f64>)>,
) -> Result<(), RunError> {
    let eps = cfg.sweep_eps()?;
    if !cfg.has_parametric_weight() {
        return Err(RunError::new(Stage::Config, "sweep needs at least one weight with an eps parameter"));
    }
    let mut passes = Vec::new();
    let mut radii = Vec::new();
    for &e in eps {
        let mut pass = Pass { record: RunRecord::new(Some(e)), problem: None, spectral: None };
        let prepared = prepare(cfg, Some(e), &mut pass, true).and_then(|()| {
            required_radius(pass.problem.as_ref().expect("prepared"), pass.spectral.as_ref().expect("prepared"), &cfg.numerics)
        });
        match prepared {
            Ok(r) => {
                radii.push(r);
                passes.push(pass);
            }
            Err(err) => {
                runs.extend(passes.into_iter().map(|p| p.record));
                runs.push(pass.record);
                return Err(err);
            }
        }
    }
    let radius = radii.iter().copied().fold(0.0, f64::max);
    let grid = match make_grid(radius, &cfg.numerics) {
        Ok(g) => g,
        Err(err) => {
            runs.extend(passes.into_iter().map(|p| p.record));
            return Err(err);
        }
    };
    let mut result = Ok(());
    for (idx, (mut pass, required)) in passes.into_iter().zip(radii).enumerate() {
        if result.is_ok() {
            let name = sweep_profile_name(&cfg.output.profile, idx + 1);
            match finish(&mut pass, cfg, grid, required, &name) {
                Ok(solved) => {
                    let eta = pass.spectral.as_ref().expect("prepared").eta.clone();
                    profiles.push((name, solved.report.field, eta));
                }
                Err(e) => result = Err(e),
            }
        }
        runs.push(pass.record);
    }
    result
}

/// `profile.csv` → `profile_<k>.csv`.
pub fn sweep_profile_name(base: &str, k: usize) -> String {
    match base.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}_{k}.{ext}"),
        None => format!("{base}_{k}"),
    }
}

/// Writes the profiles (solve and sweep) and the report into `out_dir`.
pub fn write_outputs(exec: &Execution, cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf, RunError> {
    let io = |path: &Path, e: std::io::Error| RunError::new(Stage::Config, format!("{}: {e}", path.display()));
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    for (name, field, eta) in &exec.profiles {
        let path = out_dir.join(name);
        report::emit_profile(&path, field, eta).map_err(|e| io(&path, e))?;
    }
    let path = out_dir.join(&cfg.output.report);
    report::emit_report(&path, &exec.report).map_err(|e| io(&path, e))?;
    Ok(path)
}

/// Executes and writes; returns the process exit code.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> i32 {
    let exec = execute(cfg);
    match write_outputs(&exec, cfg, out_dir) {
        Ok(path) => {
            log::info!("report written to {}", path.display());
            exec.exit_code()
        }
        Err(e) => {
            log::error!("{e}");
            // the pipeline failure, if any, outranks the write failure
            if exec.error.is_some() {
                exec.exit_code()
            } else {
                e.exit_code()
            }
        }
    }
}
