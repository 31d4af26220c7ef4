//! JSON run configuration and its translation into model objects.
//!
//! Relative table paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretization::ConvolutionMode;
use crate::kernels::{ExpMixtureKernel, KernelError, KernelModel, MixtureDensity, TabulatedKernel};
use crate::nonlinearities::{MonotoneCubic, NonlinError, NonlinModel, PhiModel};
use crate::weights::{TabulatedExcess, WeightError, WeightModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("weight: {0}")]
    Weight(#[from] WeightError),
    #[error("nonlinearity: {0}")]
    Nonlinearity(#[from] NonlinError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    /// `K_ij(τ) = a_ij/√π · e^{−τ²}`.
    Gaussian { coeffs: Vec<Vec<f64>> },
    /// Exponential mixture over `s ∈ [lower, upper]`; `upper` omitted means unbounded, cut at `s_max`.
    ExpMixture {
        lower: f64,
        #[serde(default)]
        upper: Option<f64>,
        #[serde(default = "default_s_max")]
        s_max: f64,
        densities: Vec<Vec<MixtureDensity>>,
    },
    Tabulated { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightConfig {
    Unit,
    /// `1 + ε e^{−|t|}/√|t|`.
    ExpSqrt { eps: f64 },
    /// `1 + ε/((1 + t²)|t|^α)`.
    Rational { eps: f64, alpha: f64 },
    Tabulated { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinConfig {
    Power {
        alpha: f64,
        #[serde(default)]
        eta: Option<f64>,
    },
    SqrtPower {
        alpha: f64,
        #[serde(default)]
        eta: Option<f64>,
    },
    TwoPowers {
        alpha: f64,
        beta: f64,
        #[serde(default)]
        eta: Option<f64>,
    },
    ExpSaturation {
        alpha: f64,
        #[serde(default)]
        eta: Option<f64>,
    },
    Tabulated { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    Power { p: f64 },
    PiecewiseLinear { sigmas: Vec<f64>, values: Vec<f64> },
}

/// `"auto"` pairs `φ(σ) = σ^p` with the nonlinearities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhiConfig {
    Named(String),
    Explicit(PhiSpec),
}

impl Default for PhiConfig {
    fn default() -> Self {
        PhiConfig::Named("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kernel: KernelConfig,
    pub weights: Vec<WeightConfig>,
    pub nonlinearities: Vec<NonlinConfig>,
    #[serde(default)]
    pub phi: PhiConfig,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    pub tol_eig: f64,
    pub tol_alg: f64,
    pub tol_trunc: f64,
    pub tol_stop: f64,
    pub quad_tol: f64,
    /// Target spacing; ignored when `n_cells` is set.
    pub h: f64,
    pub n_cells: Option<usize>,
    /// Overrides the truncation search.
    pub radius: Option<f64>,
    pub max_iters: usize,
    /// Overrides `10 ×` the measured quadrature error.
    pub mono_slack: Option<f64>,
    pub use_a_priori: bool,
    /// Refuse to rescale a kernel whose `ρ(A) ≠ 1`.
    pub strict_radius: bool,
    /// Scale of the Perron vector when no nonlinearity declares `η_j`.
    pub eta_scale: f64,
    /// `None` skips the restart from `scale·ξ`.
    pub uniqueness_scale: Option<f64>,
    pub validation_samples: usize,
    pub validation_tol: f64,
    pub convolution: ConvolutionMode,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            tol_eig: 1e-13,
            tol_alg: 1e-13,
            tol_trunc: 1e-8,
            tol_stop: 1e-8,
            quad_tol: 1e-12,
            h: 0.05,
            n_cells: None,
            radius: None,
            max_iters: 1000,
            mono_slack: None,
            use_a_priori: false,
            strict_radius: false,
            eta_scale: 1.0,
            uniqueness_scale: Some(2.0),
            validation_samples: 64,
            validation_tol: 1e-9,
            convolution: ConvolutionMode::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Solve,
    Validate,
    Sweep,
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "solve" => Ok(Mode::Solve),
            "validate" | "validate-only" | "validate_only" => Ok(Mode::Validate),
            "sweep" => Ok(Mode::Sweep),
            other => Err(ConfigError::Invalid(format!("unknown mode `{other}`, expected solve|validate|sweep"))),
        }
    }
}

/// `eps` replaces the `ε` of every parametric weight, one run per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub profile: String,
    pub report: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("."), profile: "profile.csv".into(), report: "report.json".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory that relative paths resolve against; not part of the document.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_s_max() -> f64 {
    200.0
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let n = &self.numerics;
        let positive = [
            ("tol_eig", n.tol_eig),
            ("tol_alg", n.tol_alg),
            ("tol_trunc", n.tol_trunc),
            ("tol_stop", n.tol_stop),
            ("quad_tol", n.quad_tol),
            ("h", n.h),
            ("eta_scale", n.eta_scale),
            ("validation_tol", n.validation_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("numerics.{name} = {v} must be positive")));
            }
        }
        if let Some(c) = n.n_cells {
            if c == 0 || c % 2 != 0 {
                return Err(ConfigError::Invalid(format!("numerics.n_cells = {c} must be even and positive")));
            }
        }
        if let Some(r) = n.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(ConfigError::Invalid(format!("numerics.radius = {r} must be positive")));
            }
        }
        if let Some(s) = n.mono_slack {
            if !(s >= 0.0) {
                return Err(ConfigError::Invalid(format!("numerics.mono_slack = {s} must be nonnegative")));
            }
        }
        if let Some(s) = n.uniqueness_scale {
            if !(s >= 1.0 && s.is_finite()) {
                return Err(ConfigError::Invalid(format!("numerics.uniqueness_scale = {s} must be at least 1")));
            }
        }
        if n.max_iters == 0 {
            return Err(ConfigError::Invalid("numerics.max_iters must be positive".into()));
        }
        if n.validation_samples < 2 {
            return Err(ConfigError::Invalid("numerics.validation_samples must be at least 2".into()));
        }
        let p = &self.problem;
        if p.weights.len() != p.nonlinearities.len() {
            return Err(ConfigError::Invalid(format!(
                "{} weights but {} nonlinearities",
                p.weights.len(),
                p.nonlinearities.len()
            )));
        }
        if let PhiConfig::Named(name) = &p.phi {
            if name != "auto" {
                return Err(ConfigError::Invalid(format!("unknown phi `{name}`, expected \"auto\" or an object")));
            }
        }
        if self.mode == Mode::Sweep {
            self.sweep_eps()?;
        }
        Ok(())
    }

    /// The ε list of a sweep; every value positive and at least one value.
    pub fn sweep_eps(&self) -> Result<&[f64], ConfigError> {
        let eps = self
            .sweep
            .as_ref()
            .map(|s| s.eps.as_slice())
            .filter(|e| !e.is_empty())
            .ok_or_else(|| ConfigError::Invalid("sweep mode needs a non-empty sweep.eps list".into()))?;
        if let Some(e) = eps.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(ConfigError::Invalid(format!("sweep eps {e} must be positive")));
        }
        Ok(eps)
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn kernel(&self) -> Result<KernelModel, ConfigError> {
        match &self.problem.kernel {
            KernelConfig::Gaussian { coeffs } => Ok(KernelModel::gaussian(square(coeffs, "kernel coeffs")?)?),
            KernelConfig::ExpMixture { lower, upper, s_max, densities } => {
                let n = densities.len();
                if densities.iter().any(|row| row.len() != n) {
                    return Err(ConfigError::Invalid("kernel densities must be a square array".into()));
                }
                let flat = densities.iter().flatten().copied().collect();
                Ok(KernelModel::ExpMixture(ExpMixtureKernel::new(n, *lower, *upper, *s_max, flat)?))
            }
            KernelConfig::Tabulated { path } => {
                Ok(KernelModel::Tabulated(TabulatedKernel::from_csv(&self.resolve(path))?))
            }
        }
    }

    /// Weights with `ε` replaced by `eps` where given.
    pub fn weights(&self, eps: Option<f64>) -> Result<Vec<WeightModel>, ConfigError> {
        self.problem
            .weights
            .iter()
            .map(|w| {
                Ok(match w {
                    WeightConfig::Unit => WeightModel::Unit,
                    WeightConfig::ExpSqrt { eps: e } => WeightModel::ExpSqrt { eps: eps.unwrap_or(*e) },
                    WeightConfig::Rational { eps: e, alpha } => {
                        WeightModel::Rational { eps: eps.unwrap_or(*e), alpha: *alpha }
                    }
                    WeightConfig::Tabulated { path } => {
                        WeightModel::Tabulated(TabulatedExcess::from_csv(&self.resolve(path))?)
                    }
                })
            })
            .collect()
    }

    /// Whether a sweep has any weight to act on.
    pub fn has_parametric_weight(&self) -> bool {
        self.problem
            .weights
            .iter()
            .any(|w| matches!(w, WeightConfig::ExpSqrt { .. } | WeightConfig::Rational { .. }))
    }

    /// Declared `η_j` per component (`None` where omitted or tabulated).
    pub fn declared_eta(&self) -> Vec<Option<f64>> {
        self.problem
            .nonlinearities
            .iter()
            .map(|g| match *g {
                NonlinConfig::Power { eta, .. }
                | NonlinConfig::SqrtPower { eta, .. }
                | NonlinConfig::TwoPowers { eta, .. }
                | NonlinConfig::ExpSaturation { eta, .. } => eta,
                NonlinConfig::Tabulated { .. } => None,
            })
            .collect()
    }

    /// Nonlinearities with omitted `η_j` taken from `fill`.
    pub fn nonlinearities(&self, fill: &[f64]) -> Result<Vec<NonlinModel>, ConfigError> {
        if fill.len() != self.problem.nonlinearities.len() {
            return Err(ConfigError::Invalid("eta fill has the wrong length".into()));
        }
        self.problem
            .nonlinearities
            .iter()
            .zip(fill)
            .map(|(g, &f)| {
                Ok(match *g {
                    NonlinConfig::Power { alpha, eta } => NonlinModel::Power { alpha, eta: eta.unwrap_or(f) },
                    NonlinConfig::SqrtPower { alpha, eta } => NonlinModel::SqrtPower { alpha, eta: eta.unwrap_or(f) },
                    NonlinConfig::TwoPowers { alpha, beta, eta } => {
                        NonlinModel::TwoPowers { alpha, beta, eta: eta.unwrap_or(f) }
                    }
                    NonlinConfig::ExpSaturation { alpha, eta } => {
                        NonlinModel::ExpSaturation { alpha, eta: eta.unwrap_or(f) }
                    }
                    NonlinConfig::Tabulated { ref path } => {
                        NonlinModel::Tabulated(MonotoneCubic::from_csv(&self.resolve(path))?)
                    }
                })
            })
            .collect()
    }

    /// Explicit `φ`, or `σ^p` with the largest paired exponent.
    pub fn phi(&self, nonlins: &[NonlinModel]) -> Result<PhiModel, ConfigError> {
        match &self.problem.phi {
            PhiConfig::Explicit(PhiSpec::Power { p }) => Ok(PhiModel::Power { p: *p }),
            PhiConfig::Explicit(PhiSpec::PiecewiseLinear { sigmas, values }) => {
                Ok(PhiModel::PiecewiseLinear { sigmas: sigmas.clone(), values: values.clone() })
            }
            PhiConfig::Named(_) => {
                let p = nonlins
                    .iter()
                    .map(|g| g.paired_phi_exponent())
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| {
                        ConfigError::Invalid("phi \"auto\" needs parametric nonlinearities; give phi explicitly".into())
                    })?
                    .into_iter()
                    .fold(0.0, f64::max);
                Ok(PhiModel::Power { p })
            }
        }
    }
}

fn square(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(ConfigError::Invalid(format!("{what} must be a non-empty square array")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}
