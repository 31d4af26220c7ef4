//! Matrix convolution kernels `K_ij(τ)` and the scalars derived from them.
//!
//! Three families are provided: a Gaussian kernel with a coefficient matrix,
//! a Laplace-type mixture `∫ e^{-|τ|s} L_ij(s) ds`, and per-entry sample
//! tables. Every kernel is even in `τ` and symmetric in `(i, j)`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

use crate::quadrature::{self, QuadError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel index ({i}, {j}) out of range for a {n}x{n} kernel")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("invalid kernel: {0}")]
    Invalid(String),
    #[error("kernel tail is not integrable: {0}")]
    NonIntegrableTail(String),
    #[error("kernel table: {0}")]
    Table(String),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

/// `L_ij(s) = coeff · s^power · e^{-decay·s}` for one kernel entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureDensity {
    pub coeff: f64,
    #[serde(default)]
    pub power: f64,
    #[serde(default)]
    pub decay: f64,
}

impl MixtureDensity {
    fn eval(&self, s: f64) -> f64 {
        let mut v = self.coeff;
        if self.power != 0.0 {
            v *= s.powf(self.power);
        }
        if self.decay != 0.0 {
            v *= (-self.decay * s).exp();
        }
        v
    }
}

/// `K_ij(τ) = ∫_lower^upper e^{-|τ|s} L_ij(s) ds`.
///
/// An unbounded upper limit is cut at `s_max`; the dropped mass of `L_ij` is
/// reported through [`KernelScalars::truncation_error`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpMixtureKernel {
    n: usize,
    lower: f64,
    upper: Option<f64>,
    s_max: f64,
    densities: Vec<MixtureDensity>,
}

impl ExpMixtureKernel {
    /// `densities` is row-major `n × n` and must be symmetric.
    pub fn new(
        n: usize,
        lower: f64,
        upper: Option<f64>,
        s_max: f64,
        densities: Vec<MixtureDensity>,
    ) -> Result<Self, KernelError> {
        if n == 0 || densities.len() != n * n {
            return Err(KernelError::Invalid(format!(
                "expected {} mixture densities, got {}",
                n * n,
                densities.len()
            )));
        }
        if !(lower > 0.0 && lower.is_finite()) {
            return Err(KernelError::Invalid(format!("lower bound a = {lower} must be positive")));
        }
        if let Some(b) = upper {
            if !(b > lower) {
                return Err(KernelError::Invalid(format!("upper bound b = {b} must exceed a = {lower}")));
            }
        } else if !(s_max > lower && s_max.is_finite()) {
            return Err(KernelError::Invalid(format!(
                "s_max = {s_max} must be finite and exceed a = {lower} when b is unbounded"
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let d = densities[i * n + j];
                if !(d.coeff > 0.0) || !d.power.is_finite() || !(d.decay >= 0.0) {
                    return Err(KernelError::Invalid(format!(
                        "density ({i}, {j}) needs coeff > 0, finite power and decay >= 0"
                    )));
                }
                if d != densities[j * n + i] {
                    return Err(KernelError::Invalid(format!("densities ({i}, {j}) and ({j}, {i}) differ")));
                }
            }
        }
        Ok(Self { n, lower, upper, s_max, densities })
    }

    fn hi(&self) -> f64 {
        self.upper.unwrap_or(self.s_max)
    }

    fn density(&self, i: usize, j: usize) -> MixtureDensity {
        self.densities[i * self.n + j]
    }

    /// `∫_a^hi L(s) w(s) ds` for a positive weight `w`.
    fn s_integral<W: Fn(f64) -> f64>(&self, d: MixtureDensity, w: W, tol: f64) -> Result<f64, KernelError> {
        let est = quadrature::integrate(|s| d.eval(s) * w(s), self.lower, self.hi(), tol * 1e-3, tol)?;
        Ok(est.value)
    }

    fn eval(&self, i: usize, j: usize, tau: f64) -> Result<f64, KernelError> {
        let t = tau.abs();
        self.s_integral(self.density(i, j), |s| (-t * s).exp(), 1e-14)
    }

    /// Mass of `L_ij` beyond the cut `s_max` (zero for a finite upper limit).
    fn dropped_mass(&self, d: MixtureDensity) -> Result<f64, KernelError> {
        if self.upper.is_some() {
            return Ok(0.0);
        }
        // s^p e^{-ds} is integrable at infinity iff d > 0 or p < -1
        if d.coeff != 0.0 && !(d.decay > 0.0 || d.power < -1.0) {
            return Err(KernelError::NonIntegrableTail(format!(
                "L(s) = {} s^{} e^{{-{} s}} is not integrable on [{}, ∞)",
                d.coeff, d.power, d.decay, self.s_max
            )));
        }
        let est = quadrature::integrate_to_infinity(|s| d.eval(s), self.s_max, 1e-300, 1e-8).map_err(|e| {
            KernelError::NonIntegrableTail(format!("L(s) beyond s_max = {}: {e}", self.s_max))
        })?;
        if !est.value.is_finite() || est.error > 1e-3 * est.value.abs().max(1e-300) {
            return Err(KernelError::NonIntegrableTail(format!(
                "L(s) beyond s_max = {} does not settle (estimate {:e} ± {:e})",
                self.s_max, est.value, est.error
            )));
        }
        Ok(est.value)
    }
}

/// Kernel entries sampled at `taus` (starting at 0, increasing), extended
/// evenly, interpolated linearly and set to zero beyond the last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedKernel {
    n: usize,
    taus: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

impl TabulatedKernel {
    /// `columns` is row-major `n × n`; entry `(i, j)` must equal `(j, i)`.
    pub fn new(n: usize, taus: Vec<f64>, columns: Vec<Vec<f64>>) -> Result<Self, KernelError> {
        if n == 0 || columns.len() != n * n {
            return Err(KernelError::Table(format!("expected {} columns, got {}", n * n, columns.len())));
        }
        if taus.len() < 2 {
            return Err(KernelError::Table("need at least two samples".into()));
        }
        if taus[0] != 0.0 {
            return Err(KernelError::Table(format!("first tau must be 0, got {}", taus[0])));
        }
        if taus.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(KernelError::Table("tau column must be strictly increasing".into()));
        }
        for (idx, col) in columns.iter().enumerate() {
            if col.len() != taus.len() {
                return Err(KernelError::Table(format!("column {idx} has {} rows, expected {}", col.len(), taus.len())));
            }
            if col.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(KernelError::Table(format!("column {idx} has negative or non-finite samples")));
            }
            let (i, j) = (idx / n, idx % n);
            if columns[j * n + i] != *col {
                return Err(KernelError::Table(format!("columns ({i}, {j}) and ({j}, {i}) differ")));
            }
        }
        Ok(Self { n, taus, columns })
    }

    /// Reads `tau,k_1_1,k_1_2,...` with one column per pair `i <= j` (1-based).
    pub fn from_csv(path: &Path) -> Result<Self, KernelError> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| KernelError::Table(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| KernelError::Table(format!("{}: {e}", path.display())))?
            .clone();
        if headers.get(0) != Some("tau") {
            return Err(KernelError::Table("first column must be named `tau`".into()));
        }
        let mut pairs = Vec::new();
        for name in headers.iter().skip(1) {
            let parsed = name
                .strip_prefix("k_")
                .and_then(|rest| rest.split_once('_'))
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
            match parsed {
                Some((i, j)) if i >= 1 && j >= i => pairs.push((i - 1, j - 1)),
                _ => return Err(KernelError::Table(format!("bad column name `{name}`, expected k_<i>_<j> with i <= j"))),
            }
        }
        let n = pairs.iter().map(|&(_, j)| j + 1).max().unwrap_or(0);
        if pairs.len() != n * (n + 1) / 2 {
            return Err(KernelError::Table(format!(
                "a {n}x{n} kernel needs {} columns, found {}",
                n * (n + 1) / 2,
                pairs.len()
            )));
        }
        let mut taus = Vec::new();
        let mut cols = vec![Vec::new(); pairs.len()];
        for record in reader.records() {
            let record = record.map_err(|e| KernelError::Table(e.to_string()))?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| KernelError::Table(format!("`{s}`: {e}")));
            taus.push(parse(&record[0])?);
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(parse(&record[c + 1])?);
            }
        }
        let mut columns = vec![Vec::new(); n * n];
        for (&(i, j), col) in pairs.iter().zip(cols) {
            if !columns[i * n + j].is_empty() {
                return Err(KernelError::Table(format!("duplicate column k_{}_{}", i + 1, j + 1)));
            }
            columns[j * n + i] = col.clone();
            columns[i * n + j] = col;
        }
        Self::new(n, taus, columns)
    }

    pub fn support(&self) -> f64 {
        *self.taus.last().expect("table has samples")
    }

    fn column(&self, i: usize, j: usize) -> &[f64] {
        &self.columns[i * self.n + j]
    }

    fn eval(&self, i: usize, j: usize, tau: f64) -> f64 {
        let t = tau.abs();
        let col = self.column(i, j);
        if t > self.support() {
            return 0.0;
        }
        let k = self.taus.partition_point(|&x| x <= t).saturating_sub(1).min(self.taus.len() - 2);
        let (t0, t1) = (self.taus[k], self.taus[k + 1]);
        let w = (t - t0) / (t1 - t0);
        col[k] * (1.0 - w) + col[k + 1] * w
    }

    /// `∫_from^support K dτ` and `∫_from^support τ K dτ` of the interpolant.
    fn half_line_integrals(&self, i: usize, j: usize, from: f64) -> (f64, f64) {
        let col = self.column(i, j);
        let mut mass = 0.0;
        let mut moment = 0.0;
        for k in 0..self.taus.len() - 1 {
            let (mut t0, t1) = (self.taus[k], self.taus[k + 1]);
            if t1 <= from {
                continue;
            }
            let mut y0 = col[k];
            let y1 = col[k + 1];
            if t0 < from {
                y0 = self.eval(i, j, from);
                t0 = from;
            }
            let dt = t1 - t0;
            mass += 0.5 * dt * (y0 + y1);
            moment += dt / 6.0 * (y0 * (2.0 * t0 + t1) + y1 * (t0 + 2.0 * t1));
        }
        (mass, moment)
    }

    /// Samples that vanish inside the table (zero extension beyond is implicit).
    pub fn zero_samples(&self) -> usize {
        self.columns.iter().map(|c| c.iter().filter(|&&v| v == 0.0).count()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelModel {
    /// `K_ij(τ) = a_ij / √π · e^{-τ²}` with a symmetric positive coefficient matrix.
    Gaussian { coeffs: DMatrix<f64> },
    ExpMixture(ExpMixtureKernel),
    Tabulated(TabulatedKernel),
}

/// Per-entry whole-line integrals, suprema and half-line first moments.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelScalars {
    pub a: DMatrix<f64>,
    pub sup: DMatrix<f64>,
    pub moment: DMatrix<f64>,
    /// Bound on the error from cutting an unbounded mixture at `s_max`.
    pub truncation_error: f64,
}

impl KernelModel {
    pub fn gaussian(coeffs: DMatrix<f64>) -> Result<Self, KernelError> {
        if !coeffs.is_square() || coeffs.nrows() == 0 {
            return Err(KernelError::Invalid("coefficient matrix must be square and non-empty".into()));
        }
        let n = coeffs.nrows();
        for i in 0..n {
            for j in 0..n {
                let c = coeffs[(i, j)];
                if !(c > 0.0 && c.is_finite()) {
                    return Err(KernelError::Invalid(format!("coefficient ({i}, {j}) = {c} must be positive")));
                }
                if c != coeffs[(j, i)] {
                    return Err(KernelError::Invalid(format!("coefficients ({i}, {j}) and ({j}, {i}) differ")));
                }
            }
        }
        Ok(KernelModel::Gaussian { coeffs })
    }

    pub fn size(&self) -> usize {
        match self {
            KernelModel::Gaussian { coeffs } => coeffs.nrows(),
            KernelModel::ExpMixture(m) => m.n,
            KernelModel::Tabulated(t) => t.n,
        }
    }

    fn check_index(&self, i: usize, j: usize) -> Result<(), KernelError> {
        let n = self.size();
        if i >= n || j >= n {
            return Err(KernelError::IndexOutOfRange { i, j, n });
        }
        Ok(())
    }

    /// `K_ij(τ)` with zero-based indices.
    pub fn eval(&self, i: usize, j: usize, tau: f64) -> Result<f64, KernelError> {
        self.check_index(i, j)?;
        match self {
            KernelModel::Gaussian { coeffs } => Ok(coeffs[(i, j)] / PI.sqrt() * (-tau * tau).exp()),
            KernelModel::ExpMixture(m) => m.eval(i, j, tau),
            KernelModel::Tabulated(t) => Ok(t.eval(i, j, tau)),
        }
    }

    /// Closed forms for the built-in families, exact piecewise integration
    /// for tables.
    pub fn scalars(&self, quad_tol: f64) -> Result<KernelScalars, KernelError> {
        let n = self.size();
        let mut a = DMatrix::zeros(n, n);
        let mut sup = DMatrix::zeros(n, n);
        let mut moment = DMatrix::zeros(n, n);
        let mut truncation_error: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                let (ai, si, mi) = match self {
                    KernelModel::Gaussian { coeffs } => {
                        let c = coeffs[(i, j)];
                        (c, c / PI.sqrt(), c / (2.0 * PI.sqrt()))
                    }
                    KernelModel::ExpMixture(m) => {
                        let d = m.density(i, j);
                        let tol = quad_tol.min(1e-10);
                        let dropped = m.dropped_mass(d)?;
                        // dropped mass bounds the sup error; a and the moment pick up 1/s factors
                        truncation_error = truncation_error.max(dropped * (1.0f64).max(2.0 / m.s_max));
                        (
                            m.s_integral(d, |s| 2.0 / s, tol)?,
                            m.s_integral(d, |_| 1.0, tol)?,
                            m.s_integral(d, |s| 1.0 / (s * s), tol)?,
                        )
                    }
                    KernelModel::Tabulated(t) => {
                        let (mass, mom) = t.half_line_integrals(i, j, 0.0);
                        let peak = t.column(i, j).iter().cloned().fold(0.0, f64::max);
                        (2.0 * mass, peak, mom)
                    }
                };
                for (mat, v) in [(&mut a, ai), (&mut sup, si), (&mut moment, mi)] {
                    mat[(i, j)] = v;
                    mat[(j, i)] = v;
                }
            }
        }
        Ok(KernelScalars { a, sup, moment, truncation_error })
    }

    /// Same quantities by adaptive quadrature of [`Self::eval`] on `[0, ∞)`,
    /// independent of any closed form. The supremum is taken at `τ = 0`.
    pub fn scalars_numeric(&self, quad_tol: f64) -> Result<KernelScalars, KernelError> {
        let n = self.size();
        let mut a = DMatrix::zeros(n, n);
        let mut sup = DMatrix::zeros(n, n);
        let mut moment = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let k = |t: f64| self.eval(i, j, t).unwrap_or(f64::NAN);
                let (mass, mom) = match self {
                    KernelModel::Tabulated(t) => {
                        // split at the breakpoints so each piece is smooth
                        let mut mass = 0.0;
                        let mut mom = 0.0;
                        for w in t.taus.windows(2) {
                            mass += quadrature::integrate(k, w[0], w[1], quad_tol * 1e-3, quad_tol)?.value;
                            mom += quadrature::integrate(|x| x * k(x), w[0], w[1], quad_tol * 1e-3, quad_tol)?.value;
                        }
                        (mass, mom)
                    }
                    _ => (
                        quadrature::integrate_to_infinity(k, 0.0, quad_tol * 1e-3, quad_tol)?.value,
                        quadrature::integrate_to_infinity(|x| x * k(x), 0.0, quad_tol * 1e-3, quad_tol)?.value,
                    ),
                };
                let peak = match self {
                    KernelModel::Tabulated(t) => t.column(i, j).iter().cloned().fold(0.0, f64::max),
                    _ => self.eval(i, j, 0.0)?,
                };
                for (mat, v) in [(&mut a, 2.0 * mass), (&mut sup, peak), (&mut moment, mom)] {
                    mat[(i, j)] = v;
                    mat[(j, i)] = v;
                }
            }
        }
        Ok(KernelScalars { a, sup, moment, truncation_error: 0.0 })
    }

    /// `∫_{|τ|>R} K_ij(τ) dτ`.
    pub fn tail_mass(&self, i: usize, j: usize, radius: f64) -> Result<f64, KernelError> {
        self.check_index(i, j)?;
        let r = radius.max(0.0);
        match self {
            KernelModel::Gaussian { coeffs } => Ok(coeffs[(i, j)] * erfc(r)),
            KernelModel::ExpMixture(m) => {
                let d = m.density(i, j);
                m.s_integral(d, |s| 2.0 * (-r * s).exp() / s, 1e-12)
            }
            KernelModel::Tabulated(t) => Ok(2.0 * t.half_line_integrals(i, j, r).0),
        }
    }

    /// Multiplies every entry by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> KernelModel {
        match self {
            KernelModel::Gaussian { coeffs } => KernelModel::Gaussian { coeffs: coeffs * factor },
            KernelModel::ExpMixture(m) => {
                let mut m = m.clone();
                for d in &mut m.densities {
                    d.coeff *= factor;
                }
                KernelModel::ExpMixture(m)
            }
            KernelModel::Tabulated(t) => {
                let mut t = t.clone();
                for col in &mut t.columns {
                    for v in col.iter_mut() {
                        *v *= factor;
                    }
                }
                KernelModel::Tabulated(t)
            }
        }
    }

    /// Finite support radius for tables, `None` for the analytic families.
    pub fn support(&self) -> Option<f64> {
        match self {
            KernelModel::Tabulated(t) => Some(t.support()),
            _ => None,
        }
    }
}
