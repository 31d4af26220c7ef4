//! Singular inhomogeneity factors `μ_j(t) > 1` with integrable excess
//! `μ_j − 1`, their integrals, and the exact cell moments that drive the
//! product quadrature of the singular term.
//!
//! Every model has at most one singular point, at `t = 0`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use libm::{erf, erfc};
use thiserror::Error;

use crate::kernels::KernelScalars;
use crate::quadrature::{self, QuadError};

const LOCAL_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("weight evaluated at its singular point t = 0")]
    SingularPoint,
    #[error("invalid weight parameters: {0}")]
    Invalid(String),
    #[error("excess table: {0}")]
    Table(String),
    #[error("excess tail does not decay: {0}")]
    DivergentTail(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

/// Samples of `μ(t) − 1` with a declared singularity `|t|^{-γ}` at the
/// origin. The regular cofactor `r(t) = (μ(t) − 1)|t|^γ` is interpolated
/// linearly; the excess is zero outside the table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedExcess {
    ts: Vec<f64>,
    cofactor: Vec<f64>,
    gamma: f64,
}

impl TabulatedExcess {
    pub fn new(ts: Vec<f64>, excess: Vec<f64>, gamma: f64) -> Result<Self, WeightError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(WeightError::Table(format!("singularity exponent gamma = {gamma} must lie in [0, 1)")));
        }
        if ts.len() < 2 || ts.len() != excess.len() {
            return Err(WeightError::Table("need at least two (t, mu_minus_1) rows".into()));
        }
        if ts.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(WeightError::Table("t column must be strictly increasing".into()));
        }
        let mut cofactor = Vec::with_capacity(ts.len());
        for (&t, &e) in ts.iter().zip(&excess) {
            if !e.is_finite() {
                return Err(WeightError::Table(format!("non-finite excess at t = {t}")));
            }
            if t == 0.0 && gamma > 0.0 {
                return Err(WeightError::Table("a singular table cannot carry a sample at t = 0".into()));
            }
            cofactor.push(if gamma == 0.0 { e } else { e * t.abs().powf(gamma) });
        }
        Ok(Self { ts, cofactor, gamma })
    }

    /// Reads `t,mu_minus_1` rows preceded by a `# gamma = <value>` line.
    pub fn from_csv(path: &Path) -> Result<Self, WeightError> {
        let text = std::fs::read_to_string(path).map_err(|e| WeightError::Table(format!("{}: {e}", path.display())))?;
        let mut gamma = None;
        for line in text.lines() {
            if let Some(rest) = line.trim().strip_prefix('#') {
                if let Some((key, value)) = rest.split_once('=') {
                    if key.trim() == "gamma" {
                        let g = value
                            .trim()
                            .parse::<f64>()
                            .map_err(|e| WeightError::Table(format!("bad gamma `{}`: {e}", value.trim())))?;
                        gamma = Some(g);
                    }
                }
            }
        }
        let gamma = gamma.ok_or_else(|| {
            WeightError::Table(format!("{}: missing `# gamma = ...` metadata line", path.display()))
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| WeightError::Table(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "mu_minus_1"] {
            return Err(WeightError::Table("expected columns `t,mu_minus_1`".into()));
        }
        let mut ts = Vec::new();
        let mut excess = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| WeightError::Table(e.to_string()))?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| WeightError::Table(format!("`{s}`: {e}")));
            ts.push(parse(&record[0])?);
            excess.push(parse(&record[1])?);
        }
        Self::new(ts, excess, gamma)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn support(&self) -> (f64, f64) {
        (self.ts[0], *self.ts.last().expect("non-empty"))
    }

    fn cofactor_at(&self, t: f64) -> f64 {
        let (lo, hi) = self.support();
        if t < lo || t > hi {
            return 0.0;
        }
        let k = self.ts.partition_point(|&x| x <= t).saturating_sub(1).min(self.ts.len() - 2);
        let (t0, t1) = (self.ts[k], self.ts[k + 1]);
        let w = (t - t0) / (t1 - t0);
        self.cofactor[k] * (1.0 - w) + self.cofactor[k + 1] * w
    }

    fn excess(&self, t: f64) -> Result<f64, WeightError> {
        if t == 0.0 && self.gamma > 0.0 {
            return Err(WeightError::SingularPoint);
        }
        let r = self.cofactor_at(t);
        Ok(if self.gamma == 0.0 { r } else { r * t.abs().powf(-self.gamma) })
    }

    /// `∫_a^b |t|^{-γ} t^q dt` for `a <= b` on one side of the origin.
    fn power_moment(&self, a: f64, b: f64, q: i32) -> f64 {
        let p = q as f64 + 1.0 - self.gamma;
        if a >= 0.0 {
            (b.powf(p) - a.powf(p)) / p
        } else {
            let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
            sign * ((-a).powf(p) - (-b).powf(p)) / p
        }
    }

    /// `(∫ (μ−1), ∫ (μ−1)(t − anchor))` over `[a, b]`.
    fn moments_about(&self, a: f64, b: f64, anchor: f64) -> (f64, f64) {
        let mut m0 = 0.0;
        let mut m1 = 0.0;
        let mut cuts: Vec<f64> = self.ts.iter().cloned().filter(|&t| t > a && t < b).collect();
        if a < 0.0 && b > 0.0 && !cuts.contains(&0.0) {
            cuts.push(0.0);
            cuts.sort_by(f64::total_cmp);
        }
        let mut edges = vec![a];
        edges.extend(cuts);
        edges.push(b);
        let (lo, hi) = self.support();
        for w in edges.windows(2) {
            let (x0, x1) = (w[0].max(lo), w[1].min(hi));
            if x1 <= x0 {
                continue;
            }
            // cofactor is linear on [x0, x1]: r(t) = c0 + c1 t
            let (r0, r1) = (self.cofactor_at(x0), self.cofactor_at(x1));
            let c1 = (r1 - r0) / (x1 - x0);
            let c0 = r0 - c1 * x0;
            let p0 = self.power_moment(x0, x1, 0);
            let p1 = self.power_moment(x0, x1, 1);
            let p2 = self.power_moment(x0, x1, 2);
            m0 += c0 * p0 + c1 * p1;
            m1 += c0 * (p1 - anchor * p0) + c1 * (p2 - anchor * p1);
        }
        // clip rounding noise on a nonnegative integrand
        let noise = 1e-12 * m0.abs();
        (if m0.abs() <= noise { 0.0 } else { m0 }, m1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightModel {
    /// `μ ≡ 1`: the regular (non-singular) system.
    Unit,
    /// `μ(t) = 1 + ε e^{-|t|} / √|t|`.
    ExpSqrt { eps: f64 },
    /// `μ(t) = 1 + ε / ((1 + t²)|t|^α)`.
    Rational { eps: f64, alpha: f64 },
    Tabulated(TabulatedExcess),
}

/// Per-node product-integration data for one cell `[t0, t1]`: the excess mass
/// and the weights attached to the left and right end nodes when the smooth
/// cofactor is interpolated linearly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellWeights {
    pub mass: f64,
    pub left: f64,
    pub right: f64,
}

/// `w_j = ∫(μ_j − 1)` and `b_ij = w_j · sup_τ K_ij(τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcessIntegrals {
    pub w: Vec<f64>,
    pub b: DMatrix<f64>,
}

impl WeightModel {
    pub fn check(&self) -> Result<(), WeightError> {
        match *self {
            WeightModel::ExpSqrt { eps } if !(eps > 0.0 && eps.is_finite()) => {
                Err(WeightError::Invalid(format!("eps = {eps} must be positive")))
            }
            WeightModel::Rational { eps, alpha } => {
                if !(eps > 0.0 && eps.is_finite()) {
                    Err(WeightError::Invalid(format!("eps = {eps} must be positive")))
                } else if !(alpha > 0.0 && alpha < 1.0) {
                    Err(WeightError::Invalid(format!("alpha = {alpha} must lie in (0, 1)")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Singularity exponent at the origin.
    pub fn singularity(&self) -> f64 {
        match self {
            WeightModel::Unit => 0.0,
            WeightModel::ExpSqrt { .. } => 0.5,
            WeightModel::Rational { alpha, .. } => *alpha,
            WeightModel::Tabulated(t) => t.gamma,
        }
    }

    pub fn is_even(&self) -> bool {
        !matches!(self, WeightModel::Tabulated(_))
    }

    /// `μ(t) − 1`; kept separate from [`Self::eval`] because `1 + tiny`
    /// rounds to 1 far out in the tail.
    pub fn excess(&self, t: f64) -> Result<f64, WeightError> {
        let a = t.abs();
        match *self {
            WeightModel::Unit => Ok(0.0),
            WeightModel::ExpSqrt { eps } => {
                if a == 0.0 {
                    return Err(WeightError::SingularPoint);
                }
                Ok(eps * (-a).exp() / a.sqrt())
            }
            WeightModel::Rational { eps, alpha } => {
                if a == 0.0 {
                    return Err(WeightError::SingularPoint);
                }
                Ok(eps / ((1.0 + a * a) * a.powf(alpha)))
            }
            WeightModel::Tabulated(ref tab) => tab.excess(t),
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64, WeightError> {
        Ok(1.0 + self.excess(t)?)
    }

    /// `∫(μ − 1) dt` over the whole line.
    pub fn excess_integral(&self) -> Result<f64, WeightError> {
        self.check()?;
        match *self {
            WeightModel::Unit => Ok(0.0),
            WeightModel::ExpSqrt { eps } => Ok(2.0 * eps * PI.sqrt()),
            WeightModel::Rational { eps, alpha } => Ok(eps * PI / (0.5 * PI * alpha).cos()),
            WeightModel::Tabulated(ref tab) => {
                let (lo, hi) = tab.support();
                let (m0, _) = tab.moments_about(lo, hi, 0.0);
                check_table_tail(tab)?;
                Ok(m0)
            }
        }
    }

    /// The same integral by adaptive quadrature after a substitution that
    /// removes the singularity; no closed form involved.
    pub fn excess_integral_numeric(&self, tol: f64) -> Result<f64, WeightError> {
        self.check()?;
        match *self {
            WeightModel::Unit => Ok(0.0),
            WeightModel::ExpSqrt { eps } => {
                // t = u²: ∫₀^∞ e^{-t} t^{-1/2} dt = 2∫₀^∞ e^{-u²} du
                let q = quadrature::integrate_to_infinity(|u| 2.0 * (-u * u).exp(), 0.0, tol * 1e-3, tol)?;
                Ok(2.0 * eps * q.value)
            }
            WeightModel::Rational { eps, alpha } => {
                let q = quadrature::integrate_to_infinity(
                    |u| rational_desingularized(alpha, 0, u),
                    0.0,
                    tol * 1e-3,
                    tol,
                )?;
                Ok(2.0 * eps * q.value)
            }
            WeightModel::Tabulated(ref tab) => {
                let (lo, hi) = tab.support();
                let mut total = 0.0;
                for w in tab.ts.windows(2) {
                    let (a, b) = (w[0].max(lo), w[1].min(hi));
                    let f = |t: f64| tab.excess(t).unwrap_or(0.0);
                    total += quadrature::integrate(f, a, b, tol * 1e-3, tol)?.value;
                }
                Ok(total)
            }
        }
    }

    /// `∫_{|t| > T} (μ − 1) dt`.
    pub fn excess_outside(&self, radius: f64) -> Result<f64, WeightError> {
        self.check()?;
        let r = radius.max(0.0);
        match *self {
            WeightModel::Unit => Ok(0.0),
            WeightModel::ExpSqrt { eps } => Ok(2.0 * eps * PI.sqrt() * erfc(r.sqrt())),
            WeightModel::Rational { eps, alpha } => {
                if r == 0.0 {
                    return self.excess_integral();
                }
                // t = 1/s, then s = v^{1/(1+α)}:
                // ∫_T^∞ t^{-α}/(1+t²) dt = 1/(1+α) ∫_0^{T^{-(1+α)}} dv / (1 + v^{2/(1+α)})
                let top = r.powf(-(1.0 + alpha));
                let e = 2.0 / (1.0 + alpha);
                let q = quadrature::integrate(|v| 1.0 / (1.0 + v.powf(e)), 0.0, top, 1e-300, LOCAL_TOL)?;
                Ok(2.0 * eps * q.value / (1.0 + alpha))
            }
            WeightModel::Tabulated(ref tab) => {
                let (lo, hi) = tab.support();
                let mut out = 0.0;
                if lo < -r {
                    out += tab.moments_about(lo, -r, 0.0).0;
                }
                if hi > r {
                    out += tab.moments_about(r.max(lo), hi, 0.0).0;
                }
                Ok(out)
            }
        }
    }

    /// `(m₀, m₁) = (∫_{t0}^{t1} (μ−1) dt, ∫_{t0}^{t1} (μ−1) t dt)`, exact up
    /// to a local tolerance even when the cell contains the singularity.
    pub fn cell_moments(&self, t0: f64, t1: f64) -> Result<(f64, f64), WeightError> {
        if t1 <= t0 {
            return Ok((0.0, 0.0));
        }
        let (m0, about_left) = self.moments_about_left(t0, t1)?;
        Ok((m0, about_left + t0 * m0))
    }

    /// Product-integration weights for the cell `[t0, t1]`.
    pub fn cell_weights(&self, t0: f64, t1: f64) -> Result<CellWeights, WeightError> {
        let h = t1 - t0;
        if h <= 0.0 {
            return Ok(CellWeights { mass: 0.0, left: 0.0, right: 0.0 });
        }
        if t1 <= 0.0 && self.is_even() {
            // mirror image of [-t1, -t0], left and right swap roles
            let m = self.cell_weights(-t1, -t0)?;
            return Ok(CellWeights { mass: m.mass, left: m.right, right: m.left });
        }
        let (mass, about_left) = self.moments_about_left(t0, t1)?;
        let right = about_left / h;
        let left = mass - right;
        Ok(CellWeights { mass, left, right })
    }

    /// `(∫ (μ−1), ∫ (μ−1)(t − t0))` over `[t0, t1]`.
    fn moments_about_left(&self, t0: f64, t1: f64) -> Result<(f64, f64), WeightError> {
        if let WeightModel::Tabulated(ref tab) = *self {
            return Ok(tab.moments_about(t0, t1, t0));
        }
        if matches!(self, WeightModel::Unit) {
            return Ok((0.0, 0.0));
        }
        if t0 < 0.0 && t1 > 0.0 {
            let (ml, al) = self.moments_about_left(t0, 0.0)?;
            let (mr, ar) = self.moments_about_left(0.0, t1)?;
            // shift the right piece's anchor from 0 back to t0
            return Ok((ml + mr, al + ar - t0 * mr));
        }
        if t1 <= 0.0 {
            // even model: reflect onto [-t1, -t0] and re-anchor at the far end
            let (m, about) = self.positive_moments(-t1, -t0)?;
            let h = t1 - t0;
            return Ok((m, h * m - about));
        }
        self.positive_moments(t0, t1)
    }

    /// `(∫_a^b (μ−1), ∫_a^b (μ−1)(t − a))` for `0 <= a < b`.
    fn positive_moments(&self, a: f64, b: f64) -> Result<(f64, f64), WeightError> {
        match *self {
            WeightModel::ExpSqrt { eps } => {
                let (sa, sb) = (a.sqrt(), b.sqrt());
                // I0 = ∫ e^{-t} t^{-1/2} = √π [erf √t]
                let i0 = if a > 1.0 {
                    PI.sqrt() * (erfc(sa) - erfc(sb))
                } else {
                    PI.sqrt() * (erf(sb) - erf(sa))
                };
                // ∫ e^{-t} t^{1/2} = I0/2 − [√t e^{-t}]
                let i1 = 0.5 * i0 - (sb * (-b).exp() - sa * (-a).exp());
                let about = (i1 - a * i0).max(0.0);
                Ok((eps * i0, eps * about))
            }
            WeightModel::Rational { eps, alpha } => {
                // t = u^{1/(1-α)} gives t^{-α} dt = du/(1-α)
                let k = 1.0 - alpha;
                let (ua, ub) = (a.powf(k), b.powf(k));
                let m0 = quadrature::integrate(|u| rational_desingularized(alpha, 0, u), ua, ub, 1e-300, LOCAL_TOL)?;
                let m1 = quadrature::integrate(
                    |u| {
                        let t = u.powf(1.0 / k);
                        rational_desingularized(alpha, 0, u) * (t - a)
                    },
                    ua,
                    ub,
                    1e-300,
                    LOCAL_TOL,
                )?;
                Ok((eps * m0.value, eps * m1.value))
            }
            WeightModel::Unit => Ok((0.0, 0.0)),
            WeightModel::Tabulated(ref tab) => Ok(tab.moments_about(a, b, a)),
        }
    }
}

/// Integrand of `∫ t^{-α} t^q / (1+t²) dt` after `t = u^{1/(1-α)}`.
fn rational_desingularized(alpha: f64, q: i32, u: f64) -> f64 {
    let k = 1.0 - alpha;
    let t = u.powf(1.0 / k);
    t.powi(q) / ((1.0 + t * t) * k)
}

fn check_table_tail(tab: &TabulatedExcess) -> Result<(), WeightError> {
    let peak = tab.cofactor.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ends = [tab.cofactor[0], *tab.cofactor.last().expect("non-empty")];
    if ends.iter().any(|e| e.abs() > 1e-3 * peak) {
        return Err(WeightError::DivergentTail(format!(
            "table ends at excess {:e} / {:e} relative to peak {:e}; extend it until the excess vanishes",
            ends[0], ends[1], peak
        )));
    }
    Ok(())
}

/// `b_ij = w_j · sup_τ K_ij(τ)`.
pub fn build_b_matrix(weights: &[WeightModel], scalars: &KernelScalars) -> Result<ExcessIntegrals, WeightError> {
    let n = scalars.sup.nrows();
    if weights.len() != n {
        return Err(WeightError::Dimension(format!("{} weights for a {n}x{n} kernel", weights.len())));
    }
    let w = weights.iter().map(WeightModel::excess_integral).collect::<Result<Vec<_>, _>>()?;
    let b = DMatrix::from_fn(n, n, |i, j| w[j] * scalars.sup[(i, j)]);
    Ok(ExcessIntegrals { w, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelModel;
    use approx::assert_relative_eq;

    const B1: WeightModel = WeightModel::ExpSqrt { eps: 0.1 };
    const B2: WeightModel = WeightModel::Rational { eps: 1.0, alpha: 0.5 };

    #[test]
    fn pointwise_values() {
        assert_relative_eq!(B1.eval(1.0).unwrap(), 1.0 + 0.1 * (-1f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(B2.eval(1.0).unwrap(), 1.5, epsilon = 1e-15);
        assert_eq!(B1.eval(0.0), Err(WeightError::SingularPoint));
        assert_eq!(B2.excess(0.0), Err(WeightError::SingularPoint));
        for t in [0.3, 2.0, 17.0] {
            assert_eq!(B1.eval(t).unwrap(), B1.eval(-t).unwrap());
            assert_eq!(B2.eval(t).unwrap(), B2.eval(-t).unwrap());
        }
    }

    #[test]
    fn excess_integrals_closed_vs_numeric() {
        assert_relative_eq!(B1.excess_integral().unwrap(), 0.2 * PI.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(B2.excess_integral().unwrap(), PI * 2f64.sqrt(), epsilon = 1e-14);
        for w in [B1, B2, WeightModel::Rational { eps: 0.3, alpha: 0.8 }] {
            let closed = w.excess_integral().unwrap();
            let numeric = w.excess_integral_numeric(1e-12).unwrap();
            assert_relative_eq!(closed, numeric, max_relative = 1e-10);
        }
        let doubled = WeightModel::ExpSqrt { eps: 0.2 }.excess_integral().unwrap();
        assert_relative_eq!(doubled, 2.0 * B1.excess_integral().unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn symmetric_origin_cell() {
        let h = 0.01;
        let (m0, m1) = B1.cell_moments(-h, h).unwrap();
        // 0.2 ∫₀^h e^{-t} t^{-1/2} dt, computed independently with t = u²
        let q = quadrature::integrate(|u| 2.0 * (-u * u).exp(), 0.0, h.sqrt(), 1e-18, 1e-15).unwrap();
        assert_relative_eq!(m0, 0.2 * q.value, max_relative = 1e-13);
        assert_relative_eq!(m0, 0.039_867_065_716_134_55, max_relative = 1e-12);
        assert!(m1.abs() < 1e-17);
    }

    #[test]
    fn degenerate_cell_is_zero() {
        for w in [B1, B2] {
            assert_eq!(w.cell_moments(2.0, 2.0).unwrap(), (0.0, 0.0));
        }
    }

    #[test]
    fn moments_are_additive() {
        for w in [B1, B2] {
            let (a0, a1) = w.cell_moments(0.0, 1.0).unwrap();
            let (b0, b1) = w.cell_moments(1.0, 2.0).unwrap();
            let (c0, c1) = w.cell_moments(0.0, 2.0).unwrap();
            assert_relative_eq!(a0 + b0, c0, max_relative = 1e-13);
            assert_relative_eq!(a1 + b1, c1, max_relative = 1e-13);
            let (l0, l1) = w.cell_moments(-1.5, -0.5).unwrap();
            let (r0, r1) = w.cell_moments(0.5, 1.5).unwrap();
            assert_relative_eq!(l0, r0, max_relative = 1e-14);
            assert_relative_eq!(l1, -r1, max_relative = 1e-13);
        }
    }

    #[test]
    fn first_moment_matches_quadrature() {
        // t = u² turns ∫ e^{-t} t^{1/2} dt into 2∫ u² e^{-u²} du
        let (a, b) = (0.3, 1.7);
        let (_, m1) = B1.cell_moments(a, b).unwrap();
        let q = quadrature::integrate(|u| 2.0 * u * u * (-u * u).exp(), a.sqrt(), b.sqrt(), 1e-18, 1e-15).unwrap();
        assert_relative_eq!(m1, 0.1 * q.value, max_relative = 1e-12);
        let (_, r1) = B2.cell_moments(a, b).unwrap();
        let q = quadrature::integrate(|t: f64| t.sqrt() / (1.0 + t * t), a, b, 1e-18, 1e-14).unwrap();
        assert_relative_eq!(r1, q.value, max_relative = 1e-12);
    }

    #[test]
    fn cell_weights_nonnegative_and_consistent() {
        for w in [B1, B2] {
            for (t0, t1) in [(-0.1, 0.0), (0.0, 0.1), (3.0, 3.05), (-40.0, -39.9), (25.0, 25.5)] {
                let cw = w.cell_weights(t0, t1).unwrap();
                assert!(cw.left >= 0.0 && cw.right >= 0.0, "{w:?} {t0} {t1} {cw:?}");
                assert_relative_eq!(cw.left + cw.right, cw.mass, max_relative = 1e-12);
            }
            let l = w.cell_weights(-0.1, 0.0).unwrap();
            let r = w.cell_weights(0.0, 0.1).unwrap();
            assert_eq!((l.left, l.right), (r.right, r.left));
        }
    }

    #[test]
    fn partition_sums_approach_total() {
        for w in [B1, B2] {
            let total = w.excess_integral().unwrap();
            let t = 20.0;
            let cells = 400;
            let h = 2.0 * t / cells as f64;
            let sum: f64 = (0..cells)
                .map(|c| {
                    // integer offsets keep the cell boundary exactly at the singularity
                    let a = (c as f64 - cells as f64 / 2.0) * h;
                    w.cell_moments(a, a + h).unwrap().0
                })
                .sum();
            assert_relative_eq!(sum, total - w.excess_outside(t).unwrap(), max_relative = 1e-11);
        }
    }

    #[test]
    fn outside_mass_matches_quadrature() {
        let r = 3.0;
        let q = quadrature::integrate_to_infinity(|t| B2.excess(t).unwrap(), r, 1e-18, 1e-12).unwrap();
        assert_relative_eq!(B2.excess_outside(r).unwrap(), 2.0 * q.value, max_relative = 1e-10);
        let q = quadrature::integrate_to_infinity(|t| B1.excess(t).unwrap(), r, 1e-18, 1e-12).unwrap();
        assert_relative_eq!(B1.excess_outside(r).unwrap(), 2.0 * q.value, max_relative = 1e-10);
    }

    #[test]
    fn b_matrix_scalar_and_linearity() {
        let k = KernelModel::gaussian(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let s = k.scalars(1e-12).unwrap();
        let e = build_b_matrix(&[B1], &s).unwrap();
        assert_relative_eq!(e.b[(0, 0)], 0.2, epsilon = 1e-12);

        let k2 = KernelModel::gaussian(DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.5])).unwrap();
        let s2 = k2.scalars(1e-12).unwrap();
        let base = build_b_matrix(&[B1, B1], &s2).unwrap();
        assert_eq!(base.b, base.b.transpose());
        let doubled = build_b_matrix(&[B1, WeightModel::ExpSqrt { eps: 0.2 }], &s2).unwrap();
        for i in 0..2 {
            assert_relative_eq!(doubled.b[(i, 1)], 2.0 * base.b[(i, 1)], epsilon = 1e-15);
            assert_eq!(doubled.b[(i, 0)], base.b[(i, 0)]);
        }
        assert!(build_b_matrix(&[B1], &s2).is_err());
    }

    #[test]
    fn tabulated_excess_exact_moments() {
        // μ − 1 = |t|^{-1/2} on [-1, 1] exactly (constant cofactor)
        let ts = vec![-1.0, -0.5, 0.5, 1.0];
        let ex: Vec<f64> = ts.iter().map(|t: &f64| t.abs().powf(-0.5)).collect();
        let tab = WeightModel::Tabulated(TabulatedExcess::new(ts, ex, 0.5).unwrap());
        assert_relative_eq!(tab.cell_moments(-1.0, 1.0).unwrap().0, 4.0, epsilon = 1e-14);
        assert_relative_eq!(tab.cell_moments(0.0, 0.25).unwrap().0, 1.0, epsilon = 1e-14);
        assert_relative_eq!(tab.cell_moments(0.0, 1.0).unwrap().1, 2.0 / 3.0, epsilon = 1e-14);
        assert_eq!(tab.excess(0.0), Err(WeightError::SingularPoint));
        // table does not decay at its ends
        assert!(matches!(tab.excess_integral(), Err(WeightError::DivergentTail(_))));
    }

    #[test]
    fn tabulated_csv_requires_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mu.csv");
        std::fs::write(&path, "t,mu_minus_1\n-1,0\n1,0\n").unwrap();
        assert!(matches!(TabulatedExcess::from_csv(&path), Err(WeightError::Table(_))));
        std::fs::write(&path, "# gamma = 0\nt,mu_minus_1\n-2,0\n0,1\n2,0\n").unwrap();
        let tab = WeightModel::Tabulated(TabulatedExcess::from_csv(&path).unwrap());
        assert_relative_eq!(tab.excess_integral().unwrap(), 2.0, epsilon = 1e-15);
        assert_relative_eq!(tab.excess_integral_numeric(1e-12).unwrap(), 2.0, epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn builtin_excess_positive_and_vanishing(eps in 0.01f64..5.0, alpha in 0.05f64..0.95, k in 0i32..12) {
                let t = 1e-3 * 2f64.powi(k);
                for w in [WeightModel::ExpSqrt { eps }, WeightModel::Rational { eps, alpha }] {
                    let e = w.excess(t).unwrap();
                    prop_assert!(e > 0.0);
                    prop_assert!(w.excess(2.0 * t + 1.0).unwrap() < e);
                }
            }
        }
    }
}
