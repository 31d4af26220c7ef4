//! Concave nonlinearities `G_j(u)`, comparison maps `φ(σ)` and the sampled
//! property checks built on them.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlinError {
    #[error("nonlinearity evaluated at negative argument u = {0}")]
    NegativeArgument(f64),
    #[error("phi evaluated outside [0, 1] at sigma = {0}")]
    SigmaOutOfRange(f64),
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("chord needs 0 < u_lo < u_hi, got u_lo = {lo}, u_hi = {hi}")]
    BadChord { lo: f64, hi: f64 },
    #[error("table: {0}")]
    Table(String),
}

/// Shape-preserving (Fritsch–Carlson) cubic through `(u_k, g_k)`, extended
/// linearly with the end slope past the last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    us: Vec<f64>,
    gs: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(us: Vec<f64>, gs: Vec<f64>) -> Result<Self, NonlinError> {
        if us.len() < 2 || us.len() != gs.len() {
            return Err(NonlinError::Invalid("need at least two (u, g) points".into()));
        }
        if us[0] != 0.0 {
            return Err(NonlinError::Invalid(format!("first u must be 0, got {}", us[0])));
        }
        if us.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(NonlinError::Invalid("u samples must be strictly increasing".into()));
        }
        if gs.iter().any(|g| !g.is_finite()) {
            return Err(NonlinError::Invalid("g samples must be finite".into()));
        }
        let n = us.len();
        let secants: Vec<f64> = (0..n - 1).map(|k| (gs[k + 1] - gs[k]) / (us[k + 1] - us[k])).collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = secants[0];
        slopes[n - 1] = secants[n - 2];
        for k in 1..n - 1 {
            let (d0, d1) = (secants[k - 1], secants[k]);
            slopes[k] = if d0 * d1 <= 0.0 {
                0.0
            } else {
                // weighted harmonic mean keeps each piece monotone
                let (h0, h1) = (us[k] - us[k - 1], us[k + 1] - us[k]);
                let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
                (w1 + w2) / (w1 / d0 + w2 / d1)
            };
        }
        Ok(Self { us, gs, slopes })
    }

    /// Reads `u,g` rows.
    pub fn from_csv(path: &Path) -> Result<Self, NonlinError> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| NonlinError::Table(format!("{}: {e}", path.display())))?;
        let headers = reader.headers().map_err(|e| NonlinError::Table(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["u", "g"] {
            return Err(NonlinError::Table("expected columns `u,g`".into()));
        }
        let mut us = Vec::new();
        let mut gs = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| NonlinError::Table(e.to_string()))?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| NonlinError::Table(format!("`{s}`: {e}")));
            us.push(parse(&record[0])?);
            gs.push(parse(&record[1])?);
        }
        Self::new(us, gs)
    }

    fn eval(&self, u: f64) -> f64 {
        let n = self.us.len();
        let last = self.us[n - 1];
        if u >= last {
            return self.gs[n - 1] + self.slopes[n - 1] * (u - last);
        }
        let k = self.us.partition_point(|&x| x <= u).saturating_sub(1).min(n - 2);
        let h = self.us[k + 1] - self.us[k];
        let s = (u - self.us[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.gs[k] + h10 * h * self.slopes[k] + h01 * self.gs[k + 1] + h11 * h * self.slopes[k + 1]
    }

    fn derivative(&self, u: f64) -> f64 {
        let n = self.us.len();
        if u >= self.us[n - 1] {
            return self.slopes[n - 1];
        }
        let k = self.us.partition_point(|&x| x <= u).saturating_sub(1).min(n - 2);
        let h = self.us[k + 1] - self.us[k];
        let s = (u - self.us[k]) / h;
        let s2 = s * s;
        let d00 = 6.0 * s2 - 6.0 * s;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -6.0 * s2 + 6.0 * s;
        let d11 = 3.0 * s2 - 2.0 * s;
        (d00 * self.gs[k] + d01 * self.gs[k + 1]) / h + d10 * self.slopes[k] + d11 * self.slopes[k + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonlinModel {
    /// `u^α η^{1−α}`
    Power { alpha: f64, eta: f64 },
    /// `½(√(uη) + u^α η^{1−α})`
    SqrtPower { alpha: f64, eta: f64 },
    /// `½(u^β η^{1−β} + u^α η^{1−α})`
    TwoPowers { alpha: f64, beta: f64, eta: f64 },
    /// `γ(1 − e^{−u^α η^{1−α}})` with `γ = η / (1 − e^{−η})`
    ExpSaturation { alpha: f64, eta: f64 },
    Tabulated(MonotoneCubic),
}

fn scaled_power(u: f64, alpha: f64, eta: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        u.powf(alpha) * eta.powf(1.0 - alpha)
    }
}

fn scaled_power_derivative(u: f64, alpha: f64, eta: f64) -> f64 {
    alpha * eta.powf(1.0 - alpha) * u.powf(alpha - 1.0)
}

impl NonlinModel {
    pub fn check(&self) -> Result<(), NonlinError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(NonlinError::Invalid(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        let positive = |v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(NonlinError::Invalid(format!("eta = {v} must be positive")))
            }
        };
        match *self {
            NonlinModel::Power { alpha, eta }
            | NonlinModel::SqrtPower { alpha, eta }
            | NonlinModel::ExpSaturation { alpha, eta } => {
                unit("alpha", alpha)?;
                positive(eta)
            }
            NonlinModel::TwoPowers { alpha, beta, eta } => {
                unit("alpha", alpha)?;
                unit("beta", beta)?;
                positive(eta)
            }
            NonlinModel::Tabulated(_) => Ok(()),
        }
    }

    /// Fixed point `η_j` the family is built around, if it has one.
    pub fn eta(&self) -> Option<f64> {
        match *self {
            NonlinModel::Power { eta, .. }
            | NonlinModel::SqrtPower { eta, .. }
            | NonlinModel::TwoPowers { eta, .. }
            | NonlinModel::ExpSaturation { eta, .. } => Some(eta),
            NonlinModel::Tabulated(_) => None,
        }
    }

    /// Exponent `p` of the power map `φ(σ) = σ^p` that pairs with this family.
    pub fn paired_phi_exponent(&self) -> Option<f64> {
        match *self {
            NonlinModel::Power { alpha, .. } | NonlinModel::ExpSaturation { alpha, .. } => Some(alpha),
            NonlinModel::SqrtPower { alpha, .. } => Some(alpha.max(0.5)),
            NonlinModel::TwoPowers { alpha, beta, .. } => Some(alpha.max(beta)),
            NonlinModel::Tabulated(_) => None,
        }
    }

    pub fn eval(&self, u: f64) -> Result<f64, NonlinError> {
        if !(u >= 0.0) {
            return Err(NonlinError::NegativeArgument(u));
        }
        Ok(self.eval_unchecked(u))
    }

    /// Hot-path evaluation; callers guarantee `u >= 0`.
    pub(crate) fn eval_unchecked(&self, u: f64) -> f64 {
        match *self {
            NonlinModel::Power { alpha, eta } => scaled_power(u, alpha, eta),
            NonlinModel::SqrtPower { alpha, eta } => 0.5 * ((u * eta).sqrt() + scaled_power(u, alpha, eta)),
            NonlinModel::TwoPowers { alpha, beta, eta } => {
                0.5 * (scaled_power(u, beta, eta) + scaled_power(u, alpha, eta))
            }
            NonlinModel::ExpSaturation { alpha, eta } => {
                let gamma = eta / -(-eta).exp_m1();
                gamma * -(-scaled_power(u, alpha, eta)).exp_m1()
            }
            NonlinModel::Tabulated(ref c) => c.eval(u),
        }
    }

    /// `G'(u)` for `u > 0`.
    pub fn derivative(&self, u: f64) -> Result<f64, NonlinError> {
        if !(u > 0.0) {
            return Err(NonlinError::NegativeArgument(u));
        }
        Ok(match *self {
            NonlinModel::Power { alpha, eta } => scaled_power_derivative(u, alpha, eta),
            NonlinModel::SqrtPower { alpha, eta } => {
                0.5 * (0.5 * (eta / u).sqrt() + scaled_power_derivative(u, alpha, eta))
            }
            NonlinModel::TwoPowers { alpha, beta, eta } => {
                0.5 * (scaled_power_derivative(u, beta, eta) + scaled_power_derivative(u, alpha, eta))
            }
            NonlinModel::ExpSaturation { alpha, eta } => {
                let gamma = eta / -(-eta).exp_m1();
                gamma * scaled_power_derivative(u, alpha, eta) * (-scaled_power(u, alpha, eta)).exp()
            }
            NonlinModel::Tabulated(ref c) => c.derivative(u),
        })
    }

    /// The same family re-anchored at a new fixed point `η`.
    pub fn with_eta(&self, eta: f64) -> NonlinModel {
        match *self {
            NonlinModel::Power { alpha, .. } => NonlinModel::Power { alpha, eta },
            NonlinModel::SqrtPower { alpha, .. } => NonlinModel::SqrtPower { alpha, eta },
            NonlinModel::TwoPowers { alpha, beta, .. } => NonlinModel::TwoPowers { alpha, beta, eta },
            NonlinModel::ExpSaturation { alpha, .. } => NonlinModel::ExpSaturation { alpha, eta },
            NonlinModel::Tabulated(ref c) => NonlinModel::Tabulated(c.clone()),
        }
    }
}

/// Comparison map `φ: [0, 1] → [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum PhiModel {
    Power { p: f64 },
    /// Piecewise linear through `(σ_k, φ_k)` from `(0, 0)` to `(1, 1)`.
    PiecewiseLinear { sigmas: Vec<f64>, values: Vec<f64> },
}

impl PhiModel {
    pub fn check(&self) -> Result<(), NonlinError> {
        match self {
            PhiModel::Power { p } if !(*p > 0.0 && *p <= 1.0) => {
                Err(NonlinError::Invalid(format!("phi exponent p = {p} must lie in (0, 1]")))
            }
            PhiModel::PiecewiseLinear { sigmas, values } => {
                if sigmas.len() < 2 || sigmas.len() != values.len() {
                    return Err(NonlinError::Invalid("phi table needs at least two points".into()));
                }
                if sigmas[0] != 0.0 || *sigmas.last().unwrap() != 1.0 {
                    return Err(NonlinError::Invalid("phi table must span sigma in [0, 1]".into()));
                }
                if sigmas.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(NonlinError::Invalid("phi sigmas must be strictly increasing".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, sigma: f64) -> Result<f64, NonlinError> {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(NonlinError::SigmaOutOfRange(sigma));
        }
        Ok(match self {
            PhiModel::Power { p } => {
                if sigma == 0.0 {
                    0.0
                } else {
                    sigma.powf(*p)
                }
            }
            PhiModel::PiecewiseLinear { sigmas, values } => {
                let k = sigmas.partition_point(|&x| x <= sigma).saturating_sub(1).min(sigmas.len() - 2);
                let w = (sigma - sigmas[k]) / (sigmas[k + 1] - sigmas[k]);
                values[k] * (1.0 - w) + values[k + 1] * w
            }
        })
    }
}

/// Outcome of a sampled inequality check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledCheck {
    pub passed: bool,
    /// Smallest observed margin (negative means violation).
    pub worst_margin: f64,
    pub worst_at: [f64; 2],
}

/// Samples `G(σu) − φ(σ)G(u)` on `[0, 1] × [η, ξ]`; passes iff the minimum
/// is at least `−tol`.
pub fn check_condition_iv(
    nl: &NonlinModel,
    phi: &PhiModel,
    eta: f64,
    xi: f64,
    samples: usize,
    tol: f64,
) -> Result<SampledCheck, NonlinError> {
    if !(xi > eta && eta > 0.0) {
        return Err(NonlinError::Invalid(format!("need 0 < eta < xi, got eta = {eta}, xi = {xi}")));
    }
    let samples = samples.max(2);
    let mut sigmas: Vec<f64> = (0..samples).map(|k| k as f64 / (samples - 1) as f64).collect();
    // geometric sweep toward 0 where power maps differ most
    sigmas.extend((1..samples).map(|k| 10f64.powf(-8.0 * k as f64 / (samples - 1) as f64)));
    let mut worst = SampledCheck { passed: true, worst_margin: f64::INFINITY, worst_at: [1.0, eta] };
    for k in 0..samples {
        let u = eta + (xi - eta) * k as f64 / (samples - 1) as f64;
        let gu = nl.eval(u)?;
        for &s in &sigmas {
            let margin = nl.eval(s * u)? - phi.eval(s)? * gu;
            if margin < worst.worst_margin {
                worst.worst_margin = margin;
                worst.worst_at = [s, u];
            }
        }
    }
    worst.passed = worst.worst_margin >= -tol;
    Ok(worst)
}

/// `G(u_lo)/u_lo − (G(u_hi) − G(u_lo))/(u_hi − u_lo)`: the gap between the
/// secant from the origin and the chord; positive for strictly concave `G`
/// with `G(0) = 0`.
pub fn chord_slope_gap(model: &NonlinModel, u_lo: f64, u_hi: f64) -> Result<f64, NonlinError> {
    if !(u_lo > 0.0 && u_hi > u_lo) {
        return Err(NonlinError::BadChord { lo: u_lo, hi: u_hi });
    }
    let (g_lo, g_hi) = (model.eval(u_lo)?, model.eval(u_hi)?);
    Ok(g_lo / u_lo - (g_hi - g_lo) / (u_hi - u_lo))
}
