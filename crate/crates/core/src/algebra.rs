//! Spectral preprocessing and the finite-dimensional fixed points that bound
//! the integral solution: the Perron vector `η` with `Aη = η`, the majorant
//! `ξ` solving `ξ_i = Σ_j (a_ij + b_ij) G_j(ξ_j)`, and the contraction pair
//! `(σ, k)` that certifies the geometric rate of the successive
//! approximations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::nonlinearities::{NonlinError, NonlinModel, PhiModel};

const MAX_POWER_STEPS: usize = 1_000_000;
const MAX_MAJORANT_STEPS: usize = 10_000_000;
const MAX_DOUBLINGS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("matrix must be square, non-empty and entrywise positive: {0}")]
    NotPositive(String),
    #[error("power iteration did not converge in {0} steps")]
    PowerIterationCap(usize),
    #[error("no supersolution found up to s = {0:e}; the nonlinearity grows too fast")]
    NoSupersolution(f64),
    #[error("majorant iteration did not converge in {0} steps")]
    MajorantCap(usize),
    #[error("majorant iterate increased at step {step} in component {component} by {excess:e}")]
    MajorantNotMonotone { step: usize, component: usize, excess: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contraction parameters out of range: sigma = {sigma}, k = {k}")]
    Contraction { sigma: f64, k: f64 },
    #[error(transparent)]
    Nonlinearity(#[from] NonlinError),
}

/// Everything the iteration needs from the finite-dimensional problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    /// Kernel integral matrix, normalized to unit spectral radius.
    pub a: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub b: DMatrix<f64>,
    pub xi: DVector<f64>,
    pub sigma: f64,
    pub k: f64,
}

fn check_positive(m: &DMatrix<f64>) -> Result<(), AlgebraError> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(AlgebraError::NotPositive(format!("shape {}x{}", m.nrows(), m.ncols())));
    }
    if let Some(v) = m.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(AlgebraError::NotPositive(format!("entry {v}")));
    }
    Ok(())
}

/// Shifted power iteration from `start`; returns the dominant eigenvalue and
/// its eigenvector scaled to unit maximum.
fn dominant_pair(m: &DMatrix<f64>, start: &DVector<f64>, tol: f64) -> Result<(f64, DVector<f64>), AlgebraError> {
    check_positive(m)?;
    let n = m.nrows();
    // the shift by the largest row sum keeps the spectrum of M + sI nonnegative,
    // so eigenvalues near -ρ cannot stall convergence
    let shift = 0.5 * m.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
    let shifted = m + DMatrix::identity(n, n) * shift;
    let mut v = start.clone() / start.max();
    let mut lambda = f64::NAN;
    for _ in 0..MAX_POWER_STEPS {
        let w = &shifted * &v;
        let scale = w.max();
        let next = w / scale;
        let rayleigh = v.dot(&(m * &v)) / v.dot(&v);
        let dv = (&next - &v).amax();
        let converged = (rayleigh - lambda).abs() <= tol * rayleigh.abs() && dv <= tol;
        lambda = rayleigh;
        v = next;
        if converged {
            return Ok((lambda, v));
        }
    }
    Err(AlgebraError::PowerIterationCap(MAX_POWER_STEPS))
}

/// Dominant eigenvalue of an entrywise positive symmetric matrix, from the
/// all-ones start.
pub fn spectral_radius(m: &DMatrix<f64>, tol: f64) -> Result<f64, AlgebraError> {
    let ones = DVector::from_element(m.nrows().max(1), 1.0);
    Ok(dominant_pair(m, &ones, tol)?.0)
}

/// `(M / ρ(M), ρ(M))`.
pub fn normalize_to_unit_radius(m: &DMatrix<f64>, tol: f64) -> Result<(DMatrix<f64>, f64), AlgebraError> {
    let rho = spectral_radius(m, tol)?;
    Ok((m / rho, rho))
}

/// Positive eigenvector of `A` scaled so that `max_i η_i = 1`.
pub fn perron_vector(a: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>, AlgebraError> {
    let ones = DVector::from_element(a.nrows().max(1), 1.0);
    perron_vector_from(a, &ones, tol)
}

/// Same as [`perron_vector`] from an arbitrary positive start.
pub fn perron_vector_from(a: &DMatrix<f64>, start: &DVector<f64>, tol: f64) -> Result<DVector<f64>, AlgebraError> {
    if start.len() != a.nrows() || start.iter().any(|v| !(*v > 0.0)) {
        return Err(AlgebraError::Dimension("start vector must be positive and match the matrix".into()));
    }
    Ok(dominant_pair(a, start, tol)?.1)
}

/// `T(τ)_i = Σ_j c_ij G_j(τ_j)`.
pub fn majorant_map(c: &DMatrix<f64>, nonlins: &[NonlinModel], tau: &DVector<f64>) -> Result<DVector<f64>, AlgebraError> {
    let g = DVector::from_iterator(
        tau.len(),
        tau.iter().zip(nonlins).map(|(t, nl)| nl.eval(*t)).collect::<Result<Vec<_>, _>>()?,
    );
    Ok(c * g)
}

/// First `s·η`, `s = 2, 4, 8, …`, with `T(s·η) <= s·η` entrywise.
pub fn find_supersolution(c: &DMatrix<f64>, nonlins: &[NonlinModel], eta: &DVector<f64>) -> Result<DVector<f64>, AlgebraError> {
    let mut s = 2.0;
    for _ in 0..=MAX_DOUBLINGS {
        let tau = eta * s;
        let t = majorant_map(c, nonlins, &tau)?;
        if tau.iter().zip(t.iter()).all(|(x, y)| x >= y) {
            return Ok(tau);
        }
        s *= 2.0;
    }
    Err(AlgebraError::NoSupersolution(s))
}

/// Largest fixed point of `τ ↦ Σ_j (a_ij + b_ij) G_j(τ_j)` by monotone
/// iteration down from a supersolution `s·η`.
pub fn solve_xi(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    nonlins: &[NonlinModel],
    eta: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>, AlgebraError> {
    let n = a.nrows();
    if b.shape() != a.shape() || nonlins.len() != n || eta.len() != n {
        return Err(AlgebraError::Dimension(format!(
            "A {:?}, B {:?}, {} nonlinearities, eta of length {}",
            a.shape(),
            b.shape(),
            nonlins.len(),
            eta.len()
        )));
    }
    let c = a + b;
    let mut tau = find_supersolution(&c, nonlins, eta)?;
    for step in 0..MAX_MAJORANT_STEPS {
        let next = majorant_map(&c, nonlins, &tau)?;
        for i in 0..n {
            let excess = next[i] - tau[i];
            if excess > 8.0 * f64::EPSILON * tau[i].abs() {
                return Err(AlgebraError::MajorantNotMonotone { step, component: i, excess });
            }
        }
        let diff = (&next - &tau).amax();
        tau = next;
        if diff <= tol {
            return Ok(tau);
        }
    }
    Err(AlgebraError::MajorantCap(MAX_MAJORANT_STEPS))
}

/// `σ = min_i η_i/ξ_i` and `k = (1 − φ(σ/2)) / (1 − σ/2)`.
pub fn contraction_params(eta: &DVector<f64>, xi: &DVector<f64>, phi: &PhiModel) -> Result<(f64, f64), AlgebraError> {
    if eta.len() != xi.len() || eta.is_empty() {
        return Err(AlgebraError::Dimension("eta and xi must have the same non-zero length".into()));
    }
    let sigma = eta.iter().zip(xi.iter()).map(|(e, x)| e / x).fold(f64::INFINITY, f64::min);
    let half = 0.5 * sigma;
    let k = if half > 0.0 && half < 1.0 { (1.0 - phi.eval(half)?) / (1.0 - half) } else { f64::NAN };
    if !(sigma > 0.0 && sigma < 1.0 && k > 0.0 && k < 1.0) {
        return Err(AlgebraError::Contraction { sigma, k });
    }
    Ok((sigma, k))
}

/// Smallest `n >= 1` with `kⁿ(1 − σ)/(1 − k) <= tol`.
pub fn a_priori_iterations(sigma: f64, k: f64, tol: f64) -> usize {
    let lead = (1.0 - sigma) / (1.0 - k);
    let mut n = 1usize;
    let mut bound = k * lead;
    while bound > tol {
        n += 1;
        bound *= k;
    }
    n
}

/// Contraction-rate envelope `kⁿ(1 − σ)/(1 − k)` on `sup|f⁽ⁿ⁾ − f|`.
pub fn error_envelope(sigma: f64, k: f64, n: usize) -> f64 {
    k.powi(n as i32) * (1.0 - sigma) / (1.0 - k)
}

impl SpectralData {
    /// Runs the full finite-dimensional pipeline on an already-normalized `A`.
    pub fn compute(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        nonlins: &[NonlinModel],
        phi: &PhiModel,
        tol_eig: f64,
        tol_alg: f64,
    ) -> Result<Self, AlgebraError> {
        let eta = perron_vector(&a, tol_eig)?;
        Self::with_eta(a, b, eta, nonlins, phi, tol_alg)
    }

    pub fn with_eta(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        eta: DVector<f64>,
        nonlins: &[NonlinModel],
        phi: &PhiModel,
        tol_alg: f64,
    ) -> Result<Self, AlgebraError> {
        let xi = solve_xi(&a, &b, nonlins, &eta, tol_alg)?;
        let (sigma, k) = contraction_params(&eta, &xi, phi)?;
        Ok(Self { a, eta, b, xi, sigma, k })
    }
}
