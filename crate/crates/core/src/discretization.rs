//! Truncated uniform grid and the discrete right-hand side
//! `f_i(x) = Σ_j ∫ K_ij(x − t) μ_j(t) G_j(f_j(t)) dt`.
//!
//! The regular part (weight 1) is the lattice sum `h·Σ_m K_ij(x_p − x_m)·g_m`
//! over all of `hℤ`; nodes beyond `±R` carry the continuation value `η`, so
//! their contribution collapses into a per-node tail
//! `G_j(η_j)·h·Σ_{k > dist} K_ij(k·h)`. The singular part (weight `μ_j − 1`)
//! lives on `[−R, R]` and is integrated by product quadrature: the cofactor
//! `K_ij(x − t)·G_j(f_j(t))` is taken linear on each cell and integrated
//! exactly against `μ_j − 1`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::SpectralData;
use crate::kernels::{KernelError, KernelModel};
use crate::nonlinearities::{NonlinError, NonlinModel};
use crate::problem::ProblemSpec;
use crate::weights::{WeightError, WeightModel};

const MAX_RADIUS: f64 = 1_048_576.0;
/// Node count above which `Auto` switches to the FFT path.
const FFT_THRESHOLD: usize = 4096;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("no truncation radius up to {radius} meets the tail tolerance {tol:e}")]
    TruncationCap { radius: f64, tol: f64 },
    #[error("negative quadrature weight {value:e} in {what}")]
    NegativeWeight { what: String, value: f64 },
    #[error("field does not match the plan: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Nonlinearity(#[from] NonlinError),
}

/// Nodes `x_p = (p − n_cells/2)·h`, `p = 0..=n_cells`, with `h = 2R/n_cells`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    radius: f64,
    n_cells: usize,
}

impl Grid {
    pub fn new(radius: f64, n_cells: usize) -> Result<Self, DiscError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(DiscError::Grid(format!("radius {radius} must be positive")));
        }
        if n_cells == 0 || n_cells % 2 != 0 {
            return Err(DiscError::Grid(format!("n_cells = {n_cells} must be even and positive")));
        }
        Ok(Self { radius, n_cells })
    }

    /// Smallest even cell count whose spacing does not exceed `h`.
    pub fn with_spacing(radius: f64, h: f64) -> Result<Self, DiscError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(DiscError::Grid(format!("spacing {h} must be positive")));
        }
        let q = radius / h;
        // 32 / 0.05 is 640.0000000000001 in floating point
        let half = if (q - q.round()).abs() <= 1e-9 * q.max(1.0) { q.round() } else { q.ceil() };
        Self::new(radius, 2 * (half.max(1.0) as usize))
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn h(&self) -> f64 {
        2.0 * self.radius / self.n_cells as f64
    }

    /// Index of the node at `x = 0`.
    pub fn center(&self) -> usize {
        self.n_cells / 2
    }

    pub fn node(&self, p: usize) -> f64 {
        (p as f64 - (self.n_cells / 2) as f64) * self.h()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|p| self.node(p)).collect()
    }
}

/// `N` rows of nodal samples plus the constant continuation beyond the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVector {
    pub grid: Grid,
    pub values: Vec<Vec<f64>>,
    pub boundary: DVector<f64>,
}

impl FieldVector {
    pub fn constant(grid: Grid, levels: &DVector<f64>, boundary: &DVector<f64>) -> Self {
        let values = levels.iter().map(|&c| vec![c; grid.n_nodes()]).collect();
        Self { grid, values, boundary: boundary.clone() }
    }

    pub fn from_fn<F: Fn(usize, f64) -> f64>(grid: Grid, boundary: &DVector<f64>, f: F) -> Self {
        let nodes = grid.nodes();
        let values = (0..boundary.len()).map(|i| nodes.iter().map(|&x| f(i, x)).collect()).collect();
        Self { grid, values, boundary: boundary.clone() }
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// `max_{i,p} |f_i(x_p) − g_i(x_p)|`.
    pub fn sup_distance(&self, other: &FieldVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// `max_p |f_i(x_p) − f_i(−x_p)|` over all components.
    pub fn asymmetry(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|row| row.iter().zip(row.iter().rev()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let values = self.values.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect();
        Self { values, ..self.clone() }
    }

    fn check_against(&self, grid: &Grid, n: usize) -> Result<(), DiscError> {
        if self.grid != *grid {
            return Err(DiscError::Mismatch(format!("grid {:?} vs plan grid {:?}", self.grid, grid)));
        }
        if self.values.len() != n || self.values.iter().any(|r| r.len() != grid.n_nodes()) {
            return Err(DiscError::Mismatch(format!("expected {n} rows of {} nodes", grid.n_nodes())));
        }
        if let Some(v) = self.values.iter().flatten().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(DiscError::Mismatch(format!("field value {v} is not finite and nonnegative")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvolutionMode {
    #[default]
    Auto,
    Direct,
    Fft,
}

#[derive(Clone)]
struct FftData {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Spectrum of the even lag sequence per `(i, j)`.
    spectra: Vec<Vec<Complex<f64>>>,
}

impl fmt::Debug for FftData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftData").field("len", &self.len).finish_non_exhaustive()
    }
}

/// Precomputed nodal weights for one grid; immutable after construction.
#[derive(Debug, Clone)]
pub struct OperatorPlan {
    grid: Grid,
    n: usize,
    /// `K_ij(k·h)`, `k = 0..=n_cells`, at index `i·n + j`.
    lags: Vec<Vec<f64>>,
    /// Regular-part node weights.
    trapezoid: Vec<f64>,
    /// Product-quadrature node weights of `μ_j − 1`.
    singular: Vec<Vec<f64>>,
    /// Continuation contribution per component and node.
    tails: Vec<Vec<f64>>,
    mode: ConvolutionMode,
    fft: Option<FftData>,
}

/// Smallest `R = 1, 2, 4, …` with `max_ij ∫_{|τ|>R/2} K_ij · g_max <= tol` and
/// every weight's excess mass outside `[−R/2, R/2]` at most `tol`.
pub fn choose_truncation(kernel: &KernelModel, weights: &[WeightModel], g_max: f64, tol: f64) -> Result<f64, DiscError> {
    if !(tol > 0.0) {
        return Err(DiscError::Grid(format!("truncation tolerance {tol} must be positive")));
    }
    let n = kernel.size();
    let mut radius: f64 = 1.0;
    while radius <= MAX_RADIUS {
        let half = 0.5 * radius;
        let mut kernel_tail: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                kernel_tail = kernel_tail.max(kernel.tail_mass(i, j, half)?);
            }
        }
        let mut weight_tail: f64 = 0.0;
        for w in weights {
            weight_tail = weight_tail.max(w.excess_outside(half)?);
        }
        if kernel_tail * g_max <= tol && weight_tail <= tol {
            return Ok(radius);
        }
        radius *= 2.0;
    }
    Err(DiscError::TruncationCap { radius: MAX_RADIUS, tol })
}

/// Plan for the problem's own kernel and weights, continued by `G_j(η_j)`.
pub fn build_plan(
    spec: &ProblemSpec,
    grid: Grid,
    spectral: &SpectralData,
    mode: ConvolutionMode,
) -> Result<OperatorPlan, DiscError> {
    let boundary = spec
        .nonlins
        .iter()
        .zip(spectral.eta.iter())
        .map(|(g, e)| g.eval(*e))
        .collect::<Result<Vec<_>, _>>()?;
    OperatorPlan::new(&spec.kernel, &spec.weights, grid, &DVector::from_vec(boundary), mode)
}

/// `S[k0] = h·Σ_{k ≥ k0} K_ij(k·h)` for `k0 = 0..=cells + 1`; the lattice
/// beyond the grid is summed until the terms vanish, then closed with the
/// integral of the remaining tail.
fn lattice_suffix(kernel: &KernelModel, i: usize, j: usize, h: f64, cells: usize) -> Result<Vec<f64>, DiscError> {
    const MAX_TERMS: usize = 10_000_000;
    let peak = kernel.eval(i, j, 0.0)?;
    let mut beyond = 0.0;
    let mut k = cells + 1;
    loop {
        let v = kernel.eval(i, j, k as f64 * h)?;
        if v <= 1e-18 * peak || k - cells > MAX_TERMS {
            // midpoint-consistent closure of what is left
            beyond += 0.5 * kernel.tail_mass(i, j, (k as f64 - 0.5) * h)?;
            break;
        }
        beyond += h * v;
        k += 1;
    }
    let mut suffix = vec![0.0; cells + 2];
    suffix[cells + 1] = beyond;
    for k in (0..=cells).rev() {
        suffix[k] = suffix[k + 1] + h * kernel.eval(i, j, k as f64 * h)?;
    }
    Ok(suffix)
}

fn nonneg(what: impl FnOnce() -> String, value: f64, scale: f64) -> Result<f64, DiscError> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -(1e-14 * scale).max(f64::MIN_POSITIVE) {
        // cancellation noise in `mass − right`, or underflow far out
        Ok(0.0)
    } else {
        Err(DiscError::NegativeWeight { what: what(), value })
    }
}

impl OperatorPlan {
    /// `boundary_g[j]` is `G_j` at the continuation value.
    pub fn new(
        kernel: &KernelModel,
        weights: &[WeightModel],
        grid: Grid,
        boundary_g: &DVector<f64>,
        mode: ConvolutionMode,
    ) -> Result<Self, DiscError> {
        let n = kernel.size();
        if weights.len() != n || boundary_g.len() != n {
            return Err(DiscError::Mismatch(format!(
                "{n} components but {} weights and {} boundary values",
                weights.len(),
                boundary_g.len()
            )));
        }
        let h = grid.h();
        let nodes = grid.n_nodes();
        let cells = grid.n_cells();

        let mut lags = Vec::with_capacity(n * n);
        let mut suffixes = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let row = (0..nodes).map(|k| kernel.eval(i, j, k as f64 * h)).collect::<Result<Vec<_>, _>>()?;
                if let Some(v) = row.iter().find(|v| !(**v >= 0.0)) {
                    return Err(DiscError::NegativeWeight { what: format!("kernel lag table ({i}, {j})"), value: *v });
                }
                lags.push(row);
                suffixes.push(lattice_suffix(kernel, i, j, h, cells)?);
            }
        }

        // the lattice continues past ±R, so every node carries the full weight h
        let trapezoid = vec![h; nodes];

        let mut singular = Vec::with_capacity(n);
        for (j, w) in weights.iter().enumerate() {
            let mut v = vec![0.0; nodes];
            if !matches!(w, WeightModel::Unit) {
                for c in 0..cells {
                    let cw = w.cell_weights(grid.node(c), grid.node(c + 1))?;
                    let what = || format!("cell {c} of weight {}", j + 1);
                    v[c] += nonneg(what, cw.left, cw.mass)?;
                    v[c + 1] += nonneg(what, cw.right, cw.mass)?;
                }
            }
            singular.push(v);
        }

        let mut tails = vec![vec![0.0; nodes]; n];
        for (i, tail) in tails.iter_mut().enumerate() {
            for (p, t) in tail.iter_mut().enumerate() {
                // first lattice lags past the right and left ends of the grid
                *t = (0..n).map(|j| boundary_g[j] * (suffixes[i * n + j][cells - p + 1] + suffixes[i * n + j][p + 1])).sum();
            }
            if let Some(v) = tail.iter().find(|v| !(**v >= 0.0)) {
                return Err(DiscError::NegativeWeight { what: format!("tail correction of row {}", i + 1), value: *v });
            }
        }

        let use_fft = match mode {
            ConvolutionMode::Auto => nodes > FFT_THRESHOLD,
            ConvolutionMode::Direct => false,
            ConvolutionMode::Fft => true,
        };
        let fft = use_fft.then(|| Self::fft_data(&lags, nodes));
        Ok(Self { grid, n, lags, trapezoid, singular, tails, mode, fft })
    }

    fn fft_data(lags: &[Vec<f64>], nodes: usize) -> FftData {
        let len = (2 * nodes - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let spectra = lags
            .iter()
            .map(|lag| {
                let mut buf = vec![Complex::new(0.0, 0.0); len];
                buf[0].re = lag[0];
                for k in 1..nodes {
                    buf[k].re = lag[k];
                    buf[len - k].re = lag[k];
                }
                forward.process(&mut buf);
                buf
            })
            .collect();
        FftData { len, forward, inverse, spectra }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> ConvolutionMode {
        self.mode
    }

    pub fn uses_fft(&self) -> bool {
        self.fft.is_some()
    }

    /// Same plan with the weight excess switched off (`μ ≡ 1`).
    pub fn without_weights(&self) -> Self {
        let singular = self.singular.iter().map(|v| vec![0.0; v.len()]).collect();
        Self { singular, ..self.clone() }
    }

    /// Same plan forced onto one convolution path.
    pub fn with_mode(&self, mode: ConvolutionMode) -> Self {
        let use_fft = matches!(mode, ConvolutionMode::Fft)
            || (matches!(mode, ConvolutionMode::Auto) && self.grid.n_nodes() > FFT_THRESHOLD);
        let fft = if use_fft { self.fft.clone().or_else(|| Some(Self::fft_data(&self.lags, self.grid.n_nodes()))) } else { None };
        Self { mode, fft, ..self.clone() }
    }

    /// Sum of the product-quadrature node weights of `μ_j − 1`.
    pub fn singular_mass(&self, j: usize) -> f64 {
        self.singular[j].iter().sum()
    }

    /// `h·Σ_m K_ij(x_p − x_m)` over the grid nodes.
    pub fn regular_row_sum(&self, i: usize, j: usize, p: usize) -> f64 {
        let lag = &self.lags[i * self.n + j];
        (0..self.grid.n_nodes()).map(|m| lag[p.abs_diff(m)] * self.trapezoid[m]).sum()
    }

    /// Continuation contribution at node `p` of row `i`.
    pub fn tail(&self, i: usize, p: usize) -> f64 {
        self.tails[i][p]
    }

    fn weighted(&self, f: &FieldVector, nonlins: &[NonlinModel]) -> Result<Vec<Vec<f64>>, DiscError> {
        f.check_against(&self.grid, self.n)?;
        if nonlins.len() != self.n {
            return Err(DiscError::Mismatch(format!("{} nonlinearities for {} components", nonlins.len(), self.n)));
        }
        let mut out = Vec::with_capacity(self.n);
        for (j, g) in nonlins.iter().enumerate() {
            let row = f.values[j]
                .iter()
                .zip(self.trapezoid.iter().zip(&self.singular[j]))
                .map(|(&v, (&w, &s))| g.eval(v).map(|gv| (w + s) * gv))
                .collect::<Result<Vec<_>, _>>()?;
            out.push(row);
        }
        Ok(out)
    }

    /// Discrete right-hand side at every node, by the plan's convolution path.
    pub fn apply(&self, f: &FieldVector, nonlins: &[NonlinModel]) -> Result<FieldVector, DiscError> {
        let u = self.weighted(f, nonlins)?;
        let values = match &self.fft {
            Some(fft) => self.convolve_fft(fft, &u),
            None => self.convolve_direct(&u),
        };
        Ok(FieldVector { grid: self.grid, values, boundary: f.boundary.clone() })
    }

    /// Reference `O(n²)` evaluation regardless of the configured path.
    pub fn apply_direct(&self, f: &FieldVector, nonlins: &[NonlinModel]) -> Result<FieldVector, DiscError> {
        let u = self.weighted(f, nonlins)?;
        Ok(FieldVector { grid: self.grid, values: self.convolve_direct(&u), boundary: f.boundary.clone() })
    }

    fn convolve_direct(&self, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let nodes = self.grid.n_nodes();
        let mut out = self.tails.clone();
        for (i, row) in out.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                let lag = &self.lags[i * self.n + j];
                for (p, o) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for m in 0..p {
                        s += lag[p - m] * uj[m];
                    }
                    for m in p..nodes {
                        s += lag[m - p] * uj[m];
                    }
                    *o += s;
                }
            }
        }
        out
    }

    fn convolve_fft(&self, fft: &FftData, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let nodes = self.grid.n_nodes();
        let spectra: Vec<Vec<Complex<f64>>> = u
            .iter()
            .map(|uj| {
                let mut buf = vec![Complex::new(0.0, 0.0); fft.len];
                for (b, &v) in buf.iter_mut().zip(uj) {
                    b.re = v;
                }
                fft.forward.process(&mut buf);
                buf
            })
            .collect();
        let scale = 1.0 / fft.len as f64;
        let mut out = self.tails.clone();
        for (i, row) in out.iter_mut().enumerate() {
            let mut acc = vec![Complex::new(0.0, 0.0); fft.len];
            for (j, uj) in spectra.iter().enumerate() {
                let kij = &fft.spectra[i * self.n + j];
                for ((a, x), k) in acc.iter_mut().zip(uj).zip(kij) {
                    *a += x * k;
                }
            }
            fft.inverse.process(&mut acc);
            for (o, a) in row.iter_mut().zip(acc.iter().take(nodes)) {
                // roundoff can dip below zero where the exact sum is tiny
                *o = (*o + a.re * scale).max(0.0);
            }
        }
        out
    }
}

/// `W f` for the given plan.
pub fn apply_operator(plan: &OperatorPlan, f: &FieldVector, nonlins: &[NonlinModel]) -> Result<FieldVector, DiscError> {
    plan.apply(f, nonlins)
}

/// Quadrature error on a constant field: with the weights switched off,
/// `W(η)` must reproduce `Σ_j a_ij G_j(η_j)` at every node.
pub fn consistency_error(
    plan: &OperatorPlan,
    nonlins: &[NonlinModel],
    a: &nalgebra::DMatrix<f64>,
    levels: &DVector<f64>,
) -> Result<f64, DiscError> {
    let bare = plan.without_weights();
    let f = FieldVector::constant(plan.grid, levels, levels);
    let out = bare.apply_direct(&f, nonlins)?;
    let g = DVector::from_vec(
        nonlins.iter().zip(levels.iter()).map(|(g, c)| g.eval(*c)).collect::<Result<Vec<_>, _>>()?,
    );
    let exact = a * g;
    Ok(out
        .values
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            let e = exact[i];
            row.iter().map(move |v| (v - e).abs())
        })
        .fold(0.0, f64::max))
}
