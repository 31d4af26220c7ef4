//! Successive approximations `f⁽ⁿ⁺¹⁾ = W f⁽ⁿ⁾` from the majorant, with the
//! monotonicity and two-sided bounds enforced at every step, plus the
//! residual, asymptotic and uniqueness diagnostics of the limit.

use log::{debug, warn};
use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::algebra::{a_priori_iterations, error_envelope, SpectralData};
use crate::discretization::{DiscError, FieldVector, OperatorPlan};
use crate::nonlinearities::NonlinModel;

/// Relative roundoff floor for the quadrature-error estimate.
pub const ROUNDOFF_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solve options: {0}")]
    Options(String),
    #[error(
        "iterate increased at step {step}, component {component}, x = {x}: by {excess:e} (slack {slack:e}); the grid is likely too coarse"
    )]
    Monotonicity { step: usize, component: usize, node: usize, x: f64, excess: f64, slack: f64 },
    #[error("iterate left [{lower}, {upper}] at step {step}, component {component}, x = {x}: value {value} (slack {slack:e})")]
    Bounds { step: usize, component: usize, node: usize, x: f64, value: f64, lower: f64, upper: f64, slack: f64 },
    #[error("no convergence after {iterations} iterations (last step {last_step:e}, target {tol:e})")]
    IterationCap { iterations: usize, last_step: f64, tol: f64 },
    #[error("start is not a supersolution: W(start) exceeds start by {excess:e} at component {component}, x = {x}")]
    NotSupersolution { component: usize, x: f64, excess: f64 },
    #[error(transparent)]
    Discretization(#[from] DiscError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOptions {
    pub tol_stop: f64,
    pub max_iters: usize,
    /// Permitted pointwise violation of monotonicity and of the bounds.
    pub mono_slack: f64,
    pub use_a_priori: bool,
}

impl SolveOptions {
    pub fn new(tol_stop: f64, max_iters: usize, mono_slack: f64) -> Self {
        Self { tol_stop, max_iters, mono_slack, use_a_priori: false }
    }

    fn check(&self) -> Result<(), SolveError> {
        if !(self.tol_stop > 0.0) {
            return Err(SolveError::Options(format!("tol_stop = {} must be positive", self.tol_stop)));
        }
        if !(self.mono_slack >= 0.0) {
            return Err(SolveError::Options(format!("mono_slack = {} must be nonnegative", self.mono_slack)));
        }
        if self.max_iters == 0 {
            return Err(SolveError::Options("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `sup|f⁽ⁿ⁾ − f⁽ⁿ⁺¹⁾| <= tol_stop`.
    Converged,
    /// Stopped at the a-priori count before the step criterion fired.
    APriori,
}

/// One recorded step `f⁽ⁿ⁾ → f⁽ⁿ⁺¹⁾`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub n: usize,
    /// `d_n = max_i sup_x |f_i⁽ⁿ⁾ − f_i⁽ⁿ⁺¹⁾|`.
    pub step_diff: f64,
    /// `kⁿ(1 − σ)`.
    pub step_bound: f64,
    /// `kⁿ(1 − σ)/(1 − k)`.
    pub envelope: f64,
    /// `max(f⁽ⁿ⁺¹⁾ − f⁽ⁿ⁾)`, positive only if monotonicity is violated.
    pub mono_violation: f64,
    /// Nodes of `f⁽ⁿ⁺¹⁾` strictly below `η`.
    pub below_lower: usize,
    /// Nodes of `f⁽ⁿ⁺¹⁾` strictly above the start.
    pub above_upper: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsSummary {
    pub max_mono_violation: f64,
    /// `min (upper_i − f_i)` over all iterates and nodes.
    pub min_gap_below_upper: f64,
    /// `min (f_i − η_i)` over all iterates and nodes.
    pub min_gap_above_lower: f64,
    /// Steps whose violations were nonzero but within slack.
    pub slack_warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Asymptotics {
    /// `max(|f_i(−R) − η_i|, |f_i(R) − η_i|)`.
    pub edge_deviation: f64,
    /// `∫_{R/2 < |x| < R} |f_i − η_i| dx`.
    pub tail_integral: f64,
    /// Mass over `3R/4 < |x| < R` divided by mass over `R/2 < |x| < 3R/4`.
    pub half_tail_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub field: FieldVector,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<TraceEntry>,
    pub bounds: BoundsSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionReport {
    pub field: FieldVector,
    pub iterations: usize,
    pub termination: Termination,
    pub a_priori_iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub bounds: BoundsSummary,
    pub residual: f64,
    pub asymptotics: Vec<Asymptotics>,
    pub uniqueness_deviation: Option<f64>,
}

/// Measured quadrature error floored at roundoff.
pub fn quadrature_error_estimate(consistency: f64, xi: &DVector<f64>) -> f64 {
    consistency.max(ROUNDOFF_FLOOR * xi.max())
}

/// Runs the iteration from an arbitrary supersolution `start`, enforcing
/// `lower − slack <= f⁽ⁿ⁾ <= upper + slack` and `f⁽ⁿ⁺¹⁾ <= f⁽ⁿ⁾ + slack`.
pub fn iterate(
    plan: &OperatorPlan,
    nonlins: &[NonlinModel],
    start: FieldVector,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    spectral: &SpectralData,
    opts: &SolveOptions,
) -> Result<IterationOutcome, SolveError> {
    opts.check()?;
    let (sigma, k) = (spectral.sigma, spectral.k);
    let a_priori = a_priori_iterations(sigma, k, opts.tol_stop);
    let grid = plan.grid();
    let slack = opts.mono_slack;
    let mut bounds = BoundsSummary {
        max_mono_violation: 0.0,
        min_gap_below_upper: f64::INFINITY,
        min_gap_above_lower: f64::INFINITY,
        slack_warnings: 0,
    };
    let mut trace = Vec::new();
    let mut f = start;
    let mut last_step = f64::INFINITY;
    for n in 0..opts.max_iters {
        let next = plan.apply(&f, nonlins)?;
        let mut step_diff: f64 = 0.0;
        let mut mono: f64 = f64::NEG_INFINITY;
        let (mut below, mut above) = (0, 0);
        let mut warned = false;
        for (i, (old, new)) in f.values.iter().zip(&next.values).enumerate() {
            for (p, (&a, &b)) in old.iter().zip(new).enumerate() {
                step_diff = step_diff.max((a - b).abs());
                let rise = b - a;
                mono = mono.max(rise);
                if rise > slack {
                    return Err(SolveError::Monotonicity { step: n, component: i, node: p, x: grid.node(p), excess: rise, slack });
                }
                let (lo, hi) = (lower[i], upper[i]);
                if b < lo - slack || b > hi + slack {
                    return Err(SolveError::Bounds {
                        step: n,
                        component: i,
                        node: p,
                        x: grid.node(p),
                        value: b,
                        lower: lo,
                        upper: hi,
                        slack,
                    });
                }
                below += usize::from(b < lo);
                above += usize::from(b > hi);
                warned |= rise > 0.0 || b < lo || b > hi;
                bounds.min_gap_above_lower = bounds.min_gap_above_lower.min(b - lo);
                bounds.min_gap_below_upper = bounds.min_gap_below_upper.min(hi - b);
            }
        }
        if warned {
            bounds.slack_warnings += 1;
            warn!("step {n}: violation within slack (rise {mono:e}, {below} below, {above} above)");
        }
        bounds.max_mono_violation = bounds.max_mono_violation.max(mono.max(0.0));
        trace.push(TraceEntry {
            n,
            step_diff,
            step_bound: k.powi(n as i32) * (1.0 - sigma),
            envelope: error_envelope(sigma, k, n),
            mono_violation: mono.max(0.0),
            below_lower: below,
            above_upper: above,
        });
        debug!("step {n}: d = {step_diff:e}");
        f = next;
        last_step = step_diff;
        let iterations = n + 1;
        if step_diff <= opts.tol_stop {
            return Ok(IterationOutcome { field: f, iterations, termination: Termination::Converged, trace, bounds });
        }
        if opts.use_a_priori && iterations >= a_priori {
            return Ok(IterationOutcome { field: f, iterations, termination: Termination::APriori, trace, bounds });
        }
    }
    Err(SolveError::IterationCap { iterations: opts.max_iters, last_step, tol: opts.tol_stop })
}

/// Iterates from `f⁽⁰⁾ ≡ ξ` and assembles the full report (without the
/// uniqueness probe).
pub fn solve(
    plan: &OperatorPlan,
    nonlins: &[NonlinModel],
    spectral: &SpectralData,
    opts: &SolveOptions,
) -> Result<SolutionReport, SolveError> {
    let start = FieldVector::constant(plan.grid(), &spectral.xi, &spectral.eta);
    let a_priori = a_priori_iterations(spectral.sigma, spectral.k, opts.tol_stop);
    log::info!("a-priori iteration count for tol {:e}: {a_priori}", opts.tol_stop);
    let out = iterate(plan, nonlins, start, &spectral.eta, &spectral.xi, spectral, opts)?;
    let res = residual(plan, &out.field, nonlins)?;
    let asym = asymptotics_report(&out.field, &spectral.eta);
    Ok(SolutionReport {
        field: out.field,
        iterations: out.iterations,
        termination: out.termination,
        a_priori_iterations: a_priori,
        trace: out.trace,
        bounds: out.bounds,
        residual: res,
        asymptotics: asym,
        uniqueness_deviation: None,
    })
}

/// Restarts from `scale·ξ` and returns the sup distance between the two
/// limits; refuses to run if `scale·ξ` is not a supersolution.
pub fn uniqueness_probe(
    plan: &OperatorPlan,
    nonlins: &[NonlinModel],
    spectral: &SpectralData,
    base: &SolutionReport,
    scale: f64,
    opts: &SolveOptions,
) -> Result<f64, SolveError> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(SolveError::Options(format!("uniqueness scale {scale} must be at least 1")));
    }
    let top = &spectral.xi * scale;
    let start = FieldVector::constant(plan.grid(), &top, &spectral.eta);
    let image = plan.apply(&start, nonlins)?;
    for (i, row) in image.values.iter().enumerate() {
        for (p, v) in row.iter().enumerate() {
            let excess = v - top[i];
            if excess > opts.mono_slack {
                return Err(SolveError::NotSupersolution { component: i, x: plan.grid().node(p), excess });
            }
        }
    }
    let out = iterate(plan, nonlins, start, &spectral.eta, &top, spectral, opts)?;
    Ok(out.field.sup_distance(&base.field))
}

/// `‖f − W f‖_∞`.
pub fn residual(plan: &OperatorPlan, f: &FieldVector, nonlins: &[NonlinModel]) -> Result<f64, SolveError> {
    Ok(plan.apply(f, nonlins)?.sup_distance(f))
}

/// Edge deviation, outer-band tail integral and quarter-band decay ratio per
/// component.
pub fn asymptotics_report(f: &FieldVector, eta: &DVector<f64>) -> Vec<Asymptotics> {
    let grid = f.grid;
    let r = grid.radius();
    let h = grid.h();
    let nodes = grid.nodes();
    f.values
        .iter()
        .zip(eta.iter())
        .map(|(row, &e)| {
            let last = row.len() - 1;
            let edge_deviation = (row[0] - e).abs().max((row[last] - e).abs());
            // trapezoid over the bands, with half weight on band edges
            let band = |lo: f64, hi: f64| -> f64 {
                nodes
                    .iter()
                    .zip(row)
                    .filter(|(x, _)| x.abs() >= lo - 1e-9 * h && x.abs() <= hi + 1e-9 * h)
                    .map(|(x, v)| {
                        let on_edge = (x.abs() - lo).abs() <= 1e-9 * h || (x.abs() - hi).abs() <= 1e-9 * h;
                        (if on_edge { 0.5 } else { 1.0 }) * h * (v - e).abs()
                    })
                    .sum()
            };
            let inner = band(0.5 * r, 0.75 * r);
            let outer = band(0.75 * r, r);
            let half_tail_ratio = if inner > 0.0 { outer / inner } else { 0.0 };
            Asymptotics { edge_deviation, tail_integral: band(0.5 * r, r), half_tail_ratio }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{ConvolutionMode, Grid};
    use crate::kernels::KernelModel;
    use crate::nonlinearities::PhiModel;
    use crate::weights::WeightModel;
    use nalgebra::DMatrix;

    fn setup(w: WeightModel, radius: f64, h: f64) -> (OperatorPlan, Vec<NonlinModel>, SpectralData) {
        let kernel = KernelModel::gaussian(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let s = kernel.scalars(1e-12).unwrap();
        let b = crate::weights::build_b_matrix(std::slice::from_ref(&w), &s).unwrap().b;
        let g = vec![NonlinModel::Power { alpha: 0.5, eta: 1.0 }];
        let phi = PhiModel::Power { p: 0.5 };
        let spectral = if matches!(w, WeightModel::Unit) {
            // ξ = η is degenerate; use the scalar flagship σ, k for the trace only
            SpectralData {
                a: s.a.clone(),
                eta: DVector::from_element(1, 1.0),
                b,
                xi: DVector::from_element(1, 1.0),
                sigma: 1.0 / 1.44,
                k: 0.629_225_385_719_301,
            }
        } else {
            SpectralData::compute(s.a.clone(), b, &g, &phi, 1e-14, 1e-14).unwrap()
        };
        let plan = OperatorPlan::new(&kernel, &[w], Grid::with_spacing(radius, h).unwrap(), &DVector::from_element(1, 1.0), ConvolutionMode::Direct)
            .unwrap();
        (plan, g, spectral)
    }

    #[test]
    fn eta_is_fixed_without_weights() {
        let (plan, g, spectral) = setup(WeightModel::Unit, 8.0, 0.1);
        let eta = FieldVector::constant(plan.grid(), &spectral.eta, &spectral.eta);
        assert!(residual(&plan, &eta, &g).unwrap() <= 1e-14);
        let opts = SolveOptions::new(1e-12, 5, 1e-13);
        let out = iterate(&plan, &g, eta, &spectral.eta, &spectral.eta, &spectral, &opts).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.trace[0].step_diff <= 1e-14);
    }

    #[test]
    fn coarse_flagship_converges_monotonically() {
        let (plan, g, spectral) = setup(WeightModel::ExpSqrt { eps: 0.1 }, 16.0, 0.2);
        let opts = SolveOptions::new(1e-8, 200, 1e-12);
        let rep = solve(&plan, &g, &spectral, &opts).unwrap();
        assert_eq!(rep.termination, Termination::Converged);
        assert!(rep.iterations <= rep.a_priori_iterations);
        assert!(rep.residual <= 1e-8);
        let f = &rep.field.values[0];
        assert!(f.iter().all(|v| *v >= 1.0 - 1e-12 && *v <= 1.44));
        assert!(f[plan.grid().center()] > f[0]);
        assert!(rep.field.asymmetry() <= 1e-12);
        // the step bound is stated for n >= 1
        for t in rep.trace.iter().skip(1) {
            assert!(t.step_diff <= t.step_bound + 1e-12, "{t:?}");
        }
    }

    #[test]
    fn a_priori_stop_is_reported() {
        let (plan, g, spectral) = setup(WeightModel::ExpSqrt { eps: 0.1 }, 8.0, 0.25);
        let mut opts = SolveOptions::new(1e-3, 200, 1e-12);
        opts.use_a_priori = true;
        let rep = solve(&plan, &g, &spectral, &opts).unwrap();
        assert!(rep.iterations <= rep.a_priori_iterations);
    }

    #[test]
    fn iteration_cap_is_an_error() {
        let (plan, g, spectral) = setup(WeightModel::ExpSqrt { eps: 0.1 }, 8.0, 0.25);
        let opts = SolveOptions::new(1e-14, 3, 1e-12);
        assert!(matches!(solve(&plan, &g, &spectral, &opts), Err(SolveError::IterationCap { iterations: 3, .. })));
    }

    #[test]
    fn uniqueness_probe_trivial_and_double() {
        let (plan, g, spectral) = setup(WeightModel::ExpSqrt { eps: 0.1 }, 8.0, 0.25);
        let opts = SolveOptions::new(1e-10, 400, 1e-12);
        let base = solve(&plan, &g, &spectral, &opts).unwrap();
        assert_eq!(uniqueness_probe(&plan, &g, &spectral, &base, 1.0, &opts).unwrap(), 0.0);
        let dev = uniqueness_probe(&plan, &g, &spectral, &base, 2.0, &opts).unwrap();
        assert!(dev <= 2e-10, "{dev}");
    }

    #[test]
    fn non_supersolution_start_is_refused() {
        let (plan, g, spectral) = setup(WeightModel::ExpSqrt { eps: 0.1 }, 8.0, 0.25);
        let opts = SolveOptions::new(1e-8, 100, 1e-12);
        let base = solve(&plan, &g, &spectral, &opts).unwrap();
        // below ξ the constant is no longer a supersolution near the bump
        let spec2 = SpectralData { xi: &spectral.xi * 0.9, ..spectral.clone() };
        let err = uniqueness_probe(&plan, &g, &spec2, &base, 1.0, &opts).unwrap_err();
        assert!(matches!(err, SolveError::NotSupersolution { .. }));
    }

    #[test]
    fn asymptotics_of_constant_field_vanish() {
        let g = Grid::new(4.0, 40).unwrap();
        let eta = DVector::from_element(2, 0.7);
        let f = FieldVector::constant(g, &eta, &eta);
        for a in asymptotics_report(&f, &eta) {
            assert_eq!(a, Asymptotics { edge_deviation: 0.0, tail_integral: 0.0, half_tail_ratio: 0.0 });
        }
    }

    #[test]
    fn asymptotics_of_exponential_profile() {
        let g = Grid::new(8.0, 800).unwrap();
        let eta = DVector::from_element(1, 1.0);
        let f = FieldVector::from_fn(g, &eta, |_, x| 1.0 + (-x.abs()).exp());
        let a = &asymptotics_report(&f, &eta)[0];
        assert!((a.edge_deviation - (-8f64).exp()).abs() < 1e-15);
        // 2∫_4^8 e^{-x} dx
        let exact = 2.0 * ((-4f64).exp() - (-8f64).exp());
        assert!((a.tail_integral - exact).abs() < 1e-4 * exact);
        // (e^{-6} − e^{-8}) / (e^{-4} − e^{-6})
        let ratio = ((-6f64).exp() - (-8f64).exp()) / ((-4f64).exp() - (-6f64).exp());
        assert!((a.half_tail_ratio - ratio).abs() < 1e-3 * ratio);
    }
}
