//! The Min-LQG best response.
//!
//! With `η` the Hopf-Cole scalar, `V_j` the LQG values and `g_j` the
//! probability that the pure `u^(j)` closed loop ends in the cell of `p_j`,
//!
//! ```text
//! V(t,x)  = -(1/η) log Σ_j exp(-η V_j(t,x)) g_j(t,x)
//! u*(t,x) = Σ_j w_j(t,x) u^(j)(t,x),   w_j ∝ exp(-η V_j) g_j
//! ```
//!
//! Everything is evaluated in the log domain: `exp(-ηV_j)` underflows long
//! before the weights become degenerate.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lqg::{LqgBase, LqgTracker};
use crate::model::{half_quad, DestinationSet, TimeGrid};
use crate::numeric::{log_norm_interval, tail_hermite, Location, VectorPath};

/// Variance below which the terminal law is treated as a point mass.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Monte Carlo settings for cell probabilities when `n > 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CellSampling {
    pub samples: usize,
    pub seed: u64,
}

impl Default for CellSampling {
    fn default() -> Self {
        Self {
            samples: 4096,
            seed: 0x5eed,
        }
    }
}

/// A cell probability and its standard error (zero when exact).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellProbability {
    pub value: f64,
    pub std_error: f64,
}

/// Finite-difference steps for the residual diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSteps {
    pub dt: f64,
    pub dx: f64,
}

/// Largest absolute residuals over a sample. `parabolic` is relative to `ψ`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResidualReport {
    pub hjb: f64,
    pub parabolic: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.hjb.max(self.parabolic)
    }
}

/// Per-node scalars for the `n = m = 1` fast path used by the Fokker-Planck
/// solver.
#[derive(Clone, Debug)]
struct ScalarCache {
    a: f64,
    b: f64,
    gain: f64,
    pi: Vec<f64>,
    alpha: Vec<f64>,
    sd: Vec<f64>,
    beta: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    shift: Vec<Vec<f64>>,
}

/// Min-LQG value and feedback for one class tracking a given mean path.
/// Immutable once built; all caches are filled eagerly.
#[derive(Clone, Debug)]
pub struct MinLqgPolicy {
    tracker: LqgTracker,
    /// `c_j(t) = ∫_t^T α(T,τ)Sβ_j(τ)dτ`, so that the terminal mean of the
    /// `u^(j)` closed loop is `α(T,t)x - c_j(t)`.
    shifts: Vec<VectorPath>,
    cells: Option<Vec<(f64, f64)>>,
    normals: Vec<DVector<f64>>,
    scalar: Option<ScalarCache>,
}

impl MinLqgPolicy {
    pub fn new(base: Arc<LqgBase>, dest: DestinationSet, xbar: Vec<DVector<f64>>) -> Result<Self> {
        Self::with_sampling(base, dest, xbar, CellSampling::default())
    }

    pub fn with_sampling(
        base: Arc<LqgBase>,
        dest: DestinationSet,
        xbar: Vec<DVector<f64>>,
        sampling: CellSampling,
    ) -> Result<Self> {
        let tracker = LqgTracker::new(base, dest, xbar)?;
        Ok(Self::from_tracker(tracker, sampling))
    }

    pub fn from_tracker(tracker: LqgTracker, sampling: CellSampling) -> Self {
        let base = &tracker.base;
        let grid = *base.grid();
        let n = base.class.n();
        let s = &base.class.s;
        let alpha = &base.kernel.to_terminal;
        let shifts: Vec<VectorPath> = tracker
            .offsets
            .beta
            .iter()
            .map(|beta| {
                let f: Vec<DVector<f64>> = (0..=grid.n_steps())
                    .map(|i| alpha.node(i) * (s * beta.node(i)))
                    .collect();
                let df: Vec<DVector<f64>> = (0..=grid.n_steps())
                    .map(|i| {
                        alpha.slope(i) * (s * beta.node(i)) + alpha.node(i) * (s * beta.slope(i))
                    })
                    .collect();
                let c = tail_hermite(&f, &df, grid.dt(), DVector::zeros(n));
                VectorPath::new(grid, c, f.iter().map(|v| -v).collect())
            })
            .collect();
        let cells = tracker.dest.interval_cells();
        let normals = if n > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
            (0..sampling.samples)
                .map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)))
                .collect()
        } else {
            Vec::new()
        };
        let scalar = (n == 1 && base.class.m() == 1).then(|| {
            let nodes = 0..=grid.n_steps();
            ScalarCache {
                a: base.class.params.a[(0, 0)],
                b: base.class.params.b[(0, 0)],
                gain: base.class.gain[(0, 0)],
                pi: nodes
                    .clone()
                    .map(|i| base.riccati.node(i)[(0, 0)])
                    .collect(),
                alpha: nodes.clone().map(|i| alpha.node(i)[(0, 0)]).collect(),
                sd: nodes
                    .clone()
                    .map(|i| base.kernel.sigma_t.node(i)[(0, 0)].max(0.0).sqrt())
                    .collect(),
                beta: tracker
                    .offsets
                    .beta
                    .iter()
                    .map(|b| b.nodes().iter().map(|v| v[0]).collect())
                    .collect(),
                delta: tracker
                    .offsets
                    .delta
                    .iter()
                    .map(|d| d.nodes().to_vec())
                    .collect(),
                shift: shifts
                    .iter()
                    .map(|c| c.nodes().iter().map(|v| v[0]).collect())
                    .collect(),
            }
        });
        Self {
            tracker,
            shifts,
            cells,
            normals,
            scalar,
        }
    }

    pub fn tracker(&self) -> &LqgTracker {
        &self.tracker
    }

    pub fn grid(&self) -> &TimeGrid {
        self.tracker.grid()
    }

    pub fn destinations(&self) -> &DestinationSet {
        &self.tracker.dest
    }

    pub fn eta(&self) -> f64 {
        self.tracker.class().eta
    }

    pub fn xbar(&self) -> &[DVector<f64>] {
        &self.tracker.xbar
    }

    fn is_terminal(&self, t: f64) -> bool {
        matches!(self.grid().locate(t), Location::Node(i) if i == self.grid().n_steps())
    }

    /// Mean and covariance of `x^(j)(T)` given `x^(j)(t) = x`.
    pub fn terminal_law(&self, j: usize, t: f64, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let loc = self.grid().locate(t);
        let k = &self.tracker.base.kernel;
        let mean = k.to_terminal.at_location(loc) * x - self.shifts[j].at_location(loc);
        (mean, k.sigma_t.at_location(loc))
    }

    /// `g_j(t,x)`: exact for scalar states, Monte Carlo with common random
    /// numbers otherwise.
    pub fn cell_probability(&self, j: usize, t: f64, x: &DVector<f64>) -> CellProbability {
        let (mean, cov) = self.terminal_law(j, t, x);
        let dest = self.destinations();
        if let Some(cells) = &self.cells {
            let var = cov[(0, 0)];
            if var < DEGENERATE_VARIANCE {
                return CellProbability {
                    value: indicator(dest.nearest(&mean) == j),
                    std_error: 0.0,
                };
            }
            let sd = var.sqrt();
            let (lo, hi) = cells[j];
            return CellProbability {
                value: log_norm_interval((lo - mean[0]) / sd, (hi - mean[0]) / sd).exp(),
                std_error: 0.0,
            };
        }
        let eig_min = cov.clone().symmetric_eigen().eigenvalues.min();
        if eig_min < DEGENERATE_VARIANCE {
            return CellProbability {
                value: indicator(dest.nearest(&mean) == j),
                std_error: 0.0,
            };
        }
        let l = cov.cholesky().expect("positive definite covariance").l();
        let hits = self
            .normals
            .iter()
            .filter(|z| dest.nearest(&(&mean + &l * *z)) == j)
            .count();
        let n = self.normals.len() as f64;
        let p = hits as f64 / n;
        CellProbability {
            value: p,
            std_error: (p * (1.0 - p) / n).sqrt(),
        }
    }

    fn log_cell_probability(&self, j: usize, t: f64, x: &DVector<f64>) -> f64 {
        if let Some(cells) = &self.cells {
            let (mean, cov) = self.terminal_law(j, t, x);
            let var = cov[(0, 0)];
            if var < DEGENERATE_VARIANCE {
                return if self.destinations().nearest(&mean) == j {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
            }
            let sd = var.sqrt();
            let (lo, hi) = cells[j];
            return log_norm_interval((lo - mean[0]) / sd, (hi - mean[0]) / sd);
        }
        self.cell_probability(j, t, x).value.ln()
    }

    /// `-ηV_j + log g_j` for every destination.
    fn log_weights(&self, t: f64, x: &DVector<f64>) -> Vec<f64> {
        let eta = self.eta();
        (0..self.destinations().len())
            .map(|j| -eta * self.tracker.lqg_value(j, t, x) + self.log_cell_probability(j, t, x))
            .collect()
    }

    fn no_support(t: f64, x: &DVector<f64>) -> Error {
        Error::NoSupportedCell {
            t,
            x: x.iter().copied().collect(),
        }
    }

    /// `V(t,x)`; at `t = T` this is `min_j ‖x - p_j‖²_M`.
    pub fn value(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        if self.is_terminal(t) {
            return Ok(self.destinations().terminal_cost(x));
        }
        let lw = self.log_weights(t, x);
        let lse = log_sum_exp(&lw).ok_or_else(|| Self::no_support(t, x))?;
        Ok(-lse / self.eta())
    }

    /// Gibbs weights `w_j`; at `t = T` the indicator of the nearest cell.
    pub fn weights(&self, t: f64, x: &DVector<f64>) -> Result<Vec<f64>> {
        if self.is_terminal(t) {
            let j = self.destinations().nearest(x);
            return Ok((0..self.destinations().len())
                .map(|k| indicator(k == j))
                .collect());
        }
        softmax(&self.log_weights(t, x)).ok_or_else(|| Self::no_support(t, x))
    }

    /// `u*(t,x)`; zero at `t = T`.
    pub fn control(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.tracker.class().m();
        if self.is_terminal(t) {
            return Ok(DVector::zeros(m));
        }
        let w = self.weights(t, x)?;
        let mut u = DVector::zeros(m);
        for (j, wj) in w.iter().enumerate() {
            if *wj > 0.0 {
                u += self.tracker.lqg_control(j, t, x) * *wj;
            }
        }
        Ok(u)
    }

    /// `Ax + Bu*(t,x)`.
    pub fn drift(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let p = &self.tracker.class().params;
        Ok(&p.a * x + &p.b * self.control(t, x)?)
    }

    /// `Ṽ_j = V_j - (1/η) log g_j`; infinite when `g_j = 0`.
    pub fn risk_adjusted_value(&self, j: usize, t: f64, x: &DVector<f64>) -> f64 {
        self.tracker.lqg_value(j, t, x) - self.log_cell_probability(j, t, x) / self.eta()
    }

    /// `Pr_j = softmax_j(-ηṼ_j)`; identical to the control weights.
    pub fn choice_probabilities(&self, t: f64, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.weights(t, x)
    }

    /// Scalar drift `Ax + Bu*` at grid node `i`, without allocation. Only
    /// available for scalar classes; panics otherwise.
    pub fn drift_scalar_at_node(&self, i: usize, x: f64) -> f64 {
        let c = self.scalar.as_ref().expect("scalar policy");
        c.a * x + c.b * self.control_scalar_at_node(i, x)
    }

    /// Scalar `u*` at grid node `i`; see [`Self::drift_scalar_at_node`].
    pub fn control_scalar_at_node(&self, i: usize, x: f64) -> f64 {
        let c = self.scalar.as_ref().expect("scalar policy");
        if i == self.grid().n_steps() {
            return 0.0;
        }
        let cells = self.cells.as_ref().expect("scalar policy");
        let eta = self.eta();
        let (pi, alpha, sd) = (c.pi[i], c.alpha[i], c.sd[i]);
        let degenerate = sd * sd < DEGENERATE_VARIANCE;
        // Single-pass log-sum-exp accumulation of Σ w_j u_j.
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut acc = 0.0;
        for j in 0..cells.len() {
            let beta = c.beta[j][i];
            let mean = alpha * x - c.shift[j][i];
            let log_g = if degenerate {
                if self.tracker.dest.nearest_scalar(mean) == j {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                let (lo, hi) = cells[j];
                log_norm_interval((lo - mean) / sd, (hi - mean) / sd)
            };
            if log_g == f64::NEG_INFINITY {
                continue;
            }
            let grad = pi * x + beta;
            let a = -eta * (0.5 * pi * x * x + x * beta + c.delta[j][i]) + log_g;
            let u = -c.gain * grad;
            if a > max {
                let scale = (max - a).exp();
                sum *= scale;
                acc *= scale;
                max = a;
            }
            let e = (a - max).exp();
            sum += e;
            acc += e * u;
        }
        if sum == 0.0 {
            // Every cell unreachable: only possible through round-off far
            // outside the domain; fall back to the nearest destination.
            let j = self.tracker.dest.nearest_scalar(x);
            return -c.gain * (pi * x + c.beta[j][i]);
        }
        acc / sum
    }

    pub fn is_scalar(&self) -> bool {
        self.scalar.is_some()
    }

    fn check_sample(&self, sample: &[(f64, DVector<f64>)], steps: FdSteps) -> Result<()> {
        let limit = self.grid().horizon() - 2.0 * steps.dt.max(self.grid().dt());
        if let Some((t, _)) = sample.iter().find(|(t, _)| *t > limit || *t < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample time {t} must lie in [0, {limit}] (two steps before the horizon)"
            )));
        }
        if !(steps.dt > 0.0 && steps.dx > 0.0) {
            return Err(Error::InvalidArgument(
                "finite-difference steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Finite-difference residuals of the HJB equation satisfied by `V` and
    /// of the linear parabolic equation satisfied by `ψ = exp(-ηV)`,
    ///
    /// ```text
    /// V_t + x'A'V_x - ½V_x'SV_x + ½Tr(σσ'V_xx) + ‖x - x̄‖²_Q = 0
    /// ψ_t + x'A'ψ_x + ½Tr(σσ'ψ_xx) - η‖x - x̄‖²_Q ψ = 0
    /// ```
    ///
    /// The parabolic residual is divided by `ψ(t,x)`, which otherwise spans
    /// hundreds of orders of magnitude. Time derivatives use five-point
    /// central differences (one-sided near `t = 0`), space derivatives
    /// three-point ones.
    pub fn hjb_residual(
        &self,
        sample: &[(f64, DVector<f64>)],
        steps: FdSteps,
    ) -> Result<ResidualReport> {
        self.check_sample(sample, steps)?;
        let c = self.tracker.class();
        let eta = c.eta;
        let mut report = ResidualReport::default();
        for (t, x) in sample {
            let v0 = self.value(*t, x)?;
            let f = |s: f64, y: &DVector<f64>| self.value(s, y);
            let d = derivatives(&f, *t, x, v0, steps)?;
            let running = half_quad(&(x - self.tracker.xbar_at(*t)), &c.params.q);
            let hjb = d.dt + x.dot(&(c.params.a.transpose() * &d.grad))
                - 0.5 * d.grad.dot(&(&c.s * &d.grad))
                + 0.5 * d.hess.dot(&c.sigma_sq)
                + running;
            // ψ/ψ(t,x) = exp(-η(V - V(t,x))) stays O(1) on the stencil.
            let psi = |s: f64, y: &DVector<f64>| self.value(s, y).map(|v| (-eta * (v - v0)).exp());
            let p = derivatives(&psi, *t, x, 1.0, steps)?;
            let parabolic =
                p.dt + x.dot(&(c.params.a.transpose() * &p.grad)) + 0.5 * p.hess.dot(&c.sigma_sq)
                    - eta * running;
            report.hjb = report.hjb.max(hjb.abs());
            report.parabolic = report.parabolic.max(parabolic.abs());
        }
        Ok(report)
    }

    /// Finite-difference residual of the backward Kolmogorov equation of
    /// `g_j` under the `u^(j)` closed loop:
    /// `∂_t g + ((A - SΠ)x - Sβ_j)'∇g + ½Tr(σσ'∇²g) = 0`. Max over the
    /// sample and all destinations.
    pub fn kolmogorov_residual(
        &self,
        sample: &[(f64, DVector<f64>)],
        steps: FdSteps,
    ) -> Result<f64> {
        self.check_sample(sample, steps)?;
        let c = self.tracker.class();
        let mut worst = 0.0f64;
        for (t, x) in sample {
            for j in 0..self.destinations().len() {
                let g = |s: f64, y: &DVector<f64>| Ok(self.cell_probability(j, s, y).value);
                let d = derivatives(&g, *t, x, g(*t, x)?, steps)?;
                let drift = &c.params.a * x + &c.params.b * self.tracker.lqg_control(j, *t, x);
                let r = d.dt + drift.dot(&d.grad) + 0.5 * d.hess.dot(&c.sigma_sq);
                worst = worst.max(r.abs());
            }
        }
        Ok(worst)
    }
}

struct Derivatives {
    dt: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn derivatives<F>(f: &F, t: f64, x: &DVector<f64>, f0: f64, steps: FdSteps) -> Result<Derivatives>
where
    F: Fn(f64, &DVector<f64>) -> Result<f64>,
{
    let n = x.len();
    let h = steps.dt;
    let dt = if t >= 2.0 * h {
        (8.0 * (f(t + h, x)? - f(t - h, x)?) - (f(t + 2.0 * h, x)? - f(t - 2.0 * h, x)?))
            / (12.0 * h)
    } else {
        (-3.0 * f0 + 4.0 * f(t + h, x)? - f(t + 2.0 * h, x)?) / (2.0 * h)
    };
    let dx = steps.dx;
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let shifted = |i: usize, si: f64, k: usize, sk: f64| {
        let mut y = x.clone();
        y[i] += si;
        y[k] += sk;
        y
    };
    for i in 0..n {
        let fp = f(t, &shifted(i, dx, i, 0.0))?;
        let fm = f(t, &shifted(i, -dx, i, 0.0))?;
        grad[i] = (fp - fm) / (2.0 * dx);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (dx * dx);
        for k in 0..i {
            let fpp = f(t, &shifted(i, dx, k, dx))?;
            let fpm = f(t, &shifted(i, dx, k, -dx))?;
            let fmp = f(t, &shifted(i, -dx, k, dx))?;
            let fmm = f(t, &shifted(i, -dx, k, -dx))?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * dx * dx);
            hess[(i, k)] = v;
            hess[(k, i)] = v;
        }
    }
    Ok(Derivatives { dt, grad, hess })
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `log Σ exp(a_i)` ignoring `-∞` terms; `None` when all terms are `-∞`.
pub fn log_sum_exp(a: &[f64]) -> Option<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    Some(max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Normalized `exp(a_i)` computed with max-subtraction.
pub fn softmax(a: &[f64]) -> Option<Vec<f64>> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let e: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Some(e.into_iter().map(|v| v / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentClassParams, ClassModel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn s(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn policy_with(q: f64, a: f64, points: &[f64], xbar: f64, n_steps: usize) -> MinLqgPolicy {
        let class = ClassModel::new(AgentClassParams::scalar(a, 0.2, 1.5, q, 5.0, 500.0)).unwrap();
        let grid = TimeGrid::new(2.0, n_steps).unwrap();
        let base = LqgBase::new(class, &grid).unwrap();
        let dest = DestinationSet::scalar(points, 500.0).unwrap();
        MinLqgPolicy::new(base, dest, vec![s(xbar); n_steps + 1]).unwrap()
    }

    fn reference_policy() -> MinLqgPolicy {
        policy_with(0.1, 0.1, &[-10.0, 10.0], 0.3, 400)
    }

    #[test]
    fn terminal_behaviour() {
        let p = reference_policy();
        assert_eq!(p.value(2.0, &s(10.0)).unwrap(), 0.0);
        assert_eq!(p.value(2.0, &s(0.0)).unwrap(), 25000.0);
        assert_eq!(p.control(2.0, &s(3.0)).unwrap()[0], 0.0);
        assert_eq!(p.cell_probability(0, 2.0, &s(-4.0)).value, 1.0);
        assert_eq!(p.cell_probability(1, 2.0, &s(-4.0)).value, 0.0);
        assert_eq!(p.weights(2.0, &s(-4.0)).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn boundary_probability_is_one_half_for_a_centred_mean() {
        // Start from the state whose terminal mean under u^(1) is the cell
        // boundary 0.
        let p = reference_policy();
        for i in [0, 200, 380] {
            let t = p.grid().time(i);
            let k = &p.tracker().base.kernel;
            let x = p.shifts[0].node(i)[0] / k.to_terminal.node(i)[(0, 0)];
            assert!(p.terminal_law(0, t, &s(x)).0[0].abs() < 1e-9);
            let g = p.cell_probability(0, t, &s(x)).value;
            assert_relative_eq!(g, 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_destination_reduces_to_lqg() {
        let p = policy_with(5.0, 0.1, &[4.0], 0.3, 400);
        for &(t, x) in &[(0.0, -3.0), (0.9, 1.0), (1.7, 8.0)] {
            let x = s(x);
            assert_relative_eq!(
                p.value(t, &x).unwrap(),
                p.tracker().lqg_value(0, t, &x),
                max_relative = 1e-12
            );
            assert_eq!(p.control(t, &x).unwrap(), p.tracker().lqg_control(0, t, &x));
            assert_eq!(p.cell_probability(0, t, &x).value, 1.0);
        }
    }

    #[test]
    fn symmetric_midline_control_vanishes() {
        let p = policy_with(10.0, 0.0, &[-10.0, 10.0], 0.0, 400);
        for &t in &[0.0, 0.5, 1.0, 1.5, 1.9] {
            let u = p.control(t, &s(0.0)).unwrap()[0];
            assert!(u.abs() < 1e-8, "u = {u} at t = {t}");
            assert!(
                p.drift_scalar_at_node(p.grid().locate(t).node().unwrap(), 0.0)
                    .abs()
                    < 1e-8
            );
        }
    }

    #[test]
    fn scalar_fast_path_matches_general_path() {
        let p = policy_with(10.0, 0.1, &[-10.0, 10.0], 0.3, 400);
        for i in [0, 57, 200, 399, 400] {
            for &x in &[-14.0, -3.0, 0.0, 0.2, 5.0, 16.0] {
                let t = p.grid().time(i);
                let general = p.drift(t, &s(x)).unwrap()[0];
                assert_relative_eq!(
                    p.drift_scalar_at_node(i, x),
                    general,
                    max_relative = 1e-12,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn three_destinations_weights() {
        let p = policy_with(1.0, 0.1, &[-10.0, 0.0, 10.0], 0.3, 400);
        let w = p.weights(1.0, &s(0.1)).unwrap();
        assert_eq!(w.len(), 3);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn terminal_continuity_inside_a_cell() {
        let p = policy_with(0.1, 0.1, &[-10.0, 10.0], 0.3, 2048);
        let x = s(6.0);
        let target = 250.0 * 16.0;
        let errors: Vec<f64> = (1..=10)
            .map(|i| (p.value(2.0 - 2.0 * 0.5f64.powi(i), &x).unwrap() - target).abs())
            .collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
        assert!(errors[9] < 0.02 * errors[0]);
    }

    #[test]
    fn linear_growth_bound() {
        let p = reference_policy();
        let pi_max = p
            .tracker()
            .base
            .riccati
            .pi
            .nodes()
            .iter()
            .map(|m| m[(0, 0)].abs())
            .fold(0.0, f64::max);
        let beta_max: f64 = p
            .tracker()
            .offsets
            .beta
            .iter()
            .map(|b| b.nodes().iter().map(|v| v[0].abs()).fold(0.0, f64::max))
            .sum();
        let gain = 0.2 / 5.0;
        let c = gain * pi_max.max(beta_max);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let t = rng.random_range(0.0..2.0);
            let x = rng.random_range(-1000.0..1000.0);
            let u = p.control(t, &s(x)).unwrap()[0];
            assert!(
                u.abs() <= c * (1.0 + x.abs()) * (1.0 + 1e-12),
                "u={u} x={x}"
            );
        }
    }

    #[test]
    fn hjb_and_parabolic_residuals_shrink_with_the_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sample: Vec<_> = (0..40)
            .map(|_| (rng.random_range(0.0..1.6), s(rng.random_range(-15.0..15.0))))
            .collect();
        let reports: Vec<ResidualReport> = [250, 500, 1000]
            .iter()
            .map(|&n| {
                let p = policy_with(0.1, 0.1, &[-10.0, 10.0], 0.3, n);
                let dt = p.grid().dt();
                p.hjb_residual(&sample, FdSteps { dt, dx: 2.0 * dt })
                    .unwrap()
            })
            .collect();
        assert!(
            reports[1].hjb < reports[0].hjb && reports[2].hjb < reports[1].hjb,
            "{reports:?}"
        );
        assert!(
            reports[1].parabolic < reports[0].parabolic
                && reports[2].parabolic < reports[1].parabolic,
            "{reports:?}"
        );
    }

    #[test]
    fn kolmogorov_residual_is_small() {
        let p = policy_with(0.1, 0.1, &[-10.0, 10.0], 0.3, 2000);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sample: Vec<_> = (0..100)
            .map(|_| (rng.random_range(0.0..1.8), s(rng.random_range(-15.0..15.0))))
            .collect();
        let r = p
            .kolmogorov_residual(&sample, FdSteps { dt: 1e-3, dx: 1e-3 })
            .unwrap();
        assert!(r < 1e-4, "residual {r}");
    }

    #[test]
    fn residual_sample_near_horizon_is_rejected() {
        let p = reference_policy();
        let err = p.hjb_residual(
            &[(1.999, s(0.0))],
            FdSteps {
                dt: 0.005,
                dx: 0.01,
            },
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn vector_state_uses_sampled_cells() {
        let i = DMatrix::<f64>::identity(2, 2);
        let class = ClassModel::new(AgentClassParams {
            a: DMatrix::zeros(2, 2),
            b: i.clone(),
            sigma: i.clone(),
            q: i.clone(),
            r: i.clone(),
            m: i.clone() * 10.0,
        })
        .unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let base = LqgBase::new(class, &grid).unwrap();
        let dest = DestinationSet::new(
            vec![
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![-1.0, 0.0]),
            ],
            i * 10.0,
        )
        .unwrap();
        let p = MinLqgPolicy::new(base, dest, vec![DVector::zeros(2); 101]).unwrap();
        // The cells are the half-planes x₁ > 0 and x₁ < 0, so g_j has a
        // closed form in the first coordinate of the terminal law.
        let x = DVector::from_vec(vec![-1.2, 0.5]);
        let t = 0.6;
        let (mean, cov) = p.terminal_law(0, t, &x);
        let exact = crate::numeric::norm_cdf(mean[0] / cov[(0, 0)].sqrt());
        let g0 = p.cell_probability(0, t, &x);
        let g1 = p.cell_probability(1, t, &x);
        assert!(g0.std_error > 0.0);
        assert!(
            (g0.value - exact).abs() < 4.0 * g0.std_error,
            "{} vs {exact}",
            g0.value
        );
        let (mean1, _) = p.terminal_law(1, t, &x);
        let exact1 = crate::numeric::norm_cdf(-mean1[0] / cov[(0, 0)].sqrt());
        assert!((g1.value - exact1).abs() < 4.0 * g1.std_error.max(1e-3));
        let w = p.weights(0.3, &x).unwrap();
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(w[1] > w[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn weights_form_a_convex_combination(t in 0.0f64..1.999, x in -30.0f64..30.0) {
            let p = reference_policy();
            let w = p.weights(t, &s(x)).unwrap();
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn value_lies_within_log_sum_exp_bounds(t in 0.0f64..1.99, x in -20.0f64..20.0) {
            let p = reference_policy();
            let v = p.value(t, &s(x)).unwrap();
            let m = (0..2).map(|j| p.risk_adjusted_value(j, t, &s(x))).fold(f64::INFINITY, f64::min);
            let slack = 1e-9 * m.abs().max(1.0);
            prop_assert!(v <= m + slack);
            prop_assert!(v >= m - 2f64.ln() / p.eta() - slack);
        }

        #[test]
        fn control_is_minus_gain_times_value_gradient(t in 0.0f64..1.99, x in -15.0f64..15.0) {
            let p = reference_policy();
            let h = 1e-5 * (1.0 + x.abs());
            let fd = (p.value(t, &s(x + h)).unwrap() - p.value(t, &s(x - h)).unwrap()) / (2.0 * h);
            let u_fd = -(0.2 / 5.0) * fd;
            let u = p.control(t, &s(x)).unwrap()[0];
            prop_assert!((u - u_fd).abs() <= 1e-4 * u_fd.abs().max(1.0), "u={} fd={}", u, u_fd);
        }

        #[test]
        fn choice_probability_decreases_with_its_own_cost(
            a in -50.0f64..50.0, b in -50.0f64..50.0, c in -50.0f64..50.0, bump in 0.01f64..5.0,
        ) {
            let base = softmax(&[a, b, c]).unwrap();
            let bumped = softmax(&[a - bump, b, c]).unwrap();
            prop_assert!(bumped[0] <= base[0]);
            prop_assert!(bumped[1] >= base[1] && bumped[2] >= base[2]);
        }
    }

    #[test]
    fn risk_term_vanishes_for_sure_cells_and_ties_split_evenly() {
        let p = reference_policy();
        // deep inside the right cell late in the horizon g_2 ≈ 1
        let x = s(9.0);
        let v2 = p.tracker().lqg_value(1, 1.99, &x);
        assert_relative_eq!(p.risk_adjusted_value(1, 1.99, &x), v2, max_relative = 1e-12);
        assert_eq!(softmax(&[3.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), None);
    }
}
