//! Small numerical building blocks shared by the solvers: a classical RK4
//! step, cubic-Hermite trajectories, tail quadrature, Gaussian tail
//! probabilities in log space, and a tridiagonal solver.

use std::f64::consts::{LN_2, SQRT_2};
use std::ops::{Add, Mul};

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::{erf, erfc};

use crate::model::TimeGrid;

/// One classical Runge-Kutta step of size `h` (negative for backward
/// integration).
pub(crate) fn rk4_step<T, F>(y: &T, t: f64, h: f64, f: F) -> T
where
    T: Clone + Add<T, Output = T> + Mul<f64, Output = T>,
    F: Fn(f64, &T) -> T,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y.clone() + k1.clone() * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y.clone() + k2.clone() * (0.5 * h)));
    let k4 = f(t + h, &(y.clone() + k3.clone() * h));
    y.clone() + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Trajectory stored on a [`TimeGrid`] together with its time derivative at
/// every node. Off-node queries use cubic Hermite interpolation, which keeps
/// fourth-order accuracy inside the RK4 stages of downstream equations.
#[derive(Clone, Debug)]
pub struct HermitePath<T> {
    grid: TimeGrid,
    values: Vec<T>,
    slopes: Vec<T>,
}

pub type MatrixPath = HermitePath<DMatrix<f64>>;
pub type VectorPath = HermitePath<DVector<f64>>;
pub type ScalarPath = HermitePath<f64>;

impl<T> HermitePath<T>
where
    T: Clone + Add<T, Output = T> + Mul<f64, Output = T>,
{
    pub(crate) fn new(grid: TimeGrid, values: Vec<T>, slopes: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), grid.n_steps() + 1);
        debug_assert_eq!(slopes.len(), grid.n_steps() + 1);
        Self {
            grid,
            values,
            slopes,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn node(&self, i: usize) -> &T {
        &self.values[i]
    }

    pub fn slope(&self, i: usize) -> &T {
        &self.slopes[i]
    }

    pub fn nodes(&self) -> &[T] {
        &self.values
    }

    pub fn slopes(&self) -> &[T] {
        &self.slopes
    }

    pub fn at(&self, t: f64) -> T {
        self.at_location(self.grid.locate(t))
    }

    /// Exact node values at nodes, cubic Hermite in between.
    pub fn at_location(&self, loc: Location) -> T {
        match loc {
            Location::Node(i) => self.values[i].clone(),
            Location::Between(i, theta) => {
                let h = self.grid.dt();
                let t2 = theta * theta;
                let t3 = t2 * theta;
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + theta;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                self.values[i].clone() * h00
                    + self.slopes[i].clone() * (h10 * h)
                    + self.values[i + 1].clone() * h01
                    + self.slopes[i + 1].clone() * (h11 * h)
            }
        }
    }

    /// Time derivative of the interpolant.
    pub fn slope_at(&self, loc: Location) -> T {
        match loc {
            Location::Node(i) => self.slopes[i].clone(),
            Location::Between(i, theta) => {
                let h = self.grid.dt();
                let t2 = theta * theta;
                let d00 = (6.0 * t2 - 6.0 * theta) / h;
                let d10 = 3.0 * t2 - 4.0 * theta + 1.0;
                let d01 = (-6.0 * t2 + 6.0 * theta) / h;
                let d11 = 3.0 * t2 - 2.0 * theta;
                self.values[i].clone() * d00
                    + self.slopes[i].clone() * d10
                    + self.values[i + 1].clone() * d01
                    + self.slopes[i + 1].clone() * d11
            }
        }
    }
}

/// Position of a time inside a [`TimeGrid`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Location {
    Node(usize),
    /// Interval index and fractional position in `(0, 1)`.
    Between(usize, f64),
}

impl Location {
    pub fn node(&self) -> Option<usize> {
        match self {
            Location::Node(i) => Some(*i),
            Location::Between(..) => None,
        }
    }
}

/// Linear interpolation of node data using a [`Location`].
pub(crate) fn lerp_at<T>(values: &[T], loc: Location) -> T
where
    T: Clone + Add<T, Output = T> + Mul<f64, Output = T>,
{
    match loc {
        Location::Node(i) => values[i].clone(),
        Location::Between(i, theta) => {
            values[i].clone() * (1.0 - theta) + values[i + 1].clone() * theta
        }
    }
}

/// Tail integrals of the cubic Hermite interpolant of `f`:
/// `out[i] = ∫_{t_i}^{T} f`, i.e. the trapezoid rule with endpoint slope
/// corrections, fourth-order accurate. `out[N]` is exactly zero.
pub(crate) fn tail_hermite<T>(samples: &[T], slopes: &[T], dt: f64, zero: T) -> Vec<T>
where
    T: Clone + Add<T, Output = T> + Mul<f64, Output = T>,
{
    let n = samples.len();
    let mut out = vec![zero; n];
    for i in (0..n.saturating_sub(1)).rev() {
        out[i] = out[i + 1].clone()
            + (samples[i].clone() + samples[i + 1].clone()) * (0.5 * dt)
            + (slopes[i].clone() + slopes[i + 1].clone() * -1.0) * (dt * dt / 12.0);
    }
    out
}

/// `(0..n).map(f)` collected in order, in parallel when the `parallel`
/// feature is enabled. Results never depend on the thread count.
pub(crate) fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// 2-norm condition number; infinite for singular matrices.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `ln Φ(z)`, accurate deep into the lower tail.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z == f64::INFINITY {
        return 0.0;
    }
    if z == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if z > 5.0 {
        (-0.5 * erfc(z / SQRT_2)).ln_1p()
    } else if z > -30.0 {
        (0.5 * erfc(-z / SQRT_2)).ln()
    } else {
        // Asymptotic expansion of the Mills ratio.
        let z2 = z * z;
        let inv = 1.0 / z2;
        let series = 1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv * (1.0 - 7.0 * inv)));
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
    }
}

/// `ln(1 - e^d)` for `d <= 0`.
fn ln_one_minus_exp(d: f64) -> f64 {
    if d > -LN_2 {
        (-d.exp_m1()).ln()
    } else {
        (-d.exp()).ln_1p()
    }
}

/// `ln P(a < Z < b)` for a standard normal `Z`; bounds may be infinite.
pub fn log_norm_interval(a: f64, b: f64) -> f64 {
    if a >= b {
        return f64::NEG_INFINITY;
    }
    if a > 0.0 {
        return log_norm_interval(-b, -a);
    }
    if b > 0.0 {
        // Straddles the origin: no cancellation in erf differences.
        let ea = if a == f64::NEG_INFINITY {
            -1.0
        } else {
            erf(a / SQRT_2)
        };
        let eb = if b == f64::INFINITY {
            1.0
        } else {
            erf(b / SQRT_2)
        };
        return (0.5 * (eb - ea)).ln();
    }
    let lb = log_norm_cdf(b);
    let la = log_norm_cdf(a);
    if la == f64::NEG_INFINITY {
        return lb;
    }
    lb + ln_one_minus_exp(la - lb)
}

/// Thomas algorithm for `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
///
/// `lower[0]` and `upper[n-1]` are ignored. `rhs` is overwritten with the
/// solution; `scratch` must have the same length. No pivoting, so the matrix
/// must be diagonally dominant (the Fokker-Planck matrices are M-matrices).
pub(crate) fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut [f64],
) {
    let n = diag.len();
    debug_assert!(lower.len() == n && upper.len() == n && rhs.len() == n && scratch.len() == n);
    if n == 0 {
        return;
    }
    let mut denom = diag[0];
    scratch[0] = if n > 1 { upper[0] / denom } else { 0.0 };
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * scratch[i - 1];
        if i + 1 < n {
            scratch[i] = upper[i] / denom;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_cdf_matches_direct_evaluation_in_bulk() {
        for &z in &[-8.0, -3.0, -0.5, 0.0, 0.7, 4.0, 9.0] {
            assert_relative_eq!(log_norm_cdf(z), norm_cdf(z).ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn log_cdf_continuous_across_the_asymptotic_switch() {
        let below = log_norm_cdf(-30.0 - 1e-9);
        let above = log_norm_cdf(-30.0 + 1e-9);
        assert_relative_eq!(below, above, max_relative = 1e-9);
        // ln Φ(-40) ≈ -804.608
        assert!((log_norm_cdf(-40.0) + 804.608_442).abs() < 1e-3);
    }

    #[test]
    fn interval_probabilities() {
        assert_relative_eq!(
            log_norm_interval(f64::NEG_INFINITY, 0.0),
            0.5f64.ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            log_norm_interval(0.0, f64::INFINITY),
            0.5f64.ln(),
            max_relative = 1e-14
        );
        let p = norm_cdf(1.0) - norm_cdf(-2.0);
        assert_relative_eq!(log_norm_interval(-2.0, 1.0).exp(), p, max_relative = 1e-13);
        // deep tail on both sides stays finite
        assert!(log_norm_interval(-60.0, -50.0).is_finite());
        assert!(log_norm_interval(50.0, 60.0).is_finite());
        assert_eq!(log_norm_interval(1.0, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn thomas_solves_a_known_system() {
        // [2 -1 0; -1 2 -1; 0 -1 2] x = [1 0 1] -> x = [1 1 1]
        let lower = [0.0, -1.0, -1.0];
        let diag = [2.0, 2.0, 2.0];
        let upper = [-1.0, -1.0, 0.0];
        let mut rhs = [1.0, 0.0, 1.0];
        let mut scratch = [0.0; 3];
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs, &mut scratch);
        for v in rhs {
            assert_relative_eq!(v, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn hermite_path_reproduces_cubics() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let f = |t: f64| t * t * t - 2.0 * t;
        let df = |t: f64| 3.0 * t * t - 2.0;
        let path = HermitePath::new(
            grid,
            grid.times().map(f).collect(),
            grid.times().map(df).collect(),
        );
        for &t in &[0.1, 0.33, 0.5, 0.9] {
            assert_relative_eq!(path.at(t), f(t), epsilon = 1e-14);
            assert_relative_eq!(path.slope_at(grid.locate(t)), df(t), epsilon = 1e-13);
        }
        let tail = tail_hermite(path.nodes(), path.slopes(), grid.dt(), 0.0);
        // ∫_0^1 (t^3 - 2t) dt = 1/4 - 1
        assert_relative_eq!(tail[0], -0.75, epsilon = 1e-14);
        assert_eq!(tail[4], 0.0);
    }

    #[test]
    fn rk4_is_exact_for_cubics() {
        // y' = 3t^2, y(0) = 0 -> y(1) = 1
        let mut y = 0.0f64;
        let h = 0.25;
        for i in 0..4 {
            y = rk4_step(&y, i as f64 * h, h, |t, _| 3.0 * t * t);
        }
        assert_relative_eq!(y, 1.0, epsilon = 1e-14);
    }
}
