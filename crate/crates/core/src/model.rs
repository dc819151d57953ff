//! Domain types shared by every solver: agent classes, populations,
//! destinations with their Voronoi geometry, initial laws and time grids.
//!
//! Norms follow the half convention throughout: `‖x‖²_W = ½ x'Wx`.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{condition_number, Location};

/// Relative tolerance of the structural condition `BR⁻¹B' = η σσ'`.
pub const ETA_TOLERANCE: f64 = 1e-10;

/// `½ x'Wx`.
pub fn weighted_norm_sq(x: &DVector<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if !w.is_square() || w.nrows() != x.len() {
        return Err(Error::Dimension(format!(
            "vector of length {} against {}x{} weight",
            x.len(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(half_quad(x, w))
}

#[inline]
pub(crate) fn half_quad(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    0.5 * x.dot(&(w * x))
}

/// Raw parameters of one agent type: `dx = (Ax + Bu)dt + σ dw` with running
/// cost `‖x - x̄‖²_Q + ‖u‖²_R` and terminal cost `min_j ‖x - p_j‖²_M`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentClassParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

impl AgentClassParams {
    pub fn scalar(a: f64, b: f64, sigma: f64, q: f64, r: f64, m: f64) -> Self {
        let s = |v| DMatrix::from_element(1, 1, v);
        Self {
            a: s(a),
            b: s(b),
            sigma: s(sigma),
            q: s(q),
            r: s(r),
            m: s(m),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Least-squares fit of η in `BR⁻¹B' ≈ η σσ'` together with the relative
    /// Frobenius mismatch of the fit. `None` when R is singular.
    pub fn fit_eta(&self) -> Option<(f64, f64)> {
        let r_inv = self.r.clone().try_inverse()?;
        let s = &self.b * r_inv * self.b.transpose();
        let ss = &self.sigma * self.sigma.transpose();
        let denom = ss.norm_squared();
        if denom == 0.0 {
            return None;
        }
        let eta = s.dot(&ss) / denom;
        let scaled = &ss * eta;
        let mismatch = (&s - &scaled).norm() / scaled.norm().max(f64::MIN_POSITIVE);
        Some((eta, mismatch))
    }

    fn check(&self, class: usize, issues: &mut Vec<Issue>) {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let mut push = |msg: String| {
            issues.push(Issue {
                class: Some(class),
                message: msg,
            })
        };
        let shapes = [
            ("A", &self.a, n, n),
            ("B", &self.b, n, m),
            ("sigma", &self.sigma, n, n),
            ("Q", &self.q, n, n),
            ("R", &self.r, m, m),
            ("M", &self.m, n, n),
        ];
        let mut shape_ok = n > 0 && m > 0;
        if n == 0 || !self.a.is_square() {
            push(format!(
                "A must be square and non-empty, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            ));
        }
        for (name, mat, r, c) in shapes {
            if mat.nrows() != r || mat.ncols() != c {
                push(format!(
                    "{name} has shape {}x{}, expected {r}x{c}",
                    mat.nrows(),
                    mat.ncols()
                ));
                shape_ok = false;
            } else if mat.iter().any(|v| !v.is_finite()) {
                push(format!("{name} has non-finite entries"));
                shape_ok = false;
            }
        }
        if !shape_ok {
            return;
        }
        if !is_positive_definite(&self.r) {
            push("R not symmetric positive definite".into());
        }
        if !is_positive_definite(&self.m) {
            push("M not symmetric positive definite".into());
        }
        if !is_positive_semidefinite(&self.q) {
            push("Q not psd".into());
        }
        let cond = condition_number(&self.sigma);
        if !(cond.is_finite() && cond < 1e14) {
            push(format!(
                "sigma not invertible (condition number {cond:.3e})"
            ));
            return;
        }
        match self.fit_eta() {
            None => push("cannot fit eta: R or sigma singular".into()),
            Some((eta, mismatch)) => {
                if !(eta > 0.0) {
                    push(format!("fitted eta = {eta:.6e} is not positive"));
                } else if !(mismatch <= ETA_TOLERANCE) {
                    push(format!(
                        "B R^-1 B' is not a scalar multiple of sigma sigma': relative Frobenius mismatch {mismatch:.3e} (eta = {eta:.6e}, tolerance {ETA_TOLERANCE:.0e})"
                    ));
                }
            }
        }
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).norm() <= 1e-10 * m.norm().max(1e-300)
}

fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    is_symmetric(m) && m.clone().cholesky().is_some()
}

fn is_positive_semidefinite(m: &DMatrix<f64>) -> bool {
    if !is_symmetric(m) {
        return false;
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = m.norm().max(1.0);
    eig.eigenvalues.iter().all(|&l| l >= -1e-12 * scale)
}

/// Validated agent class with the derived quantities every solver needs.
#[derive(Clone, Debug)]
pub struct ClassModel {
    pub params: AgentClassParams,
    /// Hopf-Cole scalar η.
    pub eta: f64,
    /// `BR⁻¹B'`.
    pub s: DMatrix<f64>,
    /// `R⁻¹B'`, the feedback gain applied to costates.
    pub gain: DMatrix<f64>,
    /// `σσ'`.
    pub sigma_sq: DMatrix<f64>,
}

impl ClassModel {
    pub fn new(params: AgentClassParams) -> Result<Self> {
        let mut issues = Vec::new();
        params.check(0, &mut issues);
        if !issues.is_empty() {
            return Err(Error::Validation(ValidationReport {
                issues,
                eta: vec![None],
            }));
        }
        Ok(Self::derive(params))
    }

    fn derive(params: AgentClassParams) -> Self {
        let (eta, _) = params.fit_eta().expect("validated");
        let r_inv = params.r.clone().try_inverse().expect("validated");
        let gain = &r_inv * params.b.transpose();
        let s = &params.b * &gain;
        let sigma_sq = &params.sigma * params.sigma.transpose();
        Self {
            params,
            eta,
            s,
            gain,
            sigma_sq,
        }
    }

    pub fn n(&self) -> usize {
        self.params.state_dim()
    }

    pub fn m(&self) -> usize {
        self.params.input_dim()
    }
}

/// Weighted collection of agent classes.
#[derive(Clone, Debug)]
pub struct Population {
    pub classes: Vec<ClassModel>,
    pub weights: Vec<f64>,
}

impl Population {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn n(&self) -> usize {
        self.classes[0].n()
    }

    pub fn uniform(class: ClassModel) -> Self {
        Self {
            classes: vec![class],
            weights: vec![1.0],
        }
    }
}

/// Destinations `p_1..p_l` with the metric defining their Voronoi cells.
#[derive(Clone, Debug)]
pub struct DestinationSet {
    points: Vec<DVector<f64>>,
    metric: DMatrix<f64>,
}

impl DestinationSet {
    pub fn new(points: Vec<DVector<f64>>, metric: DMatrix<f64>) -> Result<Self> {
        let issues = destination_issues(&points, &metric);
        if !issues.is_empty() {
            return Err(Error::Validation(ValidationReport {
                issues,
                eta: vec![],
            }));
        }
        Ok(Self { points, metric })
    }

    pub fn scalar(points: &[f64], metric: f64) -> Result<Self> {
        Self::new(
            points
                .iter()
                .map(|&p| DVector::from_element(1, p))
                .collect(),
            DMatrix::from_element(1, 1, metric),
        )
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn point(&self, j: usize) -> &DVector<f64> {
        &self.points[j]
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.metric.nrows()
    }

    /// Zero-based index of the closest destination; ties go to the lowest
    /// index.
    pub fn nearest(&self, x: &DVector<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, p) in self.points.iter().enumerate() {
            let d = half_quad(&(x - p), &self.metric);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    }

    pub fn nearest_checked(&self, x: &DVector<f64>) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "state of length {} against destinations of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(self.nearest(x))
    }

    /// Scalar fast path of [`nearest`](Self::nearest).
    pub(crate) fn nearest_scalar(&self, x: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, p) in self.points.iter().enumerate() {
            let d = (x - p[0]).abs();
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    }

    /// `min_j ‖x - p_j‖²_M`.
    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.points
            .iter()
            .map(|p| half_quad(&(x - p), &self.metric))
            .fold(f64::INFINITY, f64::min)
    }

    /// For scalar states, the cell of every destination as an interval
    /// `(lo, hi)` bounded by midpoints between sorted neighbours.
    pub fn interval_cells(&self) -> Option<Vec<(f64, f64)>> {
        if self.dim() != 1 {
            return None;
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| self.points[i][0].total_cmp(&self.points[j][0]));
        let mut cells = vec![(0.0, 0.0); self.len()];
        for (rank, &j) in order.iter().enumerate() {
            let lo = if rank == 0 {
                f64::NEG_INFINITY
            } else {
                0.5 * (self.points[order[rank - 1]][0] + self.points[j][0])
            };
            let hi = if rank + 1 == order.len() {
                f64::INFINITY
            } else {
                0.5 * (self.points[order[rank + 1]][0] + self.points[j][0])
            };
            cells[j] = (lo, hi);
        }
        Some(cells)
    }
}

fn destination_issues(points: &[DVector<f64>], metric: &DMatrix<f64>) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut push = |m: String| {
        issues.push(Issue {
            class: None,
            message: m,
        })
    };
    if points.is_empty() {
        push("destination set is empty".into());
    }
    if !is_positive_definite(metric) {
        push("destination metric not symmetric positive definite".into());
    }
    let n = metric.nrows();
    for (j, p) in points.iter().enumerate() {
        if p.len() != n {
            push(format!(
                "destination {j} has dimension {}, expected {n}",
                p.len()
            ));
        } else if p.iter().any(|v| !v.is_finite()) {
            push(format!("destination {j} is not finite"));
        }
    }
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if points[i] == points[j] {
                push(format!("destinations {i} and {j} coincide"));
            }
        }
    }
    issues
}

/// Law of the initial states.
#[derive(Clone, Debug)]
pub enum InitialDistribution {
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    Samples(Vec<DVector<f64>>),
}

impl InitialDistribution {
    pub fn scalar_gaussian(mean: f64, var: f64) -> Self {
        InitialDistribution::Gaussian {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::Gaussian { mean, .. } => mean.len(),
            InitialDistribution::Samples(s) => s.first().map_or(0, |v| v.len()),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            InitialDistribution::Gaussian { mean, .. } => mean.clone(),
            InitialDistribution::Samples(s) => {
                let mut acc = DVector::zeros(self.dim());
                for v in s {
                    acc += v;
                }
                acc / s.len() as f64
            }
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            InitialDistribution::Gaussian { cov, .. } => cov.clone(),
            InitialDistribution::Samples(s) => {
                let mu = self.mean();
                let n = self.dim();
                let mut acc = DMatrix::zeros(n, n);
                for v in s {
                    let d = v - &mu;
                    acc += &d * d.transpose();
                }
                acc / s.len().max(1) as f64
            }
        }
    }

    /// Draws one initial state. Sample-based laws are resampled uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            InitialDistribution::Gaussian { mean, cov } => {
                let l = cov.clone().cholesky().expect("validated covariance").l();
                let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                mean + l * z
            }
            InitialDistribution::Samples(s) => s[rng.random_range(0..s.len())].clone(),
        }
    }

    fn issues(&self, n: usize) -> Vec<Issue> {
        let mut issues = Vec::new();
        let mut push = |m: String| {
            issues.push(Issue {
                class: None,
                message: m,
            })
        };
        match self {
            InitialDistribution::Gaussian { mean, cov } => {
                if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
                    push(format!(
                        "initial law has dimension {}, expected {n}",
                        mean.len()
                    ));
                } else if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                    push("initial law has non-finite parameters".into());
                } else if !is_positive_definite(cov) {
                    push("initial covariance not symmetric positive definite".into());
                }
            }
            InitialDistribution::Samples(s) => {
                if s.is_empty() {
                    push("initial sample set is empty".into());
                }
                if s.iter().any(|v| v.len() != n) {
                    push(format!("initial samples must have dimension {n}"));
                }
                if s.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                    push("initial samples contain non-finite values".into());
                }
            }
        }
        issues
    }
}

/// Uniform grid `0 = t_0 < ... < t_N = T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.n_steps as f64
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(|i| self.time(i))
    }

    /// Grid location of `t`, clamped to `[0, T]`. Times within a relative
    /// 1e-9 step of a node snap to it.
    pub fn locate(&self, t: f64) -> Location {
        let u = (t / self.dt()).clamp(0.0, self.n_steps as f64);
        let i = u.round();
        if (u - i).abs() < 1e-9 {
            return Location::Node(i as usize);
        }
        let i = u.floor() as usize;
        Location::Between(i, u - i as f64)
    }

    /// Same horizon with `factor` times more steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            n_steps: self.n_steps * factor,
        }
    }
}

/// One violated invariant, tagged with the offending class when there is one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Issue {
    pub class: Option<usize>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.class {
            Some(c) => write!(f, "class {c}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Outcome of [`validate_params`]: every issue found plus the fitted η of
/// each class that admits one.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
    pub eta: Vec<Option<f64>>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {issue}")?;
        }
        Ok(())
    }
}

/// Checks every standing assumption and reports all violations at once.
pub fn validate_params(
    classes: &[AgentClassParams],
    weights: &[f64],
    dest: &DestinationSet,
    grid: &TimeGrid,
) -> ValidationReport {
    let mut issues = Vec::new();
    let mut eta = Vec::with_capacity(classes.len());
    if classes.is_empty() {
        issues.push(Issue {
            class: None,
            message: "population has no classes".into(),
        });
    }
    let n = dest.dim();
    for (s, c) in classes.iter().enumerate() {
        let before = issues.len();
        c.check(s, &mut issues);
        if c.state_dim() != n {
            issues.push(Issue {
                class: Some(s),
                message: format!(
                    "state dimension {} differs from destination dimension {n}",
                    c.state_dim()
                ),
            });
        } else if c.m.shape() == dest.metric().shape() && !proportional(&c.m, dest.metric()) {
            issues.push(Issue {
                class: Some(s),
                message:
                    "terminal weight M induces different Voronoi cells than the destination metric"
                        .into(),
            });
        }
        eta.push(if issues.len() == before {
            c.fit_eta().map(|(e, _)| e)
        } else {
            None
        });
    }
    if weights.len() != classes.len() {
        issues.push(Issue {
            class: None,
            message: format!("{} weights for {} classes", weights.len(), classes.len()),
        });
    }
    for (s, &w) in weights.iter().enumerate() {
        if !(w.is_finite() && w > 0.0) {
            issues.push(Issue {
                class: Some(s),
                message: format!("weight {w} is not positive"),
            });
        }
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        issues.push(Issue {
            class: None,
            message: format!("weights sum to {total}, expected 1"),
        });
    }
    if !(grid.horizon() > 0.0 && grid.n_steps() > 0) {
        issues.push(Issue {
            class: None,
            message: "time grid is empty".into(),
        });
    }
    ValidationReport { issues, eta }
}

fn proportional(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let c = a.dot(b) / b.norm_squared();
    c > 0.0 && (a - b * c).norm() <= 1e-10 * a.norm()
}

/// A complete, validated problem instance.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub population: Population,
    pub destinations: DestinationSet,
    pub initial: InitialDistribution,
    pub grid: TimeGrid,
}

impl Scenario {
    pub fn new(
        classes: Vec<AgentClassParams>,
        weights: Vec<f64>,
        destinations: DestinationSet,
        initial: InitialDistribution,
        grid: TimeGrid,
    ) -> Result<Self> {
        let mut report = validate_params(&classes, &weights, &destinations, &grid);
        report.issues.extend(initial.issues(destinations.dim()));
        if !report.is_ok() {
            return Err(Error::Validation(report));
        }
        let classes = classes.into_iter().map(ClassModel::derive).collect();
        Ok(Self {
            population: Population { classes, weights },
            destinations,
            initial,
            grid,
        })
    }

    /// `n = m = k = 1` with two destinations: the setting of the scalar
    /// bisection scheme.
    pub fn is_scalar_binary(&self) -> bool {
        self.population.k() == 1
            && self.population.n() == 1
            && self.population.classes[0].m() == 1
            && self.destinations.len() == 2
    }

    pub fn require_scalar_binary(&self) -> Result<()> {
        if self.is_scalar_binary() {
            Ok(())
        } else {
            Err(Error::Scenario(format!(
                "need one scalar class with two destinations, got k={}, n={}, l={}",
                self.population.k(),
                self.population.n(),
                self.destinations.len()
            )))
        }
    }

    pub fn with_grid(&self, grid: TimeGrid) -> Self {
        Self {
            grid,
            ..self.clone()
        }
    }

    /// Copy with class parameters rewritten by `f` and re-validated.
    pub fn map_classes(&self, f: impl Fn(&mut AgentClassParams)) -> Result<Self> {
        let classes = self
            .population
            .classes
            .iter()
            .map(|c| {
                let mut p = c.params.clone();
                f(&mut p);
                p
            })
            .collect::<Vec<_>>();
        let metric = classes[0].m.clone();
        let dest = DestinationSet::new(self.destinations.points().to_vec(), metric)?;
        Scenario::new(
            classes,
            self.population.weights.clone(),
            dest,
            self.initial.clone(),
            self.grid,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn half_norm_examples() {
        let w = DMatrix::from_element(1, 1, 500.0);
        assert_eq!(weighted_norm_sq(&v(&[0.0]), &w).unwrap(), 0.0);
        assert_eq!(weighted_norm_sq(&v(&[2.0]), &w).unwrap(), 1000.0);
        assert_eq!(
            weighted_norm_sq(&v(&[1.0, 1.0]), &DMatrix::identity(2, 2)).unwrap(),
            1.0
        );
        assert!(matches!(
            weighted_norm_sq(&v(&[1.0, 1.0]), &w),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn nearest_examples() {
        let d = DestinationSet::scalar(&[-10.0, 10.0], 500.0).unwrap();
        assert_eq!(d.nearest(&v(&[-10.0])), 0);
        assert_eq!(d.nearest(&v(&[0.0])), 0);
        assert_eq!(d.nearest(&v(&[0.3])), 1);
        assert!(d.nearest_checked(&v(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn interval_cells_follow_sorted_midpoints() {
        let d = DestinationSet::scalar(&[4.0, -2.0, 0.0], 1.0).unwrap();
        let cells = d.interval_cells().unwrap();
        assert_eq!(cells[1], (f64::NEG_INFINITY, -1.0));
        assert_eq!(cells[2], (-1.0, 2.0));
        assert_eq!(cells[0], (2.0, f64::INFINITY));
    }

    #[test]
    fn reference_eta() {
        let p = AgentClassParams::scalar(0.1, 0.2, 1.5, 0.1, 5.0, 500.0);
        let c = ClassModel::new(p).unwrap();
        assert_relative_eq!(c.eta, 0.04 / (5.0 * 2.25), max_relative = 1e-14);
        assert_relative_eq!(c.eta, 3.5556e-3, max_relative = 1e-4);
    }

    #[test]
    fn identity_eta_is_one() {
        let i = DMatrix::identity(2, 2);
        let p = AgentClassParams {
            a: DMatrix::zeros(2, 2),
            b: i.clone(),
            sigma: i.clone(),
            q: i.clone(),
            r: i.clone(),
            m: i,
        };
        assert_relative_eq!(ClassModel::new(p).unwrap().eta, 1.0);
    }

    #[test]
    fn indefinite_q_is_reported() {
        let mut p = AgentClassParams::scalar(0.1, 0.2, 1.5, -1.0, 5.0, 500.0);
        p.r = DMatrix::from_element(1, 1, -5.0);
        match ClassModel::new(p) {
            Err(Error::Validation(r)) => {
                let text = r.to_string();
                assert!(text.contains("Q not psd"), "{text}");
                assert!(text.contains("R not symmetric positive definite"), "{text}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn assumption_one_violation_reports_mismatch() {
        let p = AgentClassParams {
            a: DMatrix::zeros(2, 2),
            b: DMatrix::identity(2, 2),
            sigma: DMatrix::from_diagonal(&v(&[1.0, 2.0])),
            q: DMatrix::zeros(2, 2),
            r: DMatrix::identity(2, 2),
            m: DMatrix::identity(2, 2),
        };
        let err = ClassModel::new(p).unwrap_err().to_string();
        assert!(err.contains("Frobenius mismatch"), "{err}");
    }

    #[test]
    fn reference_parameter_sets_validate() {
        let dest = DestinationSet::scalar(&[-10.0, 10.0], 500.0).unwrap();
        let grid = TimeGrid::new(2.0, 100).unwrap();
        for sigma in [1.5, 3.0, 5.0] {
            for q in [0.1, 10.0, 20.0, 25.0] {
                let p = AgentClassParams::scalar(0.1, 0.2, sigma, q, 5.0, 500.0);
                let report = validate_params(&[p], &[1.0], &dest, &grid);
                assert!(report.is_ok(), "{report}");
                assert!(report.eta[0].unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn weight_and_destination_problems_are_all_listed() {
        let p = AgentClassParams::scalar(0.1, 0.2, 1.5, 0.1, 5.0, 500.0);
        let dest = DestinationSet::scalar(&[-10.0, 10.0], 500.0).unwrap();
        let grid = TimeGrid::new(2.0, 10).unwrap();
        let report = validate_params(&[p.clone(), p], &[0.7, -0.1], &dest, &grid);
        assert!(report
            .issues
            .iter()
            .any(|i| i.class == Some(1) && i.message.contains("not positive")));
        assert!(report.issues.iter().any(|i| i.message.contains("sum to")));
        assert!(DestinationSet::scalar(&[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn grid_locate() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.dt(), 0.5);
        assert_eq!(g.locate(1.0), Location::Node(2));
        assert_eq!(g.locate(2.0), Location::Node(4));
        assert_eq!(g.locate(3.0), Location::Node(4));
        match g.locate(0.75) {
            Location::Between(1, th) => assert_relative_eq!(th, 0.5),
            other => panic!("{other:?}"),
        }
        assert_eq!(g.time(4), 2.0);
    }

    proptest! {
        #[test]
        fn nearest_invariant_under_metric_scaling(
            pts in prop::collection::vec(-20.0f64..20.0, 2..6),
            x in -30.0f64..30.0,
            c in 0.01f64..100.0,
        ) {
            let mut pts = pts;
            pts.sort_by(f64::total_cmp);
            pts.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            prop_assume!(pts.len() >= 2);
            let d1 = DestinationSet::scalar(&pts, 1.0).unwrap();
            let d2 = DestinationSet::scalar(&pts, c).unwrap();
            prop_assert_eq!(d1.nearest(&v(&[x])), d2.nearest(&v(&[x])));
        }

        #[test]
        fn voronoi_membership_is_a_partition(
            px in prop::collection::vec(-5.0f64..5.0, 6),
            xs in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 50),
        ) {
            let pts: Vec<_> = px.chunks(2).map(|c| v(c)).collect();
            prop_assume!(pts[0] != pts[1] && pts[1] != pts[2] && pts[0] != pts[2]);
            let metric = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
            let d = DestinationSet::new(pts, metric.clone()).unwrap();
            for (a, b) in xs {
                let x = v(&[a, b]);
                let j = d.nearest(&x);
                let dj = half_quad(&(&x - d.point(j)), &metric);
                let members = (0..3)
                    .filter(|&k| {
                        let dk = half_quad(&(&x - d.point(k)), &metric);
                        dk < dj || (dk == dj && k < j)
                    })
                    .count();
                prop_assert_eq!(members, 0);
            }
        }

        #[test]
        fn half_norm_is_even(x in prop::collection::vec(-100.0f64..100.0, 3)) {
            let w = DMatrix::from_row_slice(3, 3, &[3.0, 1.0, 0.0, 1.0, 2.0, 0.5, 0.0, 0.5, 1.0]);
            let x = v(&x);
            prop_assert_eq!(half_quad(&x, &w), half_quad(&(-&x), &w));
            prop_assert!(half_quad(&x, &w) >= 0.0);
        }
    }
}
