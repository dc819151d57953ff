//! Mean-field equilibria over choice distribution matrices.
//!
//! For a candidate CDM `Λ` (row `s` gives the probabilities that class `s`
//! ends in each cell), the tracked mean path is
//! `x̄^Λ(t) = P₁(R₁(t)X̄(0) + R₂(t)(Λ⊗I_n)p)`. Every class best-responds to
//! `x̄^Λ`, its law is propagated to `T`, and the terminal cell masses form
//! `F(Λ)`. Equilibria are the fixed points of `F`.

pub mod fixed_point;
pub mod fokker_planck;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lqg::{LqgBase, BLOW_UP_NORM, MAX_CONDITION};
use crate::minlqg::{CellSampling, MinLqgPolicy};
use crate::model::{Population, Scenario, TimeGrid};
use crate::numeric::{condition_number, par_map_range, rk4_step, MatrixPath};

pub use fixed_point::{
    bisection_fixed_point, boundedness_sweep, consistency_residual, damped_iteration,
    find_all_fixed_points, multi_start, BisectionResult, BoundednessRow, DampedResult,
};
pub use fokker_planck::{solve_fokker_planck, DensityField, FpConfig, SpaceGrid};

/// Block-diagonal stacking of the class matrices plus the averaging
/// operators `P₁ = P_θ'⊗I_n` and `L = I - 1_k⊗P₁`.
#[derive(Clone, Debug)]
pub struct AggregateModel {
    pub k: usize,
    pub n: usize,
    pub block_a: DMatrix<f64>,
    /// `diag(B_s R_s⁻¹ B_s')`.
    pub block_s: DMatrix<f64>,
    pub block_q: DMatrix<f64>,
    pub block_m: DMatrix<f64>,
    pub block_sigma: DMatrix<f64>,
    pub p1: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

impl AggregateModel {
    pub fn new(pop: &Population) -> Self {
        let k = pop.k();
        let n = pop.n();
        let nk = n * k;
        let block = |f: &dyn Fn(usize) -> DMatrix<f64>| {
            let mut out = DMatrix::zeros(nk, nk);
            for s in 0..k {
                out.view_mut((s * n, s * n), (n, n)).copy_from(&f(s));
            }
            out
        };
        let c = &pop.classes;
        let mut p1 = DMatrix::zeros(n, nk);
        for (s, w) in pop.weights.iter().enumerate() {
            p1.view_mut((0, s * n), (n, n))
                .copy_from(&(DMatrix::identity(n, n) * *w));
        }
        let mut ones_p1 = DMatrix::zeros(nk, nk);
        for s in 0..k {
            ones_p1.view_mut((s * n, 0), (n, nk)).copy_from(&p1);
        }
        Self {
            k,
            n,
            block_a: block(&|s| c[s].params.a.clone()),
            block_s: block(&|s| c[s].s.clone()),
            block_q: block(&|s| c[s].params.q.clone()),
            block_m: block(&|s| c[s].params.m.clone()),
            block_sigma: block(&|s| c[s].params.sigma.clone()),
            p1,
            l: DMatrix::identity(nk, nk) - ones_p1,
        }
    }

    pub fn nk(&self) -> usize {
        self.n * self.k
    }

    /// `1_k ⊗ v`.
    pub fn stack(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nk(), |i, _| v[i % self.n])
    }

    fn riccati_rhs(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        -(self.block_a.transpose() * p) - p * &self.block_a + p * &self.block_s * p
            - &self.block_q * &self.l
    }
}

/// Backward RK4 for the nonsymmetric aggregate Riccati equation
/// `dπ/dt = -A'π - πA + πSπ - QL`, `π(T) = M` (block matrices).
///
/// Blow-up means the mean-field equations have no solution on this horizon
/// for the given coupling and is reported as [`Error::AggregateRiccati`].
pub fn solve_aggregate_riccati(agg: &AggregateModel, grid: &TimeGrid) -> Result<MatrixPath> {
    let n_steps = grid.n_steps();
    let mut values = vec![DMatrix::zeros(0, 0); n_steps + 1];
    values[n_steps] = agg.block_m.clone();
    for i in (0..n_steps).rev() {
        let next = rk4_step(&values[i + 1], grid.time(i + 1), -grid.dt(), |_, p| {
            agg.riccati_rhs(p)
        });
        let norm = next.norm();
        if !(norm <= BLOW_UP_NORM) {
            return Err(Error::AggregateRiccati {
                t: grid.time(i),
                norm,
            });
        }
        values[i] = next;
    }
    let slopes = values.iter().map(|p| agg.riccati_rhs(p)).collect();
    Ok(MatrixPath::new(*grid, values, slopes))
}

/// Fundamental solutions used to build mean paths.
#[derive(Clone, Debug)]
pub struct PathBasis {
    /// `R₁(t) = R₁(t,0)`: `dR₁/dt = (A - Sπ)R₁`, `R₁(0) = I`.
    pub r1: MatrixPath,
    /// `dR₂/dt = (A - Sπ)R₂ + SΓ(t)M`, `R₂(0) = 0`.
    pub r2: MatrixPath,
    /// `dΓ/dt = -(A' - πS)Γ`, `Γ(T) = I`; propagates the terminal costate
    /// `γ(T) = -M(Λ⊗I)p` backward.
    pub gamma: MatrixPath,
}

impl PathBasis {
    /// `R₁(t,s) = R₁(t)R₁(s)⁻¹` at the nearest grid nodes.
    pub fn r1_between(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let r1s = self.r1.at(s);
        let cond = condition_number(&r1s);
        if cond > MAX_CONDITION {
            return Err(Error::IllConditioned { t: s, cond });
        }
        let inv = r1s
            .try_inverse()
            .ok_or(Error::IllConditioned { t: s, cond })?;
        Ok(self.r1.at(t) * inv)
    }
}

pub fn solve_path_basis(agg: &AggregateModel, pi: &MatrixPath) -> Result<PathBasis> {
    let grid = *pi.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let nk = agg.nk();
    let closed = |p: &DMatrix<f64>| &agg.block_a - &agg.block_s * p;
    let gamma_rhs =
        |p: &DMatrix<f64>, g: &DMatrix<f64>| -((agg.block_a.transpose() - p * &agg.block_s) * g);

    let mut gamma = vec![DMatrix::zeros(0, 0); n_steps + 1];
    gamma[n_steps] = DMatrix::identity(nk, nk);
    for i in (0..n_steps).rev() {
        gamma[i] = rk4_step(&gamma[i + 1], grid.time(i + 1), -dt, |t, g| {
            gamma_rhs(&pi.at(t), g)
        });
    }
    let gamma_slopes = (0..=n_steps)
        .map(|i| gamma_rhs(pi.node(i), &gamma[i]))
        .collect();
    let gamma = MatrixPath::new(grid, gamma, gamma_slopes);

    let forcing = |t: f64| &agg.block_s * gamma.at(t) * &agg.block_m;
    let mut r1 = vec![DMatrix::zeros(0, 0); n_steps + 1];
    let mut r2 = vec![DMatrix::zeros(0, 0); n_steps + 1];
    r1[0] = DMatrix::identity(nk, nk);
    r2[0] = DMatrix::zeros(nk, nk);
    for i in 0..n_steps {
        r1[i + 1] = rk4_step(&r1[i], grid.time(i), dt, |t, r| closed(&pi.at(t)) * r);
        r2[i + 1] = rk4_step(&r2[i], grid.time(i), dt, |t, r| {
            closed(&pi.at(t)) * r + forcing(t)
        });
        let norm = r1[i + 1].norm().max(r2[i + 1].norm());
        if !(norm <= BLOW_UP_NORM) {
            return Err(Error::BlowUp {
                what: "mean path basis",
                t: grid.time(i + 1),
                norm,
            });
        }
    }
    let r1_slopes = (0..=n_steps).map(|i| closed(pi.node(i)) * &r1[i]).collect();
    let r2_slopes = (0..=n_steps)
        .map(|i| closed(pi.node(i)) * &r2[i] + &agg.block_s * gamma.node(i) * &agg.block_m)
        .collect();
    Ok(PathBasis {
        r1: MatrixPath::new(grid, r1, r1_slopes),
        r2: MatrixPath::new(grid, r2, r2_slopes),
        gamma,
    })
}

/// A `k × l` row-stochastic matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cdm(DMatrix<f64>);

impl Cdm {
    pub const ROW_TOLERANCE: f64 = 1e-9;

    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        for (s, row) in m.row_iter().enumerate() {
            if row
                .iter()
                .any(|v| !(-Self::ROW_TOLERANCE..=1.0 + Self::ROW_TOLERANCE).contains(v))
            {
                return Err(Error::InvalidArgument(format!(
                    "CDM row {s} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::InvalidArgument(format!("CDM row {s} sums to {sum}")));
            }
        }
        Ok(Self(m))
    }

    /// Normalizes each row to sum to one.
    pub fn normalized(mut m: DMatrix<f64>) -> Result<Self> {
        for mut row in m.row_iter_mut() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row /= s;
            }
        }
        Self::new(m)
    }

    /// `[[r, 1 - r]]`.
    pub fn binary(r: f64) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, 2, &[r, 1.0 - r]))
    }

    /// Every row uniform.
    pub fn barycenter(k: usize, l: usize) -> Self {
        Self(DMatrix::from_element(k, l, 1.0 / l as f64))
    }

    /// Vertices of the product of simplices: class `s` entirely in cell
    /// `choice[s]`.
    pub fn vertex(l: usize, choice: &[usize]) -> Self {
        let mut m = DMatrix::zeros(choice.len(), l);
        for (s, &j) in choice.iter().enumerate() {
            m[(s, j)] = 1.0;
        }
        Self(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn l(&self) -> usize {
        self.0.ncols()
    }

    pub fn max_abs_diff(&self, other: &Cdm) -> f64 {
        (&self.0 - &other.0).amax()
    }

    /// `(1 - ω)self + ωother`.
    pub fn blend(&self, other: &Cdm, omega: f64) -> Cdm {
        Cdm(&self.0 * (1.0 - omega) + &other.0 * omega)
    }

    /// Row-major entries.
    pub fn entries(&self) -> Vec<f64> {
        self.0
            .row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
            .collect()
    }
}

/// Tracked mean on the grid: population average and per-class means.
#[derive(Clone, Debug, Serialize)]
pub struct MeanFieldPath {
    pub time: TimeGrid,
    pub xbar: Vec<DVector<f64>>,
    pub xbar_classes: Vec<DVector<f64>>,
}

impl MeanFieldPath {
    /// `(∫₀ᵀ ‖x̄‖² dt)^½` by the trapezoid rule.
    pub fn l2_norm(&self) -> f64 {
        let dt = self.time.dt();
        let sq: Vec<f64> = self.xbar.iter().map(|v| v.norm_squared()).collect();
        let inner: f64 = sq.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
        inner.sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.xbar.iter().map(|v| v.amax()).fold(0.0, f64::max)
    }
}

/// Settings for evaluating `F`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanFieldConfig {
    pub fp: FpConfig,
    /// Ensemble size when the state is not scalar.
    pub ensemble_paths: usize,
    /// Cell-probability sampling of the policies when the state is not
    /// scalar.
    pub cell_sampling: CellSampling,
    pub seed: u64,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            fp: FpConfig::default(),
            ensemble_paths: 20_000,
            cell_sampling: CellSampling::default(),
            seed: 1,
        }
    }
}

/// Everything needed to evaluate `F` for one scenario. The parts that do not
/// depend on `Λ` (class Riccati solutions, `π`, path basis) are computed once.
#[derive(Clone, Debug)]
pub struct MeanFieldProblem {
    pub scenario: Scenario,
    pub config: MeanFieldConfig,
    pub aggregate: AggregateModel,
    pub pi: MatrixPath,
    pub basis: PathBasis,
    pub bases: Vec<Arc<LqgBase>>,
    x0: DVector<f64>,
    p_stack: Vec<DVector<f64>>,
}

/// Output of one evaluation of `F` with its intermediate objects.
#[derive(Clone, Debug)]
pub struct FEvaluation {
    pub cdm: Cdm,
    pub path: MeanFieldPath,
    /// One per class for scalar states; empty otherwise.
    pub densities: Vec<DensityField>,
    /// Per-class mean at every node (from densities or ensembles).
    pub class_means: Vec<Vec<DVector<f64>>>,
}

impl MeanFieldProblem {
    pub fn new(scenario: Scenario) -> Result<Self> {
        Self::with_config(scenario, MeanFieldConfig::default())
    }

    pub fn with_config(scenario: Scenario, config: MeanFieldConfig) -> Result<Self> {
        let aggregate = AggregateModel::new(&scenario.population);
        let pi = solve_aggregate_riccati(&aggregate, &scenario.grid)?;
        let basis = solve_path_basis(&aggregate, &pi)?;
        let bases = scenario
            .population
            .classes
            .iter()
            .map(|c| LqgBase::new(c.clone(), &scenario.grid))
            .collect::<Result<Vec<_>>>()?;
        let x0 = aggregate.stack(&scenario.initial.mean());
        let p_stack = scenario.destinations.points().to_vec();
        Ok(Self {
            scenario,
            config,
            aggregate,
            pi,
            basis,
            bases,
            x0,
            p_stack,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.scenario.grid
    }

    fn check_shape(&self, lambda: &Cdm) -> Result<()> {
        let (k, l) = (self.aggregate.k, self.scenario.destinations.len());
        if lambda.k() != k || lambda.l() != l {
            return Err(Error::Dimension(format!(
                "CDM is {}x{}, expected {k}x{l}",
                lambda.k(),
                lambda.l()
            )));
        }
        Ok(())
    }

    /// `(Λ⊗I_n)p`: each class's expected destination, stacked.
    fn expected_destinations(&self, lambda: &Cdm) -> DVector<f64> {
        let n = self.aggregate.n;
        let mut out = DVector::zeros(self.aggregate.nk());
        for s in 0..self.aggregate.k {
            let mut acc = DVector::zeros(n);
            for (j, p) in self.p_stack.iter().enumerate() {
                acc += p * lambda.matrix()[(s, j)];
            }
            out.rows_mut(s * n, n).copy_from(&acc);
        }
        out
    }

    /// `x̄^Λ` and the per-class means on every grid node.
    pub fn mean_path(&self, lambda: &Cdm) -> Result<MeanFieldPath> {
        self.check_shape(lambda)?;
        let pbar = self.expected_destinations(lambda);
        let classes: Vec<DVector<f64>> = (0..=self.grid().n_steps())
            .map(|i| self.basis.r1.node(i) * &self.x0 + self.basis.r2.node(i) * &pbar)
            .collect();
        let xbar = classes.iter().map(|x| &self.aggregate.p1 * x).collect();
        Ok(MeanFieldPath {
            time: *self.grid(),
            xbar,
            xbar_classes: classes,
        })
    }

    /// Best responses of every class to `x̄^Λ`.
    pub fn policies(&self, path: &MeanFieldPath) -> Result<Vec<MinLqgPolicy>> {
        self.bases
            .iter()
            .map(|b| {
                MinLqgPolicy::with_sampling(
                    b.clone(),
                    self.scenario.destinations.clone(),
                    path.xbar.clone(),
                    self.config.cell_sampling,
                )
            })
            .collect()
    }

    pub fn space_grid(&self, class: usize) -> Result<SpaceGrid> {
        let c = &self.scenario.population.classes[class];
        let sigma = c.params.sigma[(0, 0)].abs();
        let std0 = self.scenario.initial.covariance()[(0, 0)].sqrt();
        let spread = self.config.fp.margin * (sigma * self.grid().horizon().sqrt() + std0);
        let pts: Vec<f64> = self
            .scenario
            .destinations
            .points()
            .iter()
            .map(|p| p[0])
            .collect();
        let lo = pts
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .min(self.scenario.initial.mean()[0]);
        let hi = pts
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(self.scenario.initial.mean()[0]);
        SpaceGrid::new(lo - spread, hi + spread, self.config.fp.n_nodes)
    }

    /// Fokker-Planck density of one class under its policy.
    pub fn density(
        &self,
        class: usize,
        policy: &MinLqgPolicy,
        keep: &[usize],
    ) -> Result<DensityField> {
        let space = self.space_grid(class)?;
        let p0 = space.discretize(&self.scenario.initial)?;
        let sigma = self.scenario.population.classes[class].params.sigma[(0, 0)];
        solve_fokker_planck(
            |i, x| policy.drift_scalar_at_node(i, x),
            sigma,
            &space,
            self.grid(),
            p0,
            keep,
            self.config.fp.mass_tolerance,
        )
    }

    /// `F(Λ)` with densities kept at the given time nodes.
    pub fn eval_f_detailed(&self, lambda: &Cdm, keep: &[usize]) -> Result<FEvaluation> {
        let path = self.mean_path(lambda)?;
        let policies = self.policies(&path)?;
        let l = self.scenario.destinations.len();
        let k = self.aggregate.k;
        let mut f = DMatrix::zeros(k, l);
        let mut densities = Vec::new();
        let mut class_means = Vec::with_capacity(k);
        if self.aggregate.n == 1 && policies.iter().all(MinLqgPolicy::is_scalar) {
            let cells = self
                .scenario
                .destinations
                .interval_cells()
                .expect("scalar destinations");
            let fields = par_map_range(k, |s| self.density(s, &policies[s], keep));
            for (s, field) in fields.into_iter().enumerate() {
                let field = field?;
                for (j, (a, b)) in cells.iter().enumerate() {
                    f[(s, j)] = field.terminal_mass_in(*a, *b);
                }
                class_means.push(
                    field
                        .mean
                        .iter()
                        .map(|m| DVector::from_element(1, *m))
                        .collect(),
                );
                densities.push(field);
            }
        } else {
            for (s, policy) in policies.iter().enumerate() {
                let seed = self.config.seed.wrapping_add(s as u64);
                let ens = crate::mc::simulate_class(
                    policy,
                    &self.scenario.initial,
                    self.config.ensemble_paths,
                    seed,
                    1,
                )?;
                for j in ens.terminal_cells.iter() {
                    f[(s, *j)] += 1.0;
                }
                class_means.push(ens.mean);
            }
        }
        Ok(FEvaluation {
            cdm: Cdm::normalized(f)?,
            path,
            densities,
            class_means,
        })
    }

    pub fn eval_f(&self, lambda: &Cdm) -> Result<Cdm> {
        Ok(self.eval_f_detailed(lambda, &[])?.cdm)
    }

    /// `G(r) = [F(r, 1 - r)]₁` for the scalar binary scenario.
    pub fn eval_g(&self, r: f64) -> Result<f64> {
        self.scenario.require_scalar_binary()?;
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("r = {r} is outside [0, 1]")));
        }
        Ok(self.eval_f(&Cdm::binary(r)?)?.matrix()[(0, 0)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::reference_binary_with;
    use crate::lqg::solve_riccati;
    use crate::model::{AgentClassParams, ClassModel, DestinationSet, InitialDistribution};
    use approx::assert_relative_eq;

    fn scenario(q: f64, n_steps: usize) -> Scenario {
        reference_binary_with(q, 1.5, 500.0, n_steps)
    }

    #[test]
    fn averaging_and_consensus_operators() {
        let c = ClassModel::new(AgentClassParams::scalar(0.1, 0.2, 1.5, 1.0, 5.0, 500.0)).unwrap();
        let pop = Population {
            classes: vec![c.clone(), c.clone(), c],
            weights: vec![0.2, 0.3, 0.5],
        };
        let agg = AggregateModel::new(&pop);
        let v = DVector::from_element(1, 2.5);
        let stacked = agg.stack(&v);
        assert_relative_eq!((&agg.p1 * &stacked)[0], 2.5, epsilon = 1e-14);
        assert!((&agg.l * &stacked).amax() < 1e-14);
    }

    #[test]
    fn single_class_aggregate_riccati_reduces_to_the_class_equation() {
        // With k = 1 the coupling L vanishes, so π solves the class Riccati
        // equation without the Q term.
        let s = scenario(10.0, 2000);
        let agg = AggregateModel::new(&s.population);
        assert!(agg.l.amax() == 0.0);
        let pi = solve_aggregate_riccati(&agg, &s.grid).unwrap();
        assert_eq!(pi.node(2000)[(0, 0)], 500.0);
        let mut no_q = s.population.classes[0].params.clone();
        no_q.q = DMatrix::zeros(1, 1);
        let big_pi = solve_riccati(&ClassModel::new(no_q).unwrap(), &s.grid).unwrap();
        for i in 0..=2000 {
            assert!((pi.node(i) - big_pi.node(i)).amax() < 1e-8);
        }
    }

    #[test]
    fn identical_classes_reproduce_the_single_class_solution() {
        let s1 = scenario(10.0, 500);
        let c = s1.population.classes[0].clone();
        let pop2 = Population {
            classes: vec![c.clone(), c],
            weights: vec![0.5, 0.5],
        };
        let pi1 = solve_aggregate_riccati(&AggregateModel::new(&s1.population), &s1.grid).unwrap();
        let agg2 = AggregateModel::new(&pop2);
        let pi2 = solve_aggregate_riccati(&agg2, &s1.grid).unwrap();
        let v = DVector::from_element(1, 1.7);
        for i in (0..=500).step_by(25) {
            let out = pi2.node(i) * agg2.stack(&v);
            let expect = pi1.node(i)[(0, 0)] * 1.7;
            assert_relative_eq!(out[0], expect, max_relative = 1e-10);
            assert_relative_eq!(out[1], expect, max_relative = 1e-10);
        }
    }

    #[test]
    fn basis_initial_conditions_and_gamma_identity() {
        let s = scenario(0.1, 1000);
        let prob = MeanFieldProblem::new(s).unwrap();
        assert_eq!(prob.basis.r1.node(0)[(0, 0)], 1.0);
        assert_eq!(prob.basis.r2.node(0)[(0, 0)], 0.0);
        // For symmetric π, Γ(t) = R₁(T,t)'.
        for &t in &[0.0, 0.5, 1.2, 1.9] {
            let r = prob.basis.r1_between(2.0, t).unwrap();
            assert_relative_eq!(
                prob.basis.gamma.at(t)[(0, 0)],
                r[(0, 0)],
                max_relative = 1e-7
            );
        }
    }

    #[test]
    fn degenerate_generator_basis() {
        // A = 0, S = 0: R₁ ≡ I and R₂(t) = tM.
        let mut c =
            ClassModel::new(AgentClassParams::scalar(0.0, 0.2, 1.5, 0.0, 5.0, 3.0)).unwrap();
        c.s = DMatrix::zeros(1, 1);
        let agg = AggregateModel::new(&Population::uniform(c));
        let grid = TimeGrid::new(2.0, 100).unwrap();
        let pi = solve_aggregate_riccati(&agg, &grid).unwrap();
        let basis = solve_path_basis(&agg, &pi).unwrap();
        for i in 0..=100 {
            assert_relative_eq!(basis.r1.node(i)[(0, 0)], 1.0, epsilon = 1e-14);
            assert_relative_eq!(basis.r2.node(i)[(0, 0)], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn mean_path_matches_direct_integration_of_the_mean_equations() {
        // Oracle: integrate x̄' = (A - Sπ)x̄ - Sγ, γ' = -(A' - πS)γ with
        // γ(T) = -M p̄ by plain RK4 on a fine grid.
        let s = scenario(10.0, 1000);
        let prob = MeanFieldProblem::new(s.clone()).unwrap();
        let lambda = Cdm::binary(0.3).unwrap();
        let path = prob.mean_path(&lambda).unwrap();
        let fine = s.grid.refined(4);
        let agg = AggregateModel::new(&s.population);
        let pi = solve_aggregate_riccati(&agg, &fine).unwrap();
        let (a, sm, m) = (
            agg.block_a[(0, 0)],
            agg.block_s[(0, 0)],
            agg.block_m[(0, 0)],
        );
        let pbar = 0.3 * -10.0 + 0.7 * 10.0;
        let mut gamma = vec![0.0; 4001];
        gamma[4000] = -m * pbar;
        for i in (0..4000).rev() {
            gamma[i] = rk4_step(&gamma[i + 1], fine.time(i + 1), -fine.dt(), |t, g| {
                -(a - pi.at(t)[(0, 0)] * sm) * g
            });
        }
        let g_at = |t: f64| {
            let u = t / fine.dt();
            let i = (u.floor() as usize).min(3999);
            let th = u - i as f64;
            gamma[i] * (1.0 - th) + gamma[i + 1] * th
        };
        let mut x = 0.3;
        for i in 0..4000 {
            x = rk4_step(&x, fine.time(i), fine.dt(), |t, x| {
                (a - sm * pi.at(t)[(0, 0)]) * x - sm * g_at(t)
            });
            if (i + 1) % 4 == 0 {
                let coarse = path.xbar[(i + 1) / 4][0];
                assert!(
                    (coarse - x).abs() < 1e-4 * (1.0 + x.abs()),
                    "t={} {coarse} vs {x}",
                    fine.time(i + 1)
                );
            }
        }
        // terminal mean lies strictly between the start and the pull target
        let toward_left = prob.mean_path(&Cdm::binary(1.0).unwrap()).unwrap();
        let end = toward_left.xbar[1000][0];
        assert!(end < 0.3 && end > -10.0, "{end}");
    }

    #[test]
    fn mean_path_is_a_deterministic_function_of_lambda() {
        let prob = MeanFieldProblem::new(scenario(0.1, 400)).unwrap();
        let a = prob.mean_path(&Cdm::binary(0.39).unwrap()).unwrap();
        let b = prob.mean_path(&Cdm::binary(0.39).unwrap()).unwrap();
        assert_eq!(a.xbar, b.xbar);
        for (x, xc) in a.xbar.iter().zip(&a.xbar_classes) {
            assert_eq!(x, &(&prob.aggregate.p1 * xc));
        }
    }

    #[test]
    fn symmetric_midpoint_path_is_constant() {
        let s = Scenario::new(
            vec![AgentClassParams::scalar(0.0, 0.2, 1.5, 5.0, 5.0, 500.0)],
            vec![1.0],
            DestinationSet::scalar(&[-10.0, 10.0], 500.0).unwrap(),
            InitialDistribution::scalar_gaussian(0.0, 1.0),
            TimeGrid::new(2.0, 400).unwrap(),
        )
        .unwrap();
        let prob = MeanFieldProblem::new(s).unwrap();
        let path = prob.mean_path(&Cdm::binary(0.5).unwrap()).unwrap();
        assert!(path.sup_norm() < 1e-12);
        assert!(path.l2_norm() < 1e-12);
    }

    #[test]
    fn vector_states_use_the_ensemble() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let params = AgentClassParams {
            a: DMatrix::zeros(2, 2),
            b: eye.clone(),
            sigma: eye.clone() * 0.8,
            q: eye.clone() * 0.1,
            r: eye.clone(),
            m: eye.clone() * 50.0,
        };
        let dest = DestinationSet::new(
            vec![
                DVector::from_vec(vec![-3.0, 0.0]),
                DVector::from_vec(vec![3.0, 0.0]),
            ],
            eye.clone() * 50.0,
        )
        .unwrap();
        let init = InitialDistribution::Gaussian {
            mean: DVector::from_vec(vec![0.5, 0.0]),
            cov: eye,
        };
        let s = Scenario::new(
            vec![params],
            vec![1.0],
            dest,
            init,
            TimeGrid::new(1.0, 50).unwrap(),
        )
        .unwrap();
        let cfg = MeanFieldConfig {
            ensemble_paths: 200,
            ..MeanFieldConfig::default()
        };
        let prob = MeanFieldProblem::with_config(s, cfg).unwrap();
        let eval = prob.eval_f_detailed(&Cdm::barycenter(1, 2), &[]).unwrap();
        assert!(eval.densities.is_empty());
        assert_relative_eq!(eval.cdm.matrix().row(0).sum(), 1.0, epsilon = 1e-12);
        // starting right of the boundary, most agents pick the right cell
        assert!(eval.cdm.matrix()[(0, 1)] > 0.5);
        assert_eq!(eval.class_means[0].len(), 51);
        assert!(prob.eval_g(0.5).is_err());
    }

    #[test]
    fn cdm_validation() {
        assert!(Cdm::binary(1.2).is_err());
        assert!(Cdm::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.6])).is_err());
        let v = Cdm::vertex(3, &[2, 0]);
        assert_eq!(v.entries(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let b = Cdm::barycenter(2, 4);
        assert_relative_eq!(b.matrix().row(1).sum(), 1.0);
    }

    #[test]
    fn g_requires_a_scalar_binary_scenario() {
        let s = Scenario::new(
            vec![AgentClassParams::scalar(0.1, 0.2, 1.5, 1.0, 5.0, 500.0)],
            vec![1.0],
            DestinationSet::scalar(&[-10.0, 0.0, 10.0], 500.0).unwrap(),
            InitialDistribution::scalar_gaussian(0.0, 1.0),
            TimeGrid::new(2.0, 50).unwrap(),
        )
        .unwrap();
        let prob = MeanFieldProblem::new(s).unwrap();
        assert!(matches!(prob.eval_g(0.5), Err(Error::Scenario(_))));
    }
}
