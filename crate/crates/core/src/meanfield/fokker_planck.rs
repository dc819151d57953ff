//! Implicit finite-volume Fokker-Planck solver for scalar states.
//!
//! Cell-centred densities, upwind advective fluxes, central diffusive fluxes
//! and zero flux through the outer faces. Backward Euler in time gives a
//! tridiagonal M-matrix whose columns sum to one, so every step conserves
//! mass exactly and keeps densities nonnegative.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{InitialDistribution, TimeGrid};
use crate::numeric::{norm_cdf, solve_tridiagonal};

/// Spatial discretization of the Fokker-Planck equation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FpConfig {
    /// Number of cells.
    pub n_nodes: usize,
    /// Domain half-margin in units of `σ√T + std₀` beyond the outermost
    /// destinations.
    pub margin: f64,
    /// Largest tolerated `|mass - 1|` at any step.
    pub mass_tolerance: f64,
}

impl Default for FpConfig {
    fn default() -> Self {
        Self {
            n_nodes: 801,
            margin: 5.0,
            mass_tolerance: 1e-3,
        }
    }
}

/// Uniform cell-centred grid on `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpaceGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl SpaceGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) || n < 3 {
            return Err(Error::InvalidArgument(format!(
                "space grid needs lo < hi and at least 3 cells, got [{lo}, {hi}] with {n}"
            )));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.dx()
    }

    /// Interior face between cells `k` and `k + 1`.
    pub fn face(&self, k: usize) -> f64 {
        self.lo + (k + 1) as f64 * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.center(k)).collect()
    }

    /// Cell averages of the density of `init` (Gaussian cell masses, or a
    /// Gaussian kernel estimate with Silverman's bandwidth for samples),
    /// normalized to unit mass on the grid.
    pub fn discretize(&self, init: &InitialDistribution) -> Result<Vec<f64>> {
        let dx = self.dx();
        let bump = |mu: f64, sd: f64, k: usize| {
            let a = self.lo + k as f64 * dx;
            norm_cdf((a + dx - mu) / sd) - norm_cdf((a - mu) / sd)
        };
        let mut p: Vec<f64> = match init {
            InitialDistribution::Gaussian { mean, cov } => {
                let sd = cov[(0, 0)].sqrt();
                (0..self.n).map(|k| bump(mean[0], sd, k)).collect()
            }
            InitialDistribution::Samples(samples) => {
                let xs: Vec<f64> = samples.iter().map(|v| v[0]).collect();
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.max(2.0);
                let h = (1.06 * var.sqrt() * n.powf(-0.2)).max(dx);
                let mut p = vec![0.0; self.n];
                for &x in &xs {
                    for (k, pk) in p.iter_mut().enumerate() {
                        *pk += bump(x, h, k);
                    }
                }
                p
            }
        };
        let mass: f64 = p.iter().sum();
        if !(mass > 0.5) {
            return Err(Error::InvalidArgument(format!(
                "initial law places only {mass:.3e} mass on [{}, {}]",
                self.lo, self.hi
            )));
        }
        for v in &mut p {
            *v /= mass * dx;
        }
        Ok(p)
    }

    /// Mass of the density `p` inside `(a, b)`, counting partial cells by
    /// overlap length.
    pub fn mass_in(&self, p: &[f64], a: f64, b: f64) -> f64 {
        let dx = self.dx();
        p.iter()
            .enumerate()
            .map(|(k, v)| {
                let l = self.lo + k as f64 * dx;
                let overlap = (b.min(l + dx) - a.max(l)).max(0.0);
                v * overlap
            })
            .sum()
    }
}

/// Fokker-Planck solution for one class.
#[derive(Clone, Debug, Serialize)]
pub struct DensityField {
    pub space: SpaceGrid,
    pub time: TimeGrid,
    /// Density snapshots `(node index, values)` in increasing time order;
    /// always includes the initial and terminal densities.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    /// Mean of the density at every time node.
    pub mean: Vec<f64>,
    /// Total mass at every time node.
    pub mass: Vec<f64>,
    /// Largest mass removed by clipping negative round-off in one step.
    pub max_clipped: f64,
}

impl DensityField {
    pub fn terminal(&self) -> &[f64] {
        &self.snapshots.last().expect("terminal snapshot").1
    }

    pub fn initial(&self) -> &[f64] {
        &self.snapshots[0].1
    }

    pub fn snapshot_at(&self, node: usize) -> Option<&[f64]> {
        self.snapshots
            .iter()
            .find(|(i, _)| *i == node)
            .map(|(_, v)| v.as_slice())
    }

    /// Mass of the terminal density inside `(a, b)`.
    pub fn terminal_mass_in(&self, a: f64, b: f64) -> f64 {
        self.space.mass_in(self.terminal(), a, b)
    }

    /// `Σ |p - q| dx` between the terminal density and `q` on the centres.
    pub fn l1_distance<F: Fn(f64) -> f64>(&self, node: usize, q: F) -> Option<f64> {
        let p = self.snapshot_at(node)?;
        let dx = self.space.dx();
        Some(
            p.iter()
                .enumerate()
                .map(|(k, v)| (v - q(self.space.center(k))).abs() * dx)
                .sum(),
        )
    }
}

/// Propagates `p0` with drift `drift(i, x)` evaluated at time node `i` and
/// constant diffusion `½σ²`. The step from `t_i` to `t_{i+1}` uses the drift
/// at node `i + 1`, except the last step which uses node `N - 1`.
///
/// `keep` lists time nodes whose densities are stored in addition to the
/// initial and terminal ones.
pub fn solve_fokker_planck<F>(
    drift: F,
    sigma: f64,
    space: &SpaceGrid,
    time: &TimeGrid,
    p0: Vec<f64>,
    keep: &[usize],
    mass_tolerance: f64,
) -> Result<DensityField>
where
    F: Fn(usize, f64) -> f64,
{
    let n = space.n;
    let n_steps = time.n_steps();
    let dx = space.dx();
    let lambda = time.dt() / dx;
    let d = 0.5 * sigma * sigma / dx;
    let faces: Vec<f64> = (0..n - 1).map(|k| space.face(k)).collect();
    let mut mu = vec![0.0; n - 1];
    let (mut lower, mut diag, mut upper) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut scratch = vec![0.0; n];
    let mut p = p0;
    let stats = |p: &[f64]| {
        let mass: f64 = p.iter().sum::<f64>() * dx;
        let first: f64 = p
            .iter()
            .enumerate()
            .map(|(k, v)| v * space.center(k))
            .sum::<f64>()
            * dx;
        (mass, first / mass)
    };
    let (m0, mean0) = stats(&p);
    let mut mass = vec![m0; n_steps + 1];
    let mut mean = vec![mean0; n_steps + 1];
    let mut snapshots = vec![(0, p.clone())];
    let mut max_clipped = 0.0f64;
    for i in 0..n_steps {
        let node = if i + 1 == n_steps { n_steps - 1 } else { i + 1 };
        for (m, &xf) in mu.iter_mut().zip(&faces) {
            *m = drift(node, xf);
        }
        for k in 0..n {
            let mut dk = 1.0;
            if k + 1 < n {
                let m = mu[k];
                dk += lambda * (m.max(0.0) + d);
                upper[k] = lambda * (m.min(0.0) - d);
            } else {
                upper[k] = 0.0;
            }
            if k > 0 {
                let m = mu[k - 1];
                dk += lambda * (-m.min(0.0) + d);
                lower[k] = lambda * (-m.max(0.0) - d);
            } else {
                lower[k] = 0.0;
            }
            diag[k] = dk;
        }
        solve_tridiagonal(&lower, &diag, &upper, &mut p, &mut scratch);
        let mut clipped = 0.0;
        for v in p.iter_mut() {
            if *v < 0.0 {
                clipped -= *v;
                *v = 0.0;
            }
        }
        max_clipped = max_clipped.max(clipped * dx);
        let (m, mu_t) = stats(&p);
        if !m.is_finite() || (m - 1.0).abs() > mass_tolerance {
            return Err(Error::MassDrift {
                t: time.time(i + 1),
                mass: m,
            });
        }
        mass[i + 1] = m;
        mean[i + 1] = mu_t;
        if i + 1 < n_steps && keep.contains(&(i + 1)) {
            snapshots.push((i + 1, p.clone()));
        }
    }
    snapshots.push((n_steps, p));
    Ok(DensityField {
        space: space.clone(),
        time: *time,
        snapshots,
        mean,
        mass,
        max_clipped,
    })
}
