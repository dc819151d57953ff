//! WebAssembly bindings for the static demo in `www/`.
//!
//! Everything runs on the scalar binary-choice scenario (`A=0.1, B=0.2,
//! R=5, M=500, T=2`, destinations `±10`, initial law `N(0.3, 1)`) with a
//! coarse grid so that a full bisection stays interactive.

use minlqg_core::config::reference_binary_with;
use minlqg_core::meanfield::{bisection_fixed_point, Cdm, MeanFieldConfig, MeanFieldProblem};
use nalgebra::DVector;
use wasm_bindgen::prelude::*;

const STEPS: usize = 200;
const CELLS: usize = 241;
const TOL: f64 = 2e-3;

fn problem(q: f64, sigma: f64) -> Result<MeanFieldProblem, String> {
    if !(q >= 0.0 && q.is_finite()) || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(format!(
            "need Q >= 0 and sigma > 0, got Q = {q}, sigma = {sigma}"
        ));
    }
    let mut cfg = MeanFieldConfig::default();
    cfg.fp.n_nodes = CELLS;
    MeanFieldProblem::with_config(reference_binary_with(q, sigma, 500.0, STEPS), cfg)
        .map_err(|e| e.to_string())
}

/// `[r_0, G(r_0), r_1, G(r_1), ...]` on `points` evenly spaced values of r.
pub fn g_curve(q: f64, sigma: f64, points: usize) -> Result<Vec<f64>, String> {
    let prob = problem(q, sigma)?;
    let points = points.clamp(2, 101);
    let mut out = Vec::with_capacity(2 * points);
    for i in 0..points {
        let r = i as f64 / (points - 1) as f64;
        out.push(r);
        out.push(prob.eval_g(r).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

/// Equilibrium of the binary game with its density snapshots.
#[wasm_bindgen]
pub struct Equilibrium {
    r: f64,
    x: Vec<f64>,
    densities: Vec<Vec<f64>>,
    times: Vec<f64>,
    mean: Vec<f64>,
    tracked: Vec<f64>,
}

#[wasm_bindgen]
impl Equilibrium {
    /// Left-cell probability at the fixed point.
    #[wasm_bindgen(getter)]
    pub fn r(&self) -> f64 {
        self.r
    }

    #[wasm_bindgen(getter)]
    pub fn x(&self) -> Vec<f64> {
        self.x.clone()
    }

    /// Density at `t = 0`, `T/2` and `T` for `k = 0, 1, 2`.
    pub fn density(&self, k: usize) -> Vec<f64> {
        self.densities.get(k).cloned().unwrap_or_default()
    }

    #[wasm_bindgen(getter)]
    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    /// Population mean of the Fokker-Planck density.
    #[wasm_bindgen(getter)]
    pub fn mean(&self) -> Vec<f64> {
        self.mean.clone()
    }

    /// Tracked path `x̄` at the fixed point.
    #[wasm_bindgen(getter)]
    pub fn tracked(&self) -> Vec<f64> {
        self.tracked.clone()
    }
}

pub fn solve_equilibrium(q: f64, sigma: f64) -> Result<Equilibrium, String> {
    let prob = problem(q, sigma)?;
    let root = bisection_fixed_point(&prob, TOL, 20).map_err(|e| e.to_string())?;
    let lambda = Cdm::binary(root.r).map_err(|e| e.to_string())?;
    let eval = prob
        .eval_f_detailed(&lambda, &[STEPS / 2])
        .map_err(|e| e.to_string())?;
    let field = &eval.densities[0];
    let densities = [0, STEPS / 2, STEPS]
        .iter()
        .map(|&i| {
            field
                .snapshot_at(i)
                .map(<[f64]>::to_vec)
                .unwrap_or_default()
        })
        .collect();
    Ok(Equilibrium {
        r: root.r,
        x: (0..field.space.n).map(|c| field.space.center(c)).collect(),
        densities,
        times: (0..=STEPS).map(|i| field.time.time(i)).collect(),
        mean: field.mean.clone(),
        tracked: eval.path.xbar.iter().map(|v| v[0]).collect(),
    })
}

/// Probability of heading left, `w_0(t, x)`, on an `nt × nx` grid over
/// `[0, T) × [-15, 15]`, row-major in `t`.
pub fn left_choice_field(
    q: f64,
    sigma: f64,
    r: f64,
    nt: usize,
    nx: usize,
) -> Result<Vec<f64>, String> {
    let prob = problem(q, sigma)?;
    let lambda = Cdm::binary(r).map_err(|e| e.to_string())?;
    let path = prob.mean_path(&lambda).map_err(|e| e.to_string())?;
    let policy = prob.policies(&path).map_err(|e| e.to_string())?.remove(0);
    let (nt, nx) = (nt.clamp(2, 200), nx.clamp(2, 400));
    let horizon = prob.grid().horizon();
    let mut out = Vec::with_capacity(nt * nx);
    for i in 0..nt {
        let t = horizon * i as f64 / nt as f64;
        for k in 0..nx {
            let x = -15.0 + 30.0 * k as f64 / (nx - 1) as f64;
            out.push(
                policy
                    .weights(t, &DVector::from_element(1, x))
                    .map_err(|e| e.to_string())?[0],
            );
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn fixed_point_map(q: f64, sigma: f64, points: usize) -> Result<Vec<f64>, JsError> {
    g_curve(q, sigma, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn equilibrium_densities(q: f64, sigma: f64) -> Result<Equilibrium, JsError> {
    solve_equilibrium(q, sigma).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn choice_field(q: f64, sigma: f64, r: f64, nt: usize, nx: usize) -> Result<Vec<f64>, JsError> {
    left_choice_field(q, sigma, r, nt, nx).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_curve_is_a_probability_increasing_in_r() {
        let g = g_curve(0.1, 1.5, 5).unwrap();
        assert_eq!(g.len(), 10);
        assert!(g.chunks(2).all(|p| (0.0..=1.0).contains(&p[1])));
        assert!(g
            .chunks(2)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1][1] >= w[0][1]));
    }

    #[test]
    fn coarse_equilibrium_is_close_to_the_fine_one() {
        let eq = solve_equilibrium(0.1, 1.5).unwrap();
        assert!((eq.r - 0.39).abs() < 0.03, "r = {}", eq.r);
        assert_eq!(eq.densities.len(), 3);
        assert!(eq.densities.iter().all(|d| d.len() == CELLS));
        assert_eq!(eq.mean.len(), STEPS + 1);
        let dx = eq.x[1] - eq.x[0];
        let mass: f64 = eq.density(2).iter().sum::<f64>() * dx;
        assert!((mass - 1.0).abs() < 1e-3);
    }

    #[test]
    fn choice_field_is_monotone_in_x_at_t0() {
        let f = left_choice_field(0.1, 1.5, 0.39, 2, 31).unwrap();
        assert!(f[..31].windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(f[0] > 0.99 && f[30] < 0.01);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(problem(-1.0, 1.5).is_err());
        assert!(problem(1.0, 0.0).is_err());
    }
}
