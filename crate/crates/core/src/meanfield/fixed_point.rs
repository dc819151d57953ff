//! Fixed points of `F`: bisection and scans for the scalar binary case,
//! damped iteration with multi-start in general.

use log::warn;
use serde::Serialize;

use super::{Cdm, MeanFieldProblem};
use crate::error::Result;
use crate::model::Scenario;
use crate::numeric::par_map_range;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BisectionResult {
    /// Midpoint of the final bracket.
    pub r: f64,
    /// `G(r)`.
    pub g: f64,
    pub iterations: usize,
    /// `(r, H(r))` for every evaluation of `H(r) = G(r) - r`.
    pub trace: Vec<(f64, f64)>,
}

impl BisectionResult {
    pub fn residual(&self) -> f64 {
        (self.g - self.r).abs()
    }
}

/// Bisection on `H(r) = G(r) - r` over `[0, 1]`.
///
/// `H(0) = G(0) ≥ 0` and `H(1) = G(1) - 1 ≤ 0` hold for any probability, so
/// the endpoints are not evaluated.
pub fn bisection_fixed_point(
    prob: &MeanFieldProblem,
    tol: f64,
    max_iter: usize,
) -> Result<BisectionResult> {
    bisect(prob, (0.0, 1.0), 1.0, tol, max_iter)
}

/// Bisection on `[lo, hi]` where `sign_lo` is the sign of `H(lo)`.
fn bisect(
    prob: &MeanFieldProblem,
    bracket: (f64, f64),
    sign_lo: f64,
    tol: f64,
    max_iter: usize,
) -> Result<BisectionResult> {
    let (mut lo, mut hi) = bracket;
    let mut trace = Vec::new();
    let mut iterations = 0;
    while hi - lo >= tol && iterations < max_iter {
        let mid = 0.5 * (lo + hi);
        let h = prob.eval_g(mid)? - mid;
        trace.push((mid, h));
        iterations += 1;
        if h == 0.0 {
            lo = mid;
            hi = mid;
        } else if h.signum() == sign_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    let g = prob.eval_g(r)?;
    Ok(BisectionResult {
        r,
        g,
        iterations,
        trace,
    })
}

/// Scans `H` on `n_scan` uniform points of `[0, 1]`, refines every sign
/// change by bisection and merges roots closer than `2·tol`.
pub fn find_all_fixed_points(
    prob: &MeanFieldProblem,
    n_scan: usize,
    tol: f64,
) -> Result<Vec<BisectionResult>> {
    let n_scan = n_scan.max(2);
    let rs: Vec<f64> = (0..n_scan)
        .map(|i| i as f64 / (n_scan - 1) as f64)
        .collect();
    let hs = par_map_range(n_scan, |i| prob.eval_g(rs[i]).map(|g| g - rs[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut roots: Vec<BisectionResult> = Vec::new();
    for i in 0..n_scan - 1 {
        let (h0, h1) = (hs[i], hs[i + 1]);
        let found = if h0 == 0.0 {
            Some(BisectionResult {
                r: rs[i],
                g: rs[i],
                iterations: 0,
                trace: vec![(rs[i], 0.0)],
            })
        } else if h0 * h1 < 0.0 {
            Some(bisect(prob, (rs[i], rs[i + 1]), h0.signum(), tol, 25)?)
        } else {
            None
        };
        if let Some(root) = found {
            if roots
                .last()
                .is_none_or(|prev| (root.r - prev.r).abs() > 2.0 * tol)
            {
                roots.push(root);
            }
        }
    }
    if hs[n_scan - 1] == 0.0
        && roots
            .last()
            .is_none_or(|prev| (1.0 - prev.r).abs() > 2.0 * tol)
    {
        roots.push(BisectionResult {
            r: 1.0,
            g: 1.0,
            iterations: 0,
            trace: vec![(1.0, 0.0)],
        });
    }
    Ok(roots)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DampedResult {
    pub cdm: Cdm,
    pub iterations: usize,
    pub converged: bool,
    /// `max |F(Λ) - Λ|` at the returned matrix.
    pub residual: f64,
}

/// `Λ ← (1 - ω)Λ + ωF(Λ)` until the largest entry change drops below `tol`.
/// Convergence is confirmed by `‖F(Λ) - Λ‖∞ < 5·tol`; otherwise the iterate
/// with the smallest residual is returned and a warning is logged.
pub fn damped_iteration(
    prob: &MeanFieldProblem,
    lambda0: &Cdm,
    omega: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DampedResult> {
    let mut lambda = lambda0.clone();
    let mut f = prob.eval_f(&lambda)?;
    let mut best = (lambda.max_abs_diff(&f), lambda.clone());
    for it in 1..=max_iter {
        let next = lambda.blend(&f, omega);
        let step = next.max_abs_diff(&lambda);
        lambda = next;
        f = prob.eval_f(&lambda)?;
        let residual = lambda.max_abs_diff(&f);
        if residual < best.0 {
            best = (residual, lambda.clone());
        }
        if step < tol && residual < 5.0 * tol {
            return Ok(DampedResult {
                cdm: lambda,
                iterations: it,
                converged: true,
                residual,
            });
        }
    }
    warn!(
        "damped iteration did not converge in {max_iter} iterations; best residual {:.3e}",
        best.0
    );
    Ok(DampedResult {
        cdm: best.1,
        iterations: max_iter,
        converged: false,
        residual: best.0,
    })
}

/// Damped iteration from every vertex of the CDM polytope and from the
/// barycenter; converged results closer than `10·tol` are merged.
pub fn multi_start(
    prob: &MeanFieldProblem,
    omega: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<DampedResult>> {
    let k = prob.aggregate.k;
    let l = prob.scenario.destinations.len();
    let mut starts = vec![Cdm::barycenter(k, l)];
    let total = l.pow(k as u32);
    for code in 0..total {
        let choice: Vec<usize> = (0..k).map(|s| (code / l.pow(s as u32)) % l).collect();
        starts.push(Cdm::vertex(l, &choice));
    }
    let mut found: Vec<DampedResult> = Vec::new();
    for start in &starts {
        let res = damped_iteration(prob, start, omega, tol, max_iter)?;
        if !res.converged {
            continue;
        }
        if found
            .iter()
            .all(|f| f.cdm.max_abs_diff(&res.cdm) > 10.0 * tol)
        {
            found.push(res);
        }
    }
    found.sort_by(|a, b| {
        a.cdm
            .entries()
            .partial_cmp(&b.cdm.entries())
            .expect("finite entries")
    });
    Ok(found)
}

/// `sup_t |Σ_s α_s E[x_s(t)] - x̄^Λ(t)| / (1 + sup_t |x̄^Λ|)` where the class
/// means come from the propagated laws under the best responses to `x̄^Λ`.
pub fn consistency_residual(prob: &MeanFieldProblem, lambda: &Cdm) -> Result<f64> {
    let eval = prob.eval_f_detailed(lambda, &[])?;
    let weights = &prob.scenario.population.weights;
    let mut worst = 0.0f64;
    for (i, target) in eval.path.xbar.iter().enumerate() {
        let mut mean = target * 0.0;
        for (s, w) in weights.iter().enumerate() {
            mean += &eval.class_means[s][i] * *w;
        }
        worst = worst.max((mean - target).amax());
    }
    Ok(worst / (1.0 + eval.path.sup_norm()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundednessRow {
    pub m: f64,
    /// `(∫‖x̄^Λ‖²dt)^½` for the barycenter followed by each vertex.
    pub norms: Vec<f64>,
    pub max_norm: f64,
}

/// L² norms of the candidate mean paths as the terminal weight `M = m·I`
/// varies.
pub fn boundedness_sweep(scenario: &Scenario, m_values: &[f64]) -> Result<Vec<BoundednessRow>> {
    let l = scenario.destinations.len();
    let k = scenario.population.k();
    m_values
        .iter()
        .map(|&m| {
            let s = scenario.map_classes(|p| {
                let n = p.m.nrows();
                p.m = nalgebra::DMatrix::identity(n, n) * m;
            })?;
            let prob = MeanFieldProblem::new(s)?;
            let mut lambdas = vec![Cdm::barycenter(k, l)];
            for code in 0..l.pow(k as u32) {
                let choice: Vec<usize> = (0..k).map(|s| (code / l.pow(s as u32)) % l).collect();
                lambdas.push(Cdm::vertex(l, &choice));
            }
            let norms = lambdas
                .iter()
                .map(|lam| Ok(prob.mean_path(lam)?.l2_norm()))
                .collect::<Result<Vec<f64>>>()?;
            let max_norm = norms.iter().copied().fold(0.0, f64::max);
            Ok(BoundednessRow { m, norms, max_norm })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::reference_binary_with;
    use crate::model::{AgentClassParams, DestinationSet, InitialDistribution, TimeGrid};
    use approx::assert_relative_eq;

    fn symmetric(n_steps: usize) -> Scenario {
        Scenario::new(
            vec![AgentClassParams::scalar(0.0, 0.2, 1.5, 1.0, 5.0, 500.0)],
            vec![1.0],
            DestinationSet::scalar(&[-10.0, 10.0], 500.0).unwrap(),
            InitialDistribution::scalar_gaussian(0.0, 1.0),
            TimeGrid::new(2.0, n_steps).unwrap(),
        )
        .unwrap()
    }

    fn coarse(prob_q: f64) -> MeanFieldProblem {
        let mut cfg = super::super::MeanFieldConfig::default();
        cfg.fp.n_nodes = 301;
        MeanFieldProblem::with_config(reference_binary_with(prob_q, 1.5, 500.0, 400), cfg).unwrap()
    }

    #[test]
    fn symmetric_scenario_has_one_half_as_fixed_point() {
        let mut cfg = super::super::MeanFieldConfig::default();
        cfg.fp.n_nodes = 401;
        let prob = MeanFieldProblem::with_config(symmetric(400), cfg).unwrap();
        let g = prob.eval_g(0.5).unwrap();
        assert_relative_eq!(g, 0.5, epsilon = 1e-6);
        let res = bisection_fixed_point(&prob, 1e-3, 25).unwrap();
        assert!((res.r - 0.5).abs() < 1e-3, "{}", res.r);
        let roots = find_all_fixed_points(&prob, 11, 1e-3).unwrap();
        assert!(roots.iter().any(|r| (r.r - 0.5).abs() < 2e-3));
        assert!(consistency_residual(&prob, &Cdm::binary(0.5).unwrap()).unwrap() < 0.02);
    }

    #[test]
    fn bisection_trace_and_residual() {
        let prob = coarse(0.1);
        let res = bisection_fixed_point(&prob, 1e-3, 25).unwrap();
        assert_eq!(res.trace.len(), res.iterations);
        assert_eq!(res.iterations, 10);
        assert!(res.residual() < 2e-3 + 1e-9, "{res:?}");
        assert!((res.r - 0.39).abs() < 0.05, "{}", res.r);
    }

    #[test]
    fn damped_iteration_agrees_with_bisection() {
        let prob = coarse(0.1);
        let bis = bisection_fixed_point(&prob, 1e-3, 25).unwrap();
        let damped = damped_iteration(&prob, &Cdm::barycenter(1, 2), 0.5, 1e-4, 200).unwrap();
        assert!(damped.converged);
        assert!((damped.cdm.matrix()[(0, 0)] - bis.r).abs() < 2e-3);
        // restarting at the fixed point stays there
        let again = damped_iteration(&prob, &damped.cdm, 0.5, 1e-4, 1).unwrap();
        assert!(again.cdm.max_abs_diff(&damped.cdm) < 1e-4);
    }

    #[test]
    fn multi_start_finds_the_unique_equilibrium() {
        let prob = coarse(0.1);
        let found = multi_start(&prob, 0.5, 1e-4, 200).unwrap();
        assert_eq!(found.len(), 1);
    }

    #[test]
    fn single_destination_has_the_all_ones_fixed_point() {
        let s = Scenario::new(
            vec![AgentClassParams::scalar(0.1, 0.2, 1.5, 0.1, 5.0, 500.0)],
            vec![1.0],
            DestinationSet::scalar(&[3.0], 500.0).unwrap(),
            InitialDistribution::scalar_gaussian(0.3, 1.0),
            TimeGrid::new(2.0, 200).unwrap(),
        )
        .unwrap();
        let prob = MeanFieldProblem::new(s).unwrap();
        let res = damped_iteration(&prob, &Cdm::barycenter(1, 1), 0.5, 1e-4, 5).unwrap();
        assert!(res.converged);
        assert_eq!(res.cdm.entries(), vec![1.0]);
    }

    #[test]
    fn consistency_is_worse_away_from_the_fixed_point() {
        let prob = coarse(0.1);
        let at = consistency_residual(&prob, &Cdm::binary(0.39).unwrap()).unwrap();
        let away = consistency_residual(&prob, &Cdm::binary(0.9).unwrap()).unwrap();
        assert!(at < 0.05, "{at}");
        assert!(away > at, "{away} vs {at}");
    }

    #[test]
    fn boundedness_sweep_is_uniform_in_m() {
        let s = reference_binary_with(0.1, 1.5, 500.0, 400);
        let rows = boundedness_sweep(&s, &[50.0, 500.0, 5000.0]).unwrap();
        let maxes: Vec<f64> = rows.iter().map(|r| r.max_norm).collect();
        let hi = maxes.iter().copied().fold(0.0, f64::max);
        let lo = maxes.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(hi < 2.0 * lo, "{maxes:?}");
        assert_eq!(rows, boundedness_sweep(&s, &[50.0, 500.0, 5000.0]).unwrap());
        // symmetric config at the barycenter: path stays at the midpoint
        let sym = boundedness_sweep(&symmetric(200), &[500.0]).unwrap();
        assert!(sym[0].norms[0] < 1e-12);
    }
}
