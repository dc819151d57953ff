//! Monte Carlo checks: Euler–Maruyama populations under the equilibrium
//! feedback, empirical CDMs, cell probabilities, ε-Nash gaps and terminal
//! proximity.
//!
//! Agent `i` draws its initial state and every Brownian increment from its
//! own ChaCha8 stream `(seed, i)`, consumed in a fixed order. Agents are
//! processed in fixed-size chunks whose partial sums are combined in chunk
//! order, so results are bit-identical for any thread count.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lqg::{LqgBase, LqgTracker};
use crate::meanfield::{
    bisection_fixed_point, multi_start, Cdm, MeanFieldConfig, MeanFieldProblem,
};
use crate::minlqg::{CellProbability, MinLqgPolicy};
use crate::model::{half_quad, ClassModel, InitialDistribution, Scenario, TimeGrid};
use crate::numeric::par_map_range;

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimulationConfig {
    pub n_agents: usize,
    pub seed: u64,
    /// Euler–Maruyama steps per grid interval.
    pub substeps: usize,
    /// Number of agents whose full paths are stored.
    pub keep_paths: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_agents: 10_000,
            seed: 7,
            substeps: 1,
            keep_paths: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampledPath {
    pub agent: usize,
    pub class: usize,
    /// State at every grid node.
    pub states: Vec<DVector<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryEnsemble {
    pub time: TimeGrid,
    pub n_cells: usize,
    pub class_of: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub terminal: Vec<DVector<f64>>,
    pub terminal_cells: Vec<usize>,
    /// Empirical mean of each class at every grid node.
    pub class_means: Vec<Vec<DVector<f64>>>,
    /// Empirical mean of all agents at every grid node.
    pub mean: Vec<DVector<f64>>,
    pub sampled: Vec<SampledPath>,
}

impl TrajectoryEnsemble {
    pub fn n_agents(&self) -> usize {
        self.class_of.len()
    }

    /// `sup_t |m(t) - x̄(t)| / (1 + sup_t |x̄(t)|)` against a target path on
    /// the same grid.
    pub fn mean_deviation(&self, target: &[DVector<f64>]) -> f64 {
        let scale = 1.0 + target.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let worst = self
            .mean
            .iter()
            .zip(target)
            .map(|(m, x)| (m - x).amax())
            .fold(0.0, f64::max);
        worst / scale
    }
}

/// Splits `n` agents over classes in proportion to `weights`, rounding by
/// largest remainder (ties to the lower class index).
pub fn allocate_agents(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite weights").then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &s in order.iter().take(n - assigned) {
        counts[s] += 1;
    }
    counts
}

fn agent_rng(seed: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64);
    rng
}

/// Feedback laws that can drive the simulator.
#[derive(Clone, Copy)]
enum Feedback<'a> {
    MinLqg(&'a MinLqgPolicy),
    Lqg(&'a LqgTracker, usize),
}

impl Feedback<'_> {
    fn class(&self) -> &ClassModel {
        match self {
            Feedback::MinLqg(p) => p.tracker().class(),
            Feedback::Lqg(t, _) => t.class(),
        }
    }

    fn grid(&self) -> &TimeGrid {
        match self {
            Feedback::MinLqg(p) => p.grid(),
            Feedback::Lqg(t, _) => t.grid(),
        }
    }

    /// Control at time `t`; `node` is set when `t` is exactly grid node.
    fn control(&self, node: Option<usize>, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        match (self, node) {
            (Feedback::MinLqg(p), Some(i)) if p.is_scalar() => {
                Ok(DVector::from_element(1, p.control_scalar_at_node(i, x[0])))
            }
            (Feedback::MinLqg(p), _) => p.control(t, x),
            (Feedback::Lqg(tr, j), _) => Ok(tr.lqg_control(*j, t, x)),
        }
    }
}

/// Observer of one simulated path.
trait PathVisitor {
    fn node(&mut self, _i: usize, _x: &DVector<f64>) {}
    fn step(&mut self, _i: usize, _x: &DVector<f64>, _u: &DVector<f64>, _h: f64) {}
}

struct NoVisit;
impl PathVisitor for NoVisit {}

/// Euler–Maruyama from grid node `start` to `T`. The initial state is
/// supplied by `x0`, which may draw from the same stream first.
fn run_path(
    fb: Feedback,
    start: usize,
    x0: DVector<f64>,
    rng: &mut ChaCha8Rng,
    substeps: usize,
    agent: usize,
    visit: &mut impl PathVisitor,
) -> Result<DVector<f64>> {
    let grid = *fb.grid();
    let params = &fb.class().params;
    let d = params.sigma.ncols();
    let h = grid.dt() / substeps as f64;
    let sqrt_h = h.sqrt();
    let mut x = x0;
    for i in start..grid.n_steps() {
        visit.node(i, &x);
        for k in 0..substeps {
            let t = grid.time(i) + k as f64 * h;
            let u = fb.control((k == 0).then_some(i), t, &x)?;
            visit.step(i, &x, &u, h);
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            x = &x + (&params.a * &x + &params.b * &u) * h + &params.sigma * z * sqrt_h;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { agent, step: i });
            }
        }
    }
    visit.node(grid.n_steps(), &x);
    Ok(x)
}

struct Recorder<'a> {
    sums: &'a mut [f64],
    n: usize,
    path: Option<Vec<DVector<f64>>>,
}

impl PathVisitor for Recorder<'_> {
    fn node(&mut self, i: usize, x: &DVector<f64>) {
        for (c, v) in x.iter().enumerate() {
            self.sums[i * self.n + c] += v;
        }
        if let Some(p) = self.path.as_mut() {
            p.push(x.clone());
        }
    }
}

struct ChunkOut {
    /// Per-class node sums, flattened `[class][node][component]`.
    sums: Vec<f64>,
    terminal: Vec<DVector<f64>>,
    sampled: Vec<SampledPath>,
}

/// Simulates agents with the given classes, each class driven by its own
/// policy.
fn simulate_agents(
    policies: &[MinLqgPolicy],
    class_of: &[usize],
    initial: &InitialDistribution,
    cfg: &SimulationConfig,
) -> Result<TrajectoryEnsemble> {
    let first = policies
        .first()
        .ok_or_else(|| Error::InvalidArgument("no policies".into()))?;
    let grid = *first.grid();
    let dest = first.destinations().clone();
    let n = dest.dim();
    let k = policies.len();
    let nodes = grid.n_steps() + 1;
    let n_agents = class_of.len();
    let stride = nodes * n;
    let sample_every = if cfg.keep_paths == 0 {
        usize::MAX
    } else {
        (n_agents / cfg.keep_paths).max(1)
    };
    let substeps = cfg.substeps.max(1);
    let n_chunks = n_agents.div_ceil(CHUNK);
    let chunks = par_map_range(n_chunks, |c| -> Result<ChunkOut> {
        let mut out = ChunkOut {
            sums: vec![0.0; k * stride],
            terminal: Vec::with_capacity(CHUNK),
            sampled: Vec::new(),
        };
        for agent in c * CHUNK..((c + 1) * CHUNK).min(n_agents) {
            let s = class_of[agent];
            let mut rng = agent_rng(cfg.seed, agent);
            let x0 = initial.sample(&mut rng);
            let keep = agent % sample_every == 0 && agent / sample_every < cfg.keep_paths;
            let mut rec = Recorder {
                sums: &mut out.sums[s * stride..(s + 1) * stride],
                n,
                path: keep.then(|| Vec::with_capacity(nodes)),
            };
            let xt = run_path(
                Feedback::MinLqg(&policies[s]),
                0,
                x0,
                &mut rng,
                substeps,
                agent,
                &mut rec,
            )?;
            if let Some(states) = rec.path {
                out.sampled.push(SampledPath {
                    agent,
                    class: s,
                    states,
                });
            }
            out.terminal.push(xt);
        }
        Ok(out)
    });
    let mut sums = vec![0.0; k * stride];
    let mut terminal = Vec::with_capacity(n_agents);
    let mut sampled = Vec::new();
    for chunk in chunks {
        let chunk = chunk?;
        for (a, b) in sums.iter_mut().zip(&chunk.sums) {
            *a += b;
        }
        terminal.extend(chunk.terminal);
        sampled.extend(chunk.sampled);
    }
    let mut class_counts = vec![0; k];
    for &s in class_of {
        class_counts[s] += 1;
    }
    let class_means: Vec<Vec<DVector<f64>>> = (0..k)
        .map(|s| {
            let c = class_counts[s].max(1) as f64;
            (0..nodes)
                .map(|i| DVector::from_fn(n, |r, _| sums[s * stride + i * n + r] / c))
                .collect()
        })
        .collect();
    let mean = (0..nodes)
        .map(|i| {
            let mut tot = DVector::zeros(n);
            for s in 0..k {
                for r in 0..n {
                    tot[r] += sums[s * stride + i * n + r];
                }
            }
            tot / n_agents.max(1) as f64
        })
        .collect();
    let terminal_cells = terminal.iter().map(|x| dest.nearest(x)).collect();
    Ok(TrajectoryEnsemble {
        time: grid,
        n_cells: dest.len(),
        class_of: class_of.to_vec(),
        class_counts,
        terminal,
        terminal_cells,
        class_means,
        mean,
        sampled,
    })
}

/// Simulates `n` agents of a single class under `policy`.
pub fn simulate_class(
    policy: &MinLqgPolicy,
    initial: &InitialDistribution,
    n: usize,
    seed: u64,
    substeps: usize,
) -> Result<TrajectoryEnsemble> {
    let cfg = SimulationConfig {
        n_agents: n,
        seed,
        substeps,
        keep_paths: 0,
    };
    simulate_agents(std::slice::from_ref(policy), &vec![0; n], initial, &cfg)
}

fn class_assignment(n: usize, weights: &[f64]) -> Vec<usize> {
    allocate_agents(n, weights)
        .iter()
        .enumerate()
        .flat_map(|(s, &c)| std::iter::repeat_n(s, c))
        .collect()
}

/// Simulates the population when every class best-responds to `x̄^Λ`.
pub fn simulate_population(
    prob: &MeanFieldProblem,
    lambda: &Cdm,
    cfg: &SimulationConfig,
) -> Result<TrajectoryEnsemble> {
    let path = prob.mean_path(lambda)?;
    let policies = prob.policies(&path)?;
    let class_of = class_assignment(cfg.n_agents, &prob.scenario.population.weights);
    simulate_agents(&policies, &class_of, &prob.scenario.initial, cfg)
}

/// Per-class terminal cell frequencies.
pub fn empirical_cdm(ens: &TrajectoryEnsemble) -> Result<Cdm> {
    let k = ens.class_counts.len();
    let mut m = DMatrix::zeros(k, ens.n_cells);
    for (s, &count) in ens.class_counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(s));
        }
    }
    for (&s, &j) in ens.class_of.iter().zip(&ens.terminal_cells) {
        m[(s, j)] += 1.0;
    }
    for (s, mut row) in m.row_iter_mut().enumerate() {
        row /= ens.class_counts[s] as f64;
    }
    Cdm::normalized(m)
}

/// Frequency with which the pure `u^(j)` closed loop started at `(t, x)` ends
/// in cell `j`. The first step runs from `t` to the next grid node.
pub fn mc_cell_probability(
    policy: &MinLqgPolicy,
    j: usize,
    t: f64,
    x: &DVector<f64>,
    n_paths: usize,
    seed: u64,
) -> Result<CellProbability> {
    let tracker = policy.tracker();
    let grid = *tracker.grid();
    let dest = policy.destinations();
    let fb = Feedback::Lqg(tracker, j);
    let params = &tracker.class().params;
    let start = ((t / grid.dt()) - 1e-9).ceil().max(0.0) as usize;
    let lead = grid.time(start.min(grid.n_steps())) - t;
    let hits: usize = par_map_range(n_paths.div_ceil(CHUNK), |c| -> Result<usize> {
        let mut hits = 0;
        for path in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
            let mut rng = agent_rng(seed, path);
            let mut x0 = x.clone();
            if lead > 1e-12 {
                let u = fb.control(None, t, &x0)?;
                let z =
                    DVector::from_fn(params.sigma.ncols(), |_, _| StandardNormal.sample(&mut rng));
                x0 = &x0
                    + (&params.a * &x0 + &params.b * &u) * lead
                    + &params.sigma * z * lead.sqrt();
            }
            let xt = if start >= grid.n_steps() {
                x0
            } else {
                run_path(fb, start, x0, &mut rng, 1, path, &mut NoVisit)?
            };
            hits += usize::from(dest.nearest(&xt) == j);
        }
        Ok(hits)
    })
    .into_iter()
    .sum::<Result<usize>>()?;
    let p = hits as f64 / n_paths.max(1) as f64;
    Ok(CellProbability {
        value: p,
        std_error: (p * (1.0 - p) / n_paths.max(1) as f64).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NashConfig {
    /// Agent paths simulated per population size; the number of
    /// replications is `max(min_replications, agent_paths / N)`.
    pub agent_paths: usize,
    pub min_replications: usize,
    /// Probe agents per population size, spread over the replications.
    pub probe_budget: usize,
    pub seed: u64,
}

impl Default for NashConfig {
    fn default() -> Self {
        Self {
            agent_paths: 20_000,
            min_replications: 32,
            probe_budget: 4096,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NashRow {
    pub n: usize,
    pub replications: usize,
    pub probes: usize,
    /// Mean cost under the equilibrium feedback.
    pub cost_equilibrium: f64,
    /// Mean cost under the best response to the estimated mean path.
    pub cost_deviation: f64,
    pub epsilon: f64,
    pub std_error: f64,
}

/// Accumulates the running cost along a path against a tracked mean that
/// is shifted by `(x - x_ref)/N` when the probe deviates.
struct CostMeter<'a> {
    q: &'a DMatrix<f64>,
    r: &'a DMatrix<f64>,
    xbar: &'a [DVector<f64>],
    reference: Option<&'a [DVector<f64>]>,
    inv_n: f64,
    states: Vec<DVector<f64>>,
    cost: f64,
}

impl PathVisitor for CostMeter<'_> {
    fn node(&mut self, _i: usize, x: &DVector<f64>) {
        if self.reference.is_none() {
            self.states.push(x.clone());
        }
    }

    fn step(&mut self, i: usize, x: &DVector<f64>, u: &DVector<f64>, h: f64) {
        let mut xbar = self.xbar[i].clone();
        if let Some(reference) = self.reference {
            xbar += (x - &reference[i]) * self.inv_n;
        }
        self.cost += (half_quad(&(x - xbar), self.q) + half_quad(u, self.r)) * h;
    }
}

/// Empirical ε-Nash gaps.
///
/// For each `N`, replications of the `N`-agent game under the equilibrium
/// feedback estimate the mean path of the other `N - 1` agents. A probe
/// agent then best-responds to that deterministic path; since its own state
/// enters `x̄ = (x_i + Σ_{k≠i} x_k)/N`, the deviation problem tracks the
/// others' mean with `Q((N-1)/N)²`. Costs of both feedbacks are averaged
/// with common random numbers and `ε̂_N` is their difference.
pub fn estimate_epsilon_nash(
    prob: &MeanFieldProblem,
    lambda: &Cdm,
    cfg: &NashConfig,
    n_values: &[usize],
) -> Result<Vec<NashRow>> {
    let path = prob.mean_path(lambda)?;
    let policies = prob.policies(&path)?;
    let grid = *prob.grid();
    let nodes = grid.n_steps() + 1;
    let weights = &prob.scenario.population.weights;
    let dest = &prob.scenario.destinations;
    let mut rows = Vec::with_capacity(n_values.len());
    for &n_agents in n_values {
        if n_agents < 2 {
            return Err(Error::InvalidArgument(
                "ε-Nash estimation needs at least two agents; a single agent would track itself"
                    .into(),
            ));
        }
        let reps = cfg.min_replications.max(cfg.agent_paths.div_ceil(n_agents));
        if reps < 8 {
            warn!("only {reps} replications for N = {n_agents}; standard errors are unreliable");
        }
        let class_of = class_assignment(n_agents, weights);
        let rep_seed = |r: usize| {
            cfg.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(r as u64)
        };
        let sim = |r: usize| {
            let sc = SimulationConfig {
                n_agents,
                seed: rep_seed(r),
                substeps: 1,
                keep_paths: 0,
            };
            simulate_agents(&policies, &class_of, &prob.scenario.initial, &sc)
        };

        // Pass 1: expected population and class means.
        let mut means = Vec::with_capacity(reps);
        let mut pop_mean = vec![DVector::zeros(dest.dim()); nodes];
        let mut class_mean = vec![vec![DVector::zeros(dest.dim()); nodes]; weights.len()];
        for r in 0..reps {
            let ens = sim(r)?;
            for i in 0..nodes {
                pop_mean[i] += &ens.mean[i] / reps as f64;
                for (s, cm) in class_mean.iter_mut().enumerate() {
                    cm[i] += &ens.class_means[s][i] / reps as f64;
                }
            }
            means.push(ens.mean);
        }

        // Best responses to the others' mean with the effective weight.
        let nf = n_agents as f64;
        let shrink = ((nf - 1.0) / nf).powi(2);
        let deviations = (0..weights.len())
            .map(|s| {
                let others: Vec<DVector<f64>> = (0..nodes)
                    .map(|i| (&pop_mean[i] * nf - &class_mean[s][i]) / (nf - 1.0))
                    .collect();
                let mut params = prob.scenario.population.classes[s].params.clone();
                params.q *= shrink;
                let base = LqgBase::new(ClassModel::new(params)?, &grid)?;
                MinLqgPolicy::with_sampling(base, dest.clone(), others, prob.config.cell_sampling)
            })
            .collect::<Result<Vec<_>>>()?;

        // Pass 2: probe costs with common random numbers.
        let per_rep = n_agents.min(cfg.probe_budget.div_ceil(reps)).max(1);
        let diffs = par_map_range(reps, |r| -> Result<(f64, f64, f64)> {
            let (mut eq, mut dev) = (0.0, 0.0);
            for q in 0..per_rep {
                let agent = q * n_agents / per_rep;
                let s = class_of[agent];
                let class = &prob.scenario.population.classes[s].params;
                let run = |fb: Feedback,
                           reference: Option<&[DVector<f64>]>|
                 -> Result<(f64, Vec<DVector<f64>>)> {
                    let mut rng = agent_rng(rep_seed(r), agent);
                    let x0 = prob.scenario.initial.sample(&mut rng);
                    let mut meter = CostMeter {
                        q: &class.q,
                        r: &class.r,
                        xbar: &means[r],
                        reference,
                        inv_n: 1.0 / nf,
                        states: Vec::new(),
                        cost: 0.0,
                    };
                    let xt = run_path(fb, 0, x0, &mut rng, 1, agent, &mut meter)?;
                    Ok((meter.cost + dest.terminal_cost(&xt), meter.states))
                };
                let (j_eq, states) = run(Feedback::MinLqg(&policies[s]), None)?;
                let (j_dev, _) = run(Feedback::MinLqg(&deviations[s]), Some(&states))?;
                eq += j_eq;
                dev += j_dev;
            }
            let p = per_rep as f64;
            Ok((eq / p, dev / p, (eq - dev) / p))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let rf = reps as f64;
        let eps = diffs.iter().map(|d| d.2).sum::<f64>() / rf;
        let var = diffs.iter().map(|d| (d.2 - eps).powi(2)).sum::<f64>() / (rf - 1.0).max(1.0);
        rows.push(NashRow {
            n: n_agents,
            replications: reps,
            probes: per_rep * reps,
            cost_equilibrium: diffs.iter().map(|d| d.0).sum::<f64>() / rf,
            cost_deviation: diffs.iter().map(|d| d.1).sum::<f64>() / rf,
            epsilon: eps,
            std_error: (var / rf).sqrt(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProximityRow {
    pub m: f64,
    /// Equilibrium CDM entries (row-major) for this `M`.
    pub fixed_point: Vec<f64>,
    /// Fraction of agents farther than `ε` from every destination at `T`.
    pub probability: f64,
    pub std_error: f64,
    /// `probability / (log M / M)`.
    pub rate_ratio: f64,
}

/// Probability of ending far from every destination as the terminal weight
/// `M = m·I` grows, each `M` at its own equilibrium.
pub fn terminal_proximity_curve(
    scenario: &Scenario,
    m_values: &[f64],
    epsilon: f64,
    mf: MeanFieldConfig,
    sim: &SimulationConfig,
    tol: f64,
) -> Result<Vec<ProximityRow>> {
    m_values
        .iter()
        .map(|&m| {
            let s = scenario.map_classes(|p| {
                let n = p.m.nrows();
                p.m = DMatrix::identity(n, n) * m;
            })?;
            let prob = MeanFieldProblem::with_config(s, mf)?;
            let lambda = if prob.scenario.is_scalar_binary() {
                Cdm::binary(bisection_fixed_point(&prob, tol, 25)?.r)?
            } else {
                multi_start(&prob, 0.5, tol, 200)?
                    .into_iter()
                    .next()
                    .map(|d| d.cdm)
                    .unwrap_or_else(|| {
                        Cdm::barycenter(prob.aggregate.k, prob.scenario.destinations.len())
                    })
            };
            let ens = simulate_population(&prob, &lambda, sim)?;
            let far = ens
                .terminal
                .iter()
                .filter(|x| {
                    prob.scenario
                        .destinations
                        .points()
                        .iter()
                        .all(|p| (*x - p).norm() > epsilon)
                })
                .count();
            let n = ens.n_agents() as f64;
            let p = far as f64 / n;
            Ok(ProximityRow {
                m,
                fixed_point: lambda.entries(),
                probability: p,
                std_error: (p * (1.0 - p) / n).sqrt(),
                rate_ratio: p / (m.ln() / m),
            })
        })
        .collect()
}
