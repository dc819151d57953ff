use std::collections::BTreeMap;
use std::fs;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use minlqg_core::config::{reference_binary_with, ScenarioConfig};
use minlqg_core::lqg::solve_riccati;
use minlqg_core::mc::{
    empirical_cdm, estimate_epsilon_nash, simulate_population, NashConfig, SimulationConfig,
};
use minlqg_core::meanfield::{
    bisection_fixed_point, consistency_residual, damped_iteration, find_all_fixed_points,
    multi_start, Cdm, MeanFieldConfig, MeanFieldProblem,
};
use minlqg_core::{Error, Scenario, TimeGrid};

use crate::output::{num, sha256_hex, Manifest, OutDir};
use crate::{Cli, Command, LambdaArgs, SweepParam};

pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numerical() => 2,
        _ => 1,
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate => "validate",
        Command::SolveRiccati => "solve-riccati",
        Command::EvalControl { .. } => "eval-control",
        Command::SolveFp { .. } => "solve-fp",
        Command::FindFixedPoint { .. } => "find-fixed-point",
        Command::Sweep { .. } => "sweep",
        Command::Simulate { .. } => "simulate",
        Command::CheckNash { .. } => "check-nash",
        Command::ReproduceFigure { .. } => "reproduce-figure",
    }
}

struct Loaded {
    scenario: Scenario,
    digest: String,
}

fn read_config(cli: &Cli) -> Result<(ScenarioConfig, String)> {
    let name = command_name(&cli.command);
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("`{name}` needs a scenario file: pass --config PATH"))?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let cfg = ScenarioConfig::from_json(&text)?;
    Ok((cfg, sha256_hex(text.as_bytes())))
}

fn load(cli: &Cli) -> Result<Loaded> {
    let (cfg, digest) = read_config(cli)?;
    let scenario = override_grid(cfg.build()?, cli)?;
    Ok(Loaded { scenario, digest })
}

fn override_grid(scenario: Scenario, cli: &Cli) -> Result<Scenario> {
    Ok(match cli.n_steps {
        Some(n) => scenario.with_grid(TimeGrid::new(scenario.grid.horizon(), n)?),
        None => scenario,
    })
}

fn mf_config(cli: &Cli) -> MeanFieldConfig {
    let mut cfg = MeanFieldConfig {
        seed: cli.seed,
        ..MeanFieldConfig::default()
    };
    cfg.fp.n_nodes = cli.fp_nodes;
    cfg.ensemble_paths = cli.paths;
    cfg.cell_sampling.samples = cli.cell_samples;
    cfg
}

fn manifest(cli: &Cli, digest: Option<String>) -> Manifest {
    let mut parameters = BTreeMap::new();
    parameters.insert(
        "args".to_string(),
        serde_json::to_value(&cli.command).unwrap_or(Value::Null),
    );
    parameters.insert("tol".to_string(), json!(cli.tol));
    parameters.insert("n_steps".to_string(), json!(cli.n_steps));
    parameters.insert("fp_nodes".to_string(), json!(cli.fp_nodes));
    parameters.insert("paths".to_string(), json!(cli.paths));
    parameters.insert("cell_samples".to_string(), json!(cli.cell_samples));
    Manifest {
        tool: "minlqg",
        version: env!("CARGO_PKG_VERSION"),
        command: command_name(&cli.command).to_string(),
        config_sha256: digest,
        seed: cli.seed,
        parameters,
        outputs: Vec::new(),
    }
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("{what}: cannot parse {v:?} as a number"))
        })
        .collect()
}

fn parse_lambda(text: &str) -> Result<Cdm> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| parse_list(r, "--lambda"))
        .collect::<Result<_>>()?;
    let l = rows[0].len();
    if rows.iter().any(|r| r.len() != l) {
        bail!("--lambda: rows have different lengths");
    }
    let flat: Vec<f64> = rows.concat();
    Ok(Cdm::new(DMatrix::from_row_slice(rows.len(), l, &flat))?)
}

/// An equilibrium CDM: bisection for scalar binary scenarios, damped
/// multi-start otherwise.
fn equilibrium(prob: &MeanFieldProblem, cli: &Cli) -> Result<Cdm> {
    if prob.scenario.is_scalar_binary() {
        return Ok(Cdm::binary(bisection_fixed_point(prob, cli.tol, 25)?.r)?);
    }
    let k = prob.aggregate.k;
    let l = prob.scenario.destinations.len();
    match multi_start(prob, 0.5, cli.tol, 200)?.into_iter().next() {
        Some(res) => Ok(res.cdm),
        None => Ok(damped_iteration(prob, &Cdm::barycenter(k, l), 0.5, cli.tol, 200)?.cdm),
    }
}

fn resolve_lambda(prob: &MeanFieldProblem, args: &LambdaArgs, cli: &Cli) -> Result<Cdm> {
    let lambda = match (args.r, &args.lambda) {
        (Some(_), Some(_)) => bail!("give either --r or --lambda, not both"),
        (Some(r), None) => {
            prob.scenario.require_scalar_binary()?;
            Cdm::binary(r)?
        }
        (None, Some(text)) => parse_lambda(text)?,
        (None, None) => {
            let lam = equilibrium(prob, cli)?;
            println!("using the computed equilibrium {:?}", lam.entries());
            lam
        }
    };
    prob.mean_path(&lambda)?;
    Ok(lambda)
}

fn lambda_rows(lambda: &Cdm) -> Vec<Vec<String>> {
    let m = lambda.matrix();
    (0..m.nrows())
        .flat_map(|s| {
            (0..m.ncols()).map(move |j| vec![s.to_string(), j.to_string(), num(m[(s, j)])])
        })
        .collect()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate => validate(cli),
        Command::SolveRiccati => solve_riccati_cmd(cli),
        Command::EvalControl {
            lambda,
            times,
            x,
            x_min,
            x_max,
            x_points,
            class,
        } => eval_control(
            cli,
            lambda,
            times,
            x.as_deref(),
            (*x_min, *x_max, *x_points),
            *class,
        ),
        Command::SolveFp { lambda, snapshots } => solve_fp(cli, lambda, snapshots),
        Command::FindFixedPoint {
            all,
            omega,
            max_iter,
        } => find_fixed_point(cli, *all, *omega, *max_iter),
        Command::Sweep {
            param,
            from,
            to,
            steps,
        } => sweep(cli, *param, *from, *to, *steps),
        Command::Simulate {
            lambda,
            agents,
            keep,
            substeps,
        } => simulate(cli, lambda, *agents, *keep, *substeps),
        Command::CheckNash {
            lambda,
            n,
            agent_paths,
            probes,
        } => check_nash(cli, lambda, n, *agent_paths, *probes),
        Command::ReproduceFigure {
            fig,
            from,
            to,
            steps,
        } => reproduce_figure(cli, *fig, *from, *to, *steps),
    }
}

fn validate(cli: &Cli) -> Result<()> {
    let (cfg, _) = read_config(cli)?;
    let scenario = cfg.build()?;
    let etas: Vec<String> = scenario
        .population
        .classes
        .iter()
        .map(|c| format!("{:.6e}", c.eta))
        .collect();
    println!(
        "valid: {} class(es), state dimension {}, {} destination(s), horizon {}, {} steps, eta = [{}]",
        scenario.population.k(),
        scenario.population.n(),
        scenario.destinations.len(),
        scenario.grid.horizon(),
        scenario.grid.n_steps(),
        etas.join(", ")
    );
    Ok(())
}

fn solve_riccati_cmd(cli: &Cli) -> Result<()> {
    let loaded = load(cli)?;
    let s = &loaded.scenario;
    let n = s.population.n();
    let mut header = vec!["t [time]".to_string(), "class".to_string()];
    for i in 0..n {
        for j in 0..n {
            header.push(format!("pi_{i}_{j} [cost/state^2]"));
        }
    }
    let mut rows = Vec::new();
    for (c, class) in s.population.classes.iter().enumerate() {
        let ric = solve_riccati(class, &s.grid)?;
        for i in 0..=s.grid.n_steps() {
            let mut row = vec![num(s.grid.time(i)), c.to_string()];
            let p = ric.node(i);
            row.extend((0..n).flat_map(|a| (0..n).map(move |b| num(p[(a, b)]))));
            rows.push(row);
        }
    }
    let mut out = OutDir::create(&cli.out)?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("riccati.csv", &header, rows)?;
    out.finish(manifest(cli, Some(loaded.digest)))?;
    println!("wrote riccati.csv for {} class(es)", s.population.k());
    Ok(())
}

fn eval_control(
    cli: &Cli,
    lambda_args: &LambdaArgs,
    times: &[f64],
    x: Option<&str>,
    (x_min, x_max, x_points): (f64, f64, usize),
    class: usize,
) -> Result<()> {
    let loaded = load(cli)?;
    let prob = MeanFieldProblem::with_config(loaded.scenario, mf_config(cli))?;
    let horizon = prob.grid().horizon();
    if let Some(t) = times.iter().find(|t| !(0.0..=horizon).contains(*t)) {
        bail!("--times: {t} is outside [0, {horizon}]");
    }
    if class >= prob.aggregate.k {
        bail!(
            "--class {class} does not exist (scenario has {} classes)",
            prob.aggregate.k
        );
    }
    let lambda = resolve_lambda(&prob, lambda_args, cli)?;
    let path = prob.mean_path(&lambda)?;
    let policy = prob.policies(&path)?.swap_remove(class);
    let n = prob.aggregate.n;
    let l = prob.scenario.destinations.len();
    let states: Vec<DVector<f64>> = match x {
        Some(text) => {
            let v = parse_list(text, "--x")?;
            if v.len() != n {
                bail!("--x has {} components, the state has {n}", v.len());
            }
            vec![DVector::from_vec(v)]
        }
        None => {
            if n != 1 {
                bail!("state grids need a scalar state; pass a single state with --x");
            }
            let pts = x_points.max(2);
            (0..pts)
                .map(|i| {
                    DVector::from_element(1, x_min + (x_max - x_min) * i as f64 / (pts - 1) as f64)
                })
                .collect()
        }
    };
    let mut header = vec!["t [time]".to_string()];
    header.extend((0..n).map(|c| format!("x_{c} [state]")));
    header.push("value [cost]".into());
    header.extend(
        (0..prob.scenario.population.classes[class].m()).map(|c| format!("u_{c} [control]")),
    );
    header.extend((0..l).map(|j| format!("w_{j} [prob]")));
    header.extend((0..l).map(|j| format!("g_{j} [prob]")));
    header.extend((0..l).map(|j| format!("risk_adjusted_{j} [cost]")));
    let mut rows = Vec::new();
    for &t in times {
        for xs in &states {
            let mut row = vec![num(t)];
            row.extend(xs.iter().map(|v| num(*v)));
            row.push(num(policy.value(t, xs)?));
            row.extend(policy.control(t, xs)?.iter().map(|v| num(*v)));
            row.extend(policy.weights(t, xs)?.iter().map(|v| num(*v)));
            row.extend((0..l).map(|j| num(policy.cell_probability(j, t, xs).value)));
            row.extend((0..l).map(|j| num(policy.risk_adjusted_value(j, t, xs))));
            rows.push(row);
        }
    }
    let mut out = OutDir::create(&cli.out)?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let count = rows.len();
    out.csv("control.csv", &header, rows)?;
    out.csv(
        "lambda.csv",
        &["class", "cell", "lambda [prob]"],
        lambda_rows(&lambda),
    )?;
    out.finish(manifest(cli, Some(loaded.digest)))?;
    println!("wrote {count} evaluations to control.csv");
    Ok(())
}

fn solve_fp(cli: &Cli, lambda_args: &LambdaArgs, snapshots: &[f64]) -> Result<()> {
    let loaded = load(cli)?;
    let prob = MeanFieldProblem::with_config(loaded.scenario, mf_config(cli))?;
    if prob.aggregate.n != 1 {
        bail!("solve-fp needs a scalar state; use `simulate` for vector states");
    }
    if let Some(f) = snapshots.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        bail!("--snapshots are fractions of the horizon; {f} is outside [0, 1]");
    }
    let lambda = resolve_lambda(&prob, lambda_args, cli)?;
    let grid = *prob.grid();
    let nodes: Vec<usize> = snapshots
        .iter()
        .map(|f| (f * grid.n_steps() as f64).round() as usize)
        .collect();
    let eval = prob.eval_f_detailed(&lambda, &nodes)?;
    let k = prob.aggregate.k;
    let mut out = OutDir::create(&cli.out)?;
    let mut header = vec!["t [time]".to_string(), "x [state]".to_string()];
    header.extend((0..k).map(|s| format!("p_{s} [1/state]")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    for (idx, &node) in nodes.iter().enumerate() {
        let space = &eval.densities[0].space;
        let rows = (0..space.n).map(|c| {
            let mut row = vec![num(grid.time(node)), num(space.center(c))];
            for field in &eval.densities {
                let p = field.snapshot_at(node).expect("requested snapshot");
                row.push(num(p[c]));
            }
            row
        });
        out.csv(&format!("density_{idx}.csv"), &header, rows)?;
    }
    let mut mheader = vec!["t [time]".to_string(), "tracked_xbar [state]".to_string()];
    mheader.extend((0..k).map(|s| format!("fp_mean_{s} [state]")));
    let mheader: Vec<&str> = mheader.iter().map(String::as_str).collect();
    let mrows = (0..=grid.n_steps()).map(|i| {
        let mut row = vec![num(grid.time(i)), num(eval.path.xbar[i][0])];
        row.extend(eval.class_means.iter().map(|m| num(m[i][0])));
        row
    });
    out.csv("mean_path.csv", &mheader, mrows)?;
    let f = eval.cdm.matrix();
    let crows = lambda_rows(&lambda).into_iter().map(|mut row| {
        let (s, j): (usize, usize) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        row.push(num(f[(s, j)]));
        row
    });
    out.csv(
        "cdm.csv",
        &["class", "cell", "lambda [prob]", "f_lambda [prob]"],
        crows,
    )?;
    out.finish(manifest(cli, Some(loaded.digest)))?;
    println!("F(Λ) = {:?}", eval.cdm.entries());
    Ok(())
}

fn find_fixed_point(cli: &Cli, all: bool, omega: f64, max_iter: usize) -> Result<()> {
    let loaded = load(cli)?;
    let prob = MeanFieldProblem::with_config(loaded.scenario, mf_config(cli))?;
    let mut out = OutDir::create(&cli.out)?;
    if prob.scenario.is_scalar_binary() {
        let roots = if all {
            find_all_fixed_points(&prob, 41, cli.tol)?
        } else {
            vec![bisection_fixed_point(&prob, cli.tol, 25)?]
        };
        let mut rows = Vec::new();
        for root in &roots {
            let res = consistency_residual(&prob, &Cdm::binary(root.r)?)?;
            println!(
                "r* = {:.6}  G(r*) = {:.6}  consistency residual = {res:.3e}",
                root.r, root.g
            );
            rows.push(vec![
                num(root.r),
                num(root.g),
                num(root.residual()),
                num(res),
                root.iterations.to_string(),
            ]);
        }
        out.csv(
            "fixed_points.csv",
            &[
                "r_star [prob]",
                "g_r_star [prob]",
                "abs_g_minus_r [prob]",
                "consistency_residual [relative]",
                "iterations",
            ],
            rows,
        )?;
        if !all {
            let trace = roots[0]
                .trace
                .iter()
                .enumerate()
                .map(|(i, (r, h))| vec![(i + 1).to_string(), num(*r), num(*h)]);
            out.csv(
                "bisection_trace.csv",
                &["iteration", "r [prob]", "h [prob]"],
                trace,
            )?;
        }
    } else {
        let k = prob.aggregate.k;
        let l = prob.scenario.destinations.len();
        let results = if all {
            multi_start(&prob, omega, cli.tol, max_iter)?
        } else {
            vec![damped_iteration(
                &prob,
                &Cdm::barycenter(k, l),
                omega,
                cli.tol,
                max_iter,
            )?]
        };
        let mut summary = Vec::new();
        let mut entries = Vec::new();
        for (i, res) in results.iter().enumerate() {
            let cons = consistency_residual(&prob, &res.cdm)?;
            println!(
                "solution {i}: {:?} (converged: {}, residual {:.3e}, consistency {cons:.3e})",
                res.cdm.entries(),
                res.converged,
                res.residual
            );
            summary.push(vec![
                i.to_string(),
                res.converged.to_string(),
                res.iterations.to_string(),
                num(res.residual),
                num(cons),
            ]);
            for mut row in lambda_rows(&res.cdm) {
                row.insert(0, i.to_string());
                entries.push(row);
            }
        }
        out.csv(
            "fixed_points.csv",
            &[
                "solution",
                "converged",
                "iterations",
                "max_abs_f_minus_lambda [prob]",
                "consistency_residual [relative]",
            ],
            summary,
        )?;
        out.csv(
            "cdm.csv",
            &["solution", "class", "cell", "lambda [prob]"],
            entries,
        )?;
    }
    out.finish(manifest(cli, Some(loaded.digest)))?;
    Ok(())
}

fn apply_param(scenario: &Scenario, param: SweepParam, v: f64) -> Result<Scenario> {
    Ok(scenario.map_classes(|p| {
        let (n, m) = (p.a.nrows(), p.r.nrows());
        match param {
            SweepParam::Q => p.q = DMatrix::identity(n, n) * v,
            SweepParam::Sigma => p.sigma = DMatrix::identity(n, p.sigma.ncols()) * v,
            SweepParam::M => p.m = DMatrix::identity(n, n) * v,
            SweepParam::A => p.a = DMatrix::identity(n, n) * v,
            SweepParam::B => p.b = DMatrix::identity(n, m) * v,
            SweepParam::R => p.r = DMatrix::identity(m, m) * v,
        }
    })?)
}

/// All equilibria, each as its row-major CDM entries.
fn all_equilibria(prob: &MeanFieldProblem, cli: &Cli) -> Result<Vec<Vec<f64>>> {
    if prob.scenario.is_scalar_binary() {
        Ok(find_all_fixed_points(prob, 41, cli.tol)?
            .iter()
            .map(|r| vec![r.r, 1.0 - r.r])
            .collect())
    } else {
        Ok(multi_start(prob, 0.5, cli.tol, 200)?
            .iter()
            .map(|r| r.cdm.entries())
            .collect())
    }
}

fn linspace(from: f64, to: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..steps)
            .map(|i| from + (to - from) * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

fn sweep_rows(
    cli: &Cli,
    base: &Scenario,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for &v in values {
        let prob = MeanFieldProblem::with_config(apply_param(base, param, v)?, mf_config(cli))?;
        let eqs = all_equilibria(&prob, cli)?;
        let shown: Vec<String> = eqs
            .iter()
            .map(|e| {
                if prob.scenario.is_scalar_binary() {
                    num(e[0])
                } else {
                    e.iter().map(|x| num(*x)).collect::<Vec<_>>().join(" ")
                }
            })
            .collect();
        println!(
            "{param:?} = {v}: {} fixed point(s) [{}]",
            eqs.len(),
            shown.join("; ")
        );
        rows.push(vec![num(v), eqs.len().to_string(), shown.join(";")]);
    }
    Ok(rows)
}

fn sweep(cli: &Cli, param: SweepParam, from: f64, to: f64, steps: usize) -> Result<()> {
    let loaded = load(cli)?;
    let rows = sweep_rows(cli, &loaded.scenario, param, &linspace(from, to, steps))?;
    let mut out = OutDir::create(&cli.out)?;
    let name = format!("{param:?}").to_lowercase();
    out.csv(
        "sweep.csv",
        &[
            &format!("{name} [parameter]"),
            "n_fixed_points",
            "fixed_points [prob]",
        ],
        rows,
    )?;
    out.finish(manifest(cli, Some(loaded.digest)))?;
    Ok(())
}

fn state_header(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![format!("{prefix} [state]")]
    } else {
        (0..n).map(|c| format!("{prefix}_{c} [state]")).collect()
    }
}

fn simulate(
    cli: &Cli,
    lambda_args: &LambdaArgs,
    agents: usize,
    keep: usize,
    substeps: usize,
) -> Result<()> {
    let loaded = load(cli)?;
    let prob = MeanFieldProblem::with_config(loaded.scenario, mf_config(cli))?;
    let lambda = resolve_lambda(&prob, lambda_args, cli)?;
    let cfg = SimulationConfig {
        n_agents: agents,
        seed: cli.seed,
        substeps,
        keep_paths: keep,
    };
    let ens = simulate_population(&prob, &lambda, &cfg)?;
    let emp = empirical_cdm(&ens)?;
    let path = prob.mean_path(&lambda)?;
    let dev = ens.mean_deviation(&path.xbar);
    let grid = *prob.grid();
    let n = prob.aggregate.n;
    let mut out = OutDir::create(&cli.out)?;

    let mut header = vec![
        "agent".to_string(),
        "class".to_string(),
        "t [time]".to_string(),
    ];
    header.extend(state_header("x", n));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = ens.sampled.iter().flat_map(|sp| {
        sp.states.iter().enumerate().map(move |(i, x)| {
            let mut row = vec![
                sp.agent.to_string(),
                sp.class.to_string(),
                num(grid.time(i)),
            ];
            row.extend(x.iter().map(|v| num(*v)));
            row
        })
    });
    out.csv("trajectories.csv", &header, rows)?;

    let mut summary = vec![
        vec!["n_agents".to_string(), agents.to_string()],
        vec!["seed".to_string(), cli.seed.to_string()],
        vec!["mean_path_deviation".to_string(), num(dev)],
    ];
    let (lm, em) = (lambda.matrix(), emp.matrix());
    for s in 0..lm.nrows() {
        for j in 0..lm.ncols() {
            summary.push(vec![format!("lambda_{s}_{j}"), num(lm[(s, j)])]);
            summary.push(vec![format!("empirical_{s}_{j}"), num(em[(s, j)])]);
        }
    }
    out.csv("summary.csv", &["quantity", "value"], summary)?;

    let mut mheader = vec!["t [time]".to_string()];
    mheader.extend(state_header("empirical_mean", n));
    mheader.extend(state_header("tracked_xbar", n));
    let mheader: Vec<&str> = mheader.iter().map(String::as_str).collect();
    let mrows = (0..=grid.n_steps()).map(|i| {
        let mut row = vec![num(grid.time(i))];
        row.extend(ens.mean[i].iter().map(|v| num(*v)));
        row.extend(path.xbar[i].iter().map(|v| num(*v)));
        row
    });
    out.csv("mean_path.csv", &mheader, mrows)?;
    out.finish(manifest(cli, Some(loaded.digest)))?;
    println!(
        "empirical CDM {:?}, mean-path deviation {dev:.4}",
        emp.entries()
    );
    Ok(())
}

fn check_nash(
    cli: &Cli,
    lambda_args: &LambdaArgs,
    ns: &[usize],
    agent_paths: usize,
    probes: usize,
) -> Result<()> {
    let loaded = load(cli)?;
    let prob = MeanFieldProblem::with_config(loaded.scenario, mf_config(cli))?;
    let lambda = resolve_lambda(&prob, lambda_args, cli)?;
    let cfg = NashConfig {
        agent_paths,
        probe_budget: probes,
        seed: cli.seed,
        ..NashConfig::default()
    };
    let rows = estimate_epsilon_nash(&prob, &lambda, &cfg, ns)?;
    for r in &rows {
        println!(
            "N = {:>6}: eps = {:.5} ± {:.5}",
            r.n, r.epsilon, r.std_error
        );
    }
    let mut out = OutDir::create(&cli.out)?;
    out.csv(
        "nash.csv",
        &[
            "N",
            "replications",
            "probes",
            "epsilon [cost]",
            "std_error [cost]",
            "cost_equilibrium [cost]",
            "cost_deviation [cost]",
        ],
        rows.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.replications.to_string(),
                r.probes.to_string(),
                num(r.epsilon),
                num(r.std_error),
                num(r.cost_equilibrium),
                num(r.cost_deviation),
            ]
        }),
    )?;
    out.finish(manifest(cli, Some(loaded.digest)))?;
    Ok(())
}

/// Density snapshots at `0, T/2, T`, mean and tracked paths, ten sample
/// paths and a summary for one reference case.
fn figure_case(cli: &Cli, out: &mut OutDir, prefix: &str, q: f64, sigma: f64) -> Result<()> {
    let scenario = override_grid(reference_binary_with(q, sigma, 500.0, 2000), cli)?;
    let prob = MeanFieldProblem::with_config(scenario, mf_config(cli))?;
    let root = bisection_fixed_point(&prob, cli.tol, 25)?;
    let lambda = Cdm::binary(root.r)?;
    let grid = *prob.grid();
    let n_steps = grid.n_steps();
    let eval = prob.eval_f_detailed(&lambda, &[n_steps / 2])?;
    let field = &eval.densities[0];
    let rows = [0, n_steps / 2, n_steps].into_iter().flat_map(|node| {
        let p = field.snapshot_at(node).expect("kept snapshot").to_vec();
        (0..field.space.n)
            .map(move |c| vec![num(grid.time(node)), num(field.space.center(c)), num(p[c])])
    });
    out.csv(
        &format!("{prefix}_density.csv"),
        &["t [time]", "x [state]", "p [1/state]"],
        rows,
    )?;

    let sim = SimulationConfig {
        n_agents: 10,
        seed: cli.seed,
        substeps: 1,
        keep_paths: 10,
    };
    let ens = simulate_population(&prob, &lambda, &sim)?;
    let mut header = vec![
        "t [time]".to_string(),
        "mean [state]".to_string(),
        "tracked [state]".to_string(),
    ];
    header.extend(
        ens.sampled
            .iter()
            .map(|p| format!("sample_{} [state]", p.agent)),
    );
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..=n_steps).map(|i| {
        let mut row = vec![
            num(grid.time(i)),
            num(field.mean[i]),
            num(eval.path.xbar[i][0]),
        ];
        row.extend(ens.sampled.iter().map(|p| num(p.states[i][0])));
        row
    });
    out.csv(&format!("{prefix}_paths.csv"), &header, rows)?;

    let cons = consistency_residual(&prob, &lambda)?;
    out.csv(
        &format!("{prefix}_summary.csv"),
        &["quantity", "value"],
        vec![
            vec!["Q".into(), num(q)],
            vec!["sigma".into(), num(sigma)],
            vec!["r_star".into(), num(root.r)],
            vec!["g_r_star".into(), num(root.g)],
            vec!["consistency_residual".into(), num(cons)],
        ],
    )?;
    println!(
        "{prefix}: Q = {q}, sigma = {sigma}: r* = {:.4}, consistency residual {cons:.2e}",
        root.r
    );
    Ok(())
}

fn reproduce_figure(cli: &Cli, fig: u8, from: f64, to: f64, steps: usize) -> Result<()> {
    let mut out = OutDir::create(&cli.out)?;
    match fig {
        1 => figure_case(cli, &mut out, "fig1", 0.1, 1.5)?,
        2 => {
            figure_case(cli, &mut out, "fig2_q10", 10.0, 1.5)?;
            figure_case(cli, &mut out, "fig2_q20", 20.0, 1.5)?;
        }
        3 => {
            figure_case(cli, &mut out, "fig3_sigma3", 20.0, 3.0)?;
            figure_case(cli, &mut out, "fig3_sigma5", 20.0, 5.0)?;
        }
        4 => {
            let base = override_grid(reference_binary_with(0.1, 1.5, 500.0, 2000), cli)?;
            let rows = sweep_rows(cli, &base, SweepParam::Q, &linspace(from, to, steps))?;
            out.csv(
                "fig4_fixed_points.csv",
                &["q [parameter]", "n_fixed_points", "fixed_points [prob]"],
                rows,
            )?;
        }
        _ => bail!("unknown figure {fig}; choose 1, 2, 3 or 4"),
    }
    out.finish(manifest(cli, None))?;
    Ok(())
}
