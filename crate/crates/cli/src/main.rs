//! `sfbp`: simulate, optimize and compare runs of the stochastic free-boundary tumour model.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 numerical failure,
//! 3 optimization did not converge (outputs are still written).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use sfbp::config::{Overrides, RunConfig, EXAMPLE_JSON, SCHEMA_VERSION};
use sfbp::control::{
    cost_j, ensemble_path, fbs_solve_expectation, fbs_solve_pathwise, mc_expected_cost, relative_radius_decrease,
    ControlProblem, ControlSet,
};
use sfbp::export::{
    adjoint_csv, controls_csv, parse_controls_csv, profile_csv, trajectory_csv, EnsembleMean, Profile,
};
use sfbp::forward::{Model, Trajectory};
use sfbp::grid::build_grid;
use sfbp::noise::BrownianPath;
use sfbp::Error;

#[derive(Parser)]
#[command(name = "sfbp", version, about = "Stochastic free-boundary tumour model: simulation and optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward simulation of an ensemble of paths.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding a controls.csv to apply (default: admissible controls nearest 0).
        #[arg(long)]
        controls: Option<PathBuf>,
    },
    /// Forward-backward sweep for optimal controls, plus a controlled vs uncontrolled comparison.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Mode::Pathwise)]
        mode: Mode,
    },
    /// Monte Carlo estimate of the expected cost.
    Mc {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        controls: Option<PathBuf>,
    },
    /// Difference table between the final profiles of two result directories.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration (default: the bundled example).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    dt: Option<f64>,
    /// Number of collocation nodes.
    #[arg(long)]
    nodes: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Pathwise,
    Expectation,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 2 } else { 1 },
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, msg: e.to_string() }
    }
}

fn fail(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { run, controls } => simulate(&run, controls.as_deref()),
        Command::Optimize { run, mode } => optimize(&run, mode),
        Command::Mc { run, controls } => mc(&run, controls.as_deref()),
        Command::Compare { a, b, out, force } => compare(&a, &b, out.as_deref(), force),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// Git-style blob hash, so a file's digest matches `git hash-object` under SHA-256.
fn blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct Run {
    cfg: RunConfig,
    model: Model,
    problem: ControlProblem,
    out: PathBuf,
    inputs: Vec<Value>,
}

fn load(args: &RunArgs) -> CliResult<Run> {
    let (text, source) = match &args.config {
        Some(p) => (
            fs::read_to_string(p).map_err(|e| fail(format!("cannot read {}: {e}", p.display())))?,
            p.display().to_string(),
        ),
        None => (EXAMPLE_JSON.to_string(), "bundled example".to_string()),
    };
    let ov = Overrides {
        seed: args.seed,
        n_paths: args.paths,
        dt: args.dt,
        n_nodes: args.nodes,
        out: args.out.as_ref().map(|p| p.display().to_string()),
    };
    let cfg = RunConfig::from_json(&text)?.resolve(&ov)?;
    let model = Model::new(cfg.scenario()?)?;
    let problem = cfg.problem(&model)?;
    let out = PathBuf::from(&cfg.output.dir);
    Ok(Run {
        cfg,
        model,
        problem,
        out,
        inputs: vec![json!({"role": "config", "source": source, "sha256": blob_sha256(text.as_bytes())})],
    })
}

/// Creates `dir`, refusing to touch existing results unless forced.
fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir)?.next().is_none();
        if !empty {
            if !force {
                return Err(fail(format!(
                    "output directory {} already exists; pass --force to replace it",
                    dir.display()
                )));
            }
            if !dir.join("provenance.json").exists() && !dir.join("compare.json").exists() {
                return Err(fail(format!(
                    "refusing to replace {}: it does not look like an sfbp output directory",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))
}

fn write_json(dir: &Path, name: &str, v: &Value) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    write(dir, name, &s)
}

fn write_provenance(run: &Run, command: &str, extra: Value) -> CliResult<()> {
    let resolved: Value = serde_json::from_str(&run.cfg.to_json()).expect("config round-trips");
    write_json(
        &run.out,
        "provenance.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "tool": "sfbp",
            "tool_version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": run.cfg.mc.seed,
            "n_paths": run.cfg.mc.n_paths,
            "inputs": run.inputs,
            "details": extra,
            "resolved_config": resolved,
        }),
    )
}

/// Controls from `<dir>/controls.csv`, or the admissible controls nearest zero.
fn load_controls(run: &mut Run, dir: Option<&Path>) -> CliResult<(ControlSet, String)> {
    let Some(dir) = dir else {
        return Ok((run.problem.nearest_to_zero(), "nearest admissible to zero".into()));
    };
    let path = dir.join("controls.csv");
    let text = fs::read_to_string(&path).map_err(|e| fail(format!("cannot read {}: {e}", path.display())))?;
    let set = parse_controls_csv(&text, run.model.grid.n_nodes, run.model.n_steps + 1)?;
    if !run.problem.is_admissible(&set) {
        return Err(fail(format!("{} violates the configured control bounds", path.display())));
    }
    run.inputs.push(json!({
        "role": "controls",
        "source": path.display().to_string(),
        "sha256": blob_sha256(text.as_bytes()),
    }));
    Ok((set, path.display().to_string()))
}

fn write_path_dump(dir: &Path, i: u64, path: &BrownianPath) -> CliResult<()> {
    let target = dir.join("brownian");
    fs::create_dir_all(&target)?;
    let mut buf = Vec::new();
    path.write_to(&mut buf)?;
    fs::write(target.join(format!("path_{i:04}.bin")), buf)?;
    Ok(())
}

/// Runs a path, turning extinction into a logged skip.
fn run_path(model: &Model, controls: &ControlSet, path: &BrownianPath, i: u64) -> CliResult<Option<Trajectory>> {
    match model.simulate(controls, path) {
        Ok(t) => Ok(Some(t)),
        Err(Error::Extinction { step }) => {
            warn!("path {i} went extinct at step {step}; excluded");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn simulate(args: &RunArgs, controls_dir: Option<&Path>) -> CliResult<u8> {
    let mut run = load(args)?;
    prepare_dir(&run.out, args.force)?;
    let (controls, source) = load_controls(&mut run, controls_dir)?;
    let (model, out) = (&run.model, &run.out);
    let seed = run.cfg.mc.seed;
    let n_paths = run.cfg.mc.n_paths;
    let stride = run.cfg.output.time_stride;
    let mut mean = EnsembleMean::new(model.grid.n_nodes, model.n_steps + 1);
    let mut excluded = Vec::new();
    let mut final_eta = Vec::new();
    for i in 0..n_paths as u64 {
        let path = ensemble_path(model, seed, i)?;
        if run.cfg.output.emit_brownian {
            write_path_dump(out, i, &path)?;
        }
        let Some(traj) = run_path(model, &controls, &path, i)? else {
            excluded.push(i);
            continue;
        };
        if run.cfg.output.emit_paths {
            write(out, &format!("paths/path_{i:04}.csv"), &trajectory_csv(&model.grid, &traj, stride))?;
        }
        final_eta.push(traj.final_state().eta);
        mean.add(&traj);
    }
    if mean.n_paths == 0 {
        return Err(Error::AllExtinct(n_paths).into());
    }
    write(out, "ensemble_mean.csv", &mean.csv(&model.grid, stride))?;
    write(out, "final_profile.csv", &profile_csv(&model.grid, mean.states.last().unwrap()))?;
    let (eta_mean, eta_se) = mean_and_se(&final_eta);
    write_json(
        out,
        "simulate_report.json",
        &json!({
            "n_paths": n_paths,
            "completed_paths": mean.n_paths,
            "excluded_paths": excluded,
            "final_eta_mean": eta_mean,
            "final_eta_std_error": eta_se,
        }),
    )?;
    write_provenance(&run, "simulate", json!({"controls": source}))?;
    Ok(0)
}

fn optimize(args: &RunArgs, mode: Mode) -> CliResult<u8> {
    let run = load(args)?;
    prepare_dir(&run.out, args.force)?;
    let (model, problem, out) = (&run.model, &run.problem, &run.out);
    let grid = &model.grid;
    let seed = run.cfg.mc.seed;
    let opts = run.cfg.fbs_options();
    let stride = run.cfg.output.time_stride;
    let started = Instant::now();

    let (controls, iterations, converged, residual, history, eval_paths, adjoint) = match mode {
        Mode::Pathwise => {
            let path = ensemble_path(model, seed, 0)?;
            let r = fbs_solve_pathwise(model, problem, &path, &opts)?;
            (r.controls, r.iterations, r.converged, r.residual, r.residual_history, 1, Some(r.adjoint))
        }
        Mode::Expectation => {
            let n = run.cfg.mc.n_paths;
            let r = fbs_solve_expectation(model, problem, n, seed, &opts)?;
            (r.controls, r.iterations, r.converged, r.residual, r.residual_history, n, None)
        }
    };
    let solve_time = started.elapsed().as_secs_f64();

    // paired evaluation: the same paths with and without the optimized controls
    let baseline = problem.nearest_to_zero();
    let n_times = model.n_steps + 1;
    let mut mean_c = EnsembleMean::new(grid.n_nodes, n_times);
    let mut mean_u = EnsembleMean::new(grid.n_nodes, n_times);
    let mut cost_c = Vec::new();
    let mut cost_u = Vec::new();
    let mut excluded = Vec::new();
    let mut decrease_rows = String::from("tau,path_index,relative_radius_decrease\n");
    let mut adjoint = adjoint;
    for i in 0..eval_paths as u64 {
        let path = ensemble_path(model, seed, i)?;
        if run.cfg.output.emit_brownian {
            write_path_dump(out, i, &path)?;
        }
        let (Some(tc), Some(tu)) = (run_path(model, &controls, &path, i)?, run_path(model, &baseline, &path, i)?)
        else {
            excluded.push(i);
            continue;
        };
        if adjoint.is_none() {
            adjoint = Some(model.solve_adjoint(&tc, problem.lambda())?);
        }
        let dec = relative_radius_decrease(&tc, &tu, model.cfg.eta0);
        for (k, v) in dec.iter().enumerate() {
            if k % stride == 0 || k == n_times - 1 {
                let _ = writeln!(decrease_rows, "{},{},{}", model.tau(k), i, v);
            }
        }
        cost_c.push(cost_j(grid, problem, &tc, &controls));
        cost_u.push(cost_j(grid, problem, &tu, &baseline));
        mean_c.add(&tc);
        mean_u.add(&tu);
    }
    if mean_c.n_paths == 0 {
        return Err(Error::AllExtinct(eval_paths).into());
    }

    write(out, "controls.csv", &controls_csv(grid, &controls, model.dt()))?;
    if let Some(adj) = &adjoint {
        write(out, "adjoint.csv", &adjoint_csv(grid, adj, model.dt(), stride))?;
    }
    let mut hist = String::from("iteration,residual\n");
    for (i, r) in history.iter().enumerate() {
        let _ = writeln!(hist, "{},{}", i + 1, r);
    }
    write(out, "residual_history.csv", &hist)?;
    write(out, "radius_decrease.csv", &decrease_rows)?;

    let mut mean_rows = String::from("tau,mean_relative_radius_decrease\n");
    let eta0 = model.cfg.eta0;
    for k in 0..n_times {
        if k % stride == 0 || k == n_times - 1 {
            let v = (mean_c.states[k].eta - mean_u.states[k].eta) / eta0;
            let _ = writeln!(mean_rows, "{},{}", model.tau(k), v);
        }
    }
    write(out, "radius_decrease_mean.csv", &mean_rows)?;

    let fc = mean_c.states.last().unwrap();
    let fu = mean_u.states.last().unwrap();
    let mut prof = String::from(
        "node_index,rho,p_controlled,q_controlled,alive_controlled,p_uncontrolled,q_uncontrolled,alive_uncontrolled,alive_difference\n",
    );
    let mut max_excess = f64::NEG_INFINITY;
    for i in 0..grid.n_nodes {
        let (ac, au) = (fc.p[i] + fc.q[i], fu.p[i] + fu.q[i]);
        max_excess = max_excess.max(ac - au);
        let _ = writeln!(
            prof,
            "{},{},{},{},{},{},{},{},{}",
            i, grid.nodes[i], fc.p[i], fc.q[i], ac, fu.p[i], fu.q[i], au, ac - au
        );
    }
    write(out, "final_profiles.csv", &prof)?;
    write(out, "final_profile.csv", &profile_csv(grid, fc))?;
    write(out, "ensemble_mean_controlled.csv", &mean_c.csv(grid, stride))?;
    write(out, "ensemble_mean_uncontrolled.csv", &mean_u.csv(grid, stride))?;

    let final_decrease = (fc.eta - fu.eta) / eta0;
    let (jc, jc_se) = mean_and_se(&cost_c);
    let (ju, ju_se) = mean_and_se(&cost_u);
    let sign = if final_decrease < 0.0 {
        "smaller radius under control"
    } else if final_decrease > 0.0 {
        "larger radius under control"
    } else {
        "no change"
    };
    write_json(
        out,
        "report.json",
        &json!({
            "mode": match mode { Mode::Pathwise => "pathwise", Mode::Expectation => "expectation" },
            "iterations": iterations,
            "converged": converged,
            "tol": opts.tol,
            "residual": residual,
            "residual_history": history,
            "evaluated_paths": mean_c.n_paths,
            "excluded_paths": excluded,
            "cost_controlled": {"mean": jc, "std_error": jc_se},
            "cost_uncontrolled": {"mean": ju, "std_error": ju_se},
            "final_alive_density": {
                "controlled_not_above_uncontrolled": max_excess <= 0.0,
                "max_excess": max_excess,
            },
            "final_relative_radius_decrease": final_decrease,
            "radius_sign": sign,
            "wall_time_s": solve_time,
        }),
    )?;
    write_provenance(&run, "optimize", json!({"mode": match mode { Mode::Pathwise => "pathwise", Mode::Expectation => "expectation" }}))?;
    if converged {
        Ok(0)
    } else {
        eprintln!("warning: not converged after {iterations} iterations (residual {residual:e})");
        Ok(3)
    }
}

fn mc(args: &RunArgs, controls_dir: Option<&Path>) -> CliResult<u8> {
    let mut run = load(args)?;
    prepare_dir(&run.out, args.force)?;
    let (controls, source) = load_controls(&mut run, controls_dir)?;
    let seed = run.cfg.mc.seed;
    let n_paths = run.cfg.mc.n_paths;
    let est = mc_expected_cost(&run.model, &run.problem, &controls, n_paths, seed)?;
    let mut rows = String::from("path_index,cost,status\n");
    let mut excluded = Vec::new();
    for (i, c) in est.costs.iter().enumerate() {
        match c {
            Some(v) => {
                let _ = writeln!(rows, "{i},{v},ok");
            }
            None => {
                excluded.push(i);
                let _ = writeln!(rows, "{i},,extinct");
            }
        }
    }
    write(&run.out, "path_costs.csv", &rows)?;
    write_json(
        &run.out,
        "mc_report.json",
        &json!({
            "n_paths": n_paths,
            "seed": seed,
            "expected_cost": est.mean,
            "std_error": est.std_error,
            "excluded_paths": excluded,
            "controls": source,
        }),
    )?;
    write_provenance(&run, "mc", json!({"controls": source}))?;
    Ok(0)
}

fn read_profile(dir: &Path) -> CliResult<Profile> {
    let path = dir.join("final_profile.csv");
    let text = fs::read_to_string(&path).map_err(|e| fail(format!("cannot read {}: {e}", path.display())))?;
    Profile::parse(&text).ok_or_else(|| fail(format!("{} is not a profile table", path.display())))
}

fn compare(a: &Path, b: &Path, out: Option<&Path>, force: bool) -> CliResult<u8> {
    let pa = read_profile(a)?;
    let pb = read_profile(b)?;
    if pa.rho.len() != pb.rho.len() {
        return Err(fail(format!(
            "grid mismatch: {} has {} nodes, {} has {}",
            a.display(),
            pa.rho.len(),
            b.display(),
            pb.rho.len()
        )));
    }
    let grid = build_grid(pa.rho.len())?;
    let on_grid = |p: &Profile| p.rho.iter().zip(&grid.nodes).all(|(x, y)| (x - y).abs() <= 1e-12);
    if !on_grid(&pa) || !on_grid(&pb) {
        return Err(fail("grid mismatch: node positions differ"));
    }
    let names: Vec<&str> = pa
        .columns
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| pb.column(n).is_some())
        .collect();

    let mut header = String::from("node_index,rho");
    for n in &names {
        let _ = write!(header, ",{n}_a,{n}_b,{n}_diff");
    }
    let mut table = header + "\n";
    for i in 0..grid.n_nodes {
        let _ = write!(table, "{},{}", i, grid.nodes[i]);
        for n in &names {
            let (x, y) = (pa.column(n).unwrap()[i], pb.column(n).unwrap()[i]);
            let _ = write!(table, ",{x},{y},{}", x - y);
        }
        table.push('\n');
    }
    // volume average 3 int rho^2 f
    let vol = |f: &[f64]| {
        let g: Vec<f64> = f.iter().zip(&grid.nodes).map(|(v, x)| 3.0 * x * x * v).collect();
        grid.quadrature(&g)
    };
    let mut cols = serde_json::Map::new();
    for n in &names {
        let (x, y) = (pa.column(n).unwrap(), pb.column(n).unwrap());
        let diff: Vec<f64> = x.iter().zip(y).map(|(s, t)| s - t).collect();
        cols.insert(
            n.to_string(),
            json!({
                "max_abs_diff": diff.iter().fold(0.0f64, |m, d| m.max(d.abs())),
                "volume_mean_a": vol(x),
                "volume_mean_b": vol(y),
                "volume_mean_diff": vol(&diff),
            }),
        );
    }
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "a": a.display().to_string(),
        "b": b.display().to_string(),
        "n_nodes": grid.n_nodes,
        "columns": cols,
    });
    if let Some(dir) = out {
        prepare_dir(dir, force)?;
        write(dir, "compare.csv", &table)?;
        write_json(dir, "compare.json", &summary)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("json serializes"));
    Ok(0)
}
