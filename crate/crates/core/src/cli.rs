//! Command-line front end: `run`, `sweep` and `validate`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::grid::{BusKind, Network};
use crate::powerflow::solve_power_flow;
use crate::scenarios::{
    build_tree, default_alphas, default_betas, parameter_sweep, run_scenario, LayerTrajectory,
    NetworkSource, Scenario, SweepResult, Trajectory,
};

#[derive(Debug, Parser)]
#[command(
    name = "ofo",
    version,
    about = "Momentum-accelerated online feedback optimization on AC grids"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Simulate a scenario and write trajectory.csv, summary.txt and interfaces.csv.
    Run(RunArgs),
    /// Run the (alpha, beta) grid of a tracking scenario and write sweep.csv.
    Sweep(RunArgs),
    /// Check a network or scenario and report the power flow at its nominal point.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub scenario: PathBuf,
    /// Replace the root layer's network.
    #[arg(long, value_name = "PATH")]
    pub network: Option<PathBuf>,
    #[arg(long, value_name = "F")]
    pub alpha: Option<f64>,
    #[arg(long, value_name = "F")]
    pub beta: Option<f64>,
    #[arg(long = "max-iter", value_name = "N")]
    pub max_iter: Option<usize>,
    /// Measurement-noise seed; only used when the scenario enables noise.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["network", "scenario"])))]
pub struct ValidateArgs {
    #[arg(long, value_name = "PATH")]
    pub network: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Run,
    Sweep,
    Validate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub max_iterations: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: CommandKind,
    pub scenario: Option<PathBuf>,
    pub network: Option<PathBuf>,
    pub out: PathBuf,
    pub overrides: Overrides,
}

impl RunManifest {
    pub fn from_cli(cli: &Cli) -> RunManifest {
        match &cli.command {
            CliCommand::Run(a) | CliCommand::Sweep(a) => RunManifest {
                command: if matches!(cli.command, CliCommand::Run(_)) {
                    CommandKind::Run
                } else {
                    CommandKind::Sweep
                },
                scenario: Some(a.scenario.clone()),
                network: a.network.clone(),
                out: a.out.clone(),
                overrides: Overrides {
                    alpha: a.alpha,
                    beta: a.beta,
                    max_iterations: a.max_iter,
                    seed: a.seed,
                },
            },
            CliCommand::Validate(a) => RunManifest {
                command: CommandKind::Validate,
                scenario: a.scenario.clone(),
                network: a.network.clone(),
                out: PathBuf::from("."),
                overrides: Overrides::default(),
            },
        }
    }

    fn check_overrides(&self) -> Result<()> {
        let o = &self.overrides;
        if let Some(a) = o.alpha.filter(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Parameter(format!(
                "--alpha must lie in (0, 1], got {a}"
            )));
        }
        if let Some(b) = o.beta.filter(|b| !(*b > 0.0 && *b <= 1.0)) {
            return Err(Error::Parameter(format!(
                "--beta must lie in (0, 1], got {b}"
            )));
        }
        if o.max_iterations == Some(0) {
            return Err(Error::Parameter("--max-iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Scenario with the network replacement and overrides applied.
    pub fn load_scenario(&self) -> Result<Scenario> {
        self.check_overrides()?;
        let path = self
            .scenario
            .as_ref()
            .ok_or_else(|| Error::Parameter("--scenario is required".into()))?;
        let mut sc = Scenario::load_json(path)?;
        if let Some(net) = &self.network {
            let path = std::path::absolute(net).map_err(|e| Error::io(net, e))?;
            sc.root_layer_mut().network = NetworkSource::File { path };
        }
        let o = &self.overrides;
        if let Some(a) = o.alpha {
            sc.root_layer_mut().alpha = a;
        }
        if let Some(b) = o.beta {
            sc.root_layer_mut().beta = b;
        }
        if let Some(n) = o.max_iterations {
            sc.max_iterations = n;
        }
        if let (Some(seed), Some(noise)) = (o.seed, sc.noise.as_mut()) {
            noise.seed = seed;
        }
        sc.validate()?;
        Ok(sc)
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.11e}")
}

fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_line(w: &mut impl Write, fields: &[String]) -> io::Result<()> {
    w.write_all(fields.join(",").as_bytes())?;
    w.write_all(b"\n")
}

/// One row per iteration; step columns stay empty on the last row.
pub fn write_trajectory_csv(w: &mut impl Write, layer: &LayerTrajectory) -> io::Result<()> {
    let mut header: Vec<String> = [
        "k",
        "phi",
        "sigma_norm",
        "qp_status",
        "violation_count",
        "pcc_p",
        "pcc_q",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(layer.bus_ids.iter().map(|b| format!("vm_{b}")));
    header.extend(layer.actuator_labels.iter().map(|l| format!("p_{l}")));
    header.extend(layer.actuator_labels.iter().map(|l| format!("q_{l}")));
    csv_line(w, &header)?;
    for r in &layer.records {
        let mut row = vec![
            r.k.to_string(),
            fmt_f64(r.phi),
            fmt_opt(r.step.as_ref().map(|s| fmt_f64(s.sigma_norm))),
            fmt_opt(r.step.as_ref().map(|s| s.qp_status.as_str())),
            r.violation_count.to_string(),
            fmt_opt(r.pcc.map(|p| fmt_f64(p.0))),
            fmt_opt(r.pcc.map(|p| fmt_f64(p.1))),
        ];
        row.extend(r.vm.iter().map(|v| fmt_f64(*v)));
        row.extend(r.u.iter().map(|v| fmt_f64(*v)));
        csv_line(w, &row)?;
    }
    Ok(())
}

pub fn write_interfaces_csv(w: &mut impl Write, traj: &Trajectory) -> io::Result<()> {
    csv_line(
        w,
        &["tick", "link", "direction", "p", "q"].map(String::from),
    )?;
    for m in &traj.interfaces {
        csv_line(
            w,
            &[
                m.tick.to_string(),
                traj.layers[m.link].name.clone(),
                m.direction.as_str().to_string(),
                fmt_f64(m.p),
                fmt_f64(m.q),
            ],
        )?;
    }
    Ok(())
}

pub fn write_summary(w: &mut impl Write, scenario: &Scenario, traj: &Trajectory) -> io::Result<()> {
    let root = traj.root();
    let last = root.records.last();
    writeln!(w, "scenario = {}", scenario.name)?;
    writeln!(w, "iterations = {}", root.records.len().saturating_sub(1))?;
    writeln!(w, "final_phi = {}", fmt_opt(last.map(|r| fmt_f64(r.phi))))?;
    writeln!(
        w,
        "final_violations = {}",
        traj.layers
            .iter()
            .filter_map(|l| l.records.last())
            .map(|r| r.violation_count)
            .sum::<usize>()
    )?;
    writeln!(
        w,
        "violating_iterations = {}",
        root.records
            .iter()
            .filter(|r| r.violation_count > 0)
            .count()
    )?;
    writeln!(w, "settled_at = {}", fmt_opt(traj.settled_at))?;
    writeln!(w, "converged = {}", traj.converged())?;
    writeln!(w, "diverged = {}", traj.diverged)?;
    writeln!(w, "softened_steps = {}", traj.softened_count())?;
    if let Some(f) = &traj.failure {
        writeln!(w, "failure = {f}")?;
    }
    Ok(())
}

pub fn write_sweep_csv(w: &mut impl Write, sweep: &SweepResult) -> io::Result<()> {
    csv_line(
        w,
        &["alpha", "beta", "settled_at", "converged"].map(String::from),
    )?;
    for c in &sweep.cells {
        csv_line(
            w,
            &[
                fmt_f64(c.alpha),
                fmt_f64(c.beta),
                fmt_opt(c.settled_at),
                c.converged.to_string(),
            ],
        )?;
    }
    Ok(())
}

fn write_file(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    fill(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Returns the list of files written.
pub fn cmd_run(manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    let sc = manifest.load_scenario()?;
    let traj = run_scenario(&sc)?;
    prepare_out(&manifest.out)?;
    let mut written = Vec::new();
    for (i, layer) in traj.layers.iter().enumerate() {
        let name = if i == traj.root {
            "trajectory.csv".to_string()
        } else {
            format!("trajectory_{}.csv", layer.name)
        };
        let path = manifest.out.join(name);
        write_file(&path, |w| write_trajectory_csv(w, layer))?;
        written.push(path);
    }
    if traj.layers.len() > 1 {
        let path = manifest.out.join("interfaces.csv");
        write_file(&path, |w| write_interfaces_csv(w, &traj))?;
        written.push(path);
    }
    let path = manifest.out.join("summary.txt");
    write_file(&path, |w| write_summary(w, &sc, &traj))?;
    written.push(path);
    Ok(written)
}

pub fn cmd_sweep(manifest: &RunManifest) -> Result<PathBuf> {
    let sc = manifest.load_scenario()?;
    let sweep = parameter_sweep(&sc, &default_alphas(), &default_betas())?;
    prepare_out(&manifest.out)?;
    let path = manifest.out.join("sweep.csv");
    write_file(&path, |w| write_sweep_csv(w, &sweep))?;
    Ok(path)
}

fn describe_network(w: &mut impl Write, label: &str, net: &Network) -> Result<()> {
    let u = net.nominal_inputs();
    let sol = solve_power_flow(net, &u, None)?;
    let vm: Vec<f64> = net
        .buses
        .iter()
        .zip(sol.vm())
        .filter(|(b, _)| b.kind == BusKind::Pq)
        .map(|(_, v)| v)
        .collect();
    let lo = vm.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let io_err = |e| Error::io(label, e);
    writeln!(
        w,
        "{label}: {} buses, {} branches, {} actuators",
        net.buses.len(),
        net.branches.len(),
        net.actuator_count()
    )
    .map_err(io_err)?;
    writeln!(
        w,
        "  power flow: residual {:.3e} pu after {} iterations",
        sol.mismatch_norm, sol.iterations
    )
    .map_err(io_err)?;
    writeln!(w, "  voltage range: {lo:.6} .. {hi:.6} pu").map_err(io_err)?;
    if let Some((p, q)) = sol.pcc_flow {
        writeln!(w, "  pcc exchange: p = {p:.6}, q = {q:.6}").map_err(io_err)?;
    }
    Ok(())
}

pub fn cmd_validate(manifest: &RunManifest) -> Result<String> {
    let mut out = Vec::new();
    if let Some(path) = &manifest.network {
        let net = Network::load_json(path)?;
        describe_network(&mut out, &path.display().to_string(), &net)?;
    }
    if manifest.scenario.is_some() {
        let sc = manifest.load_scenario()?;
        let tree = build_tree(&sc)?;
        for node in &tree.nodes {
            describe_network(&mut out, &format!("layer '{}'", node.name), &node.network)?;
        }
    }
    Ok(String::from_utf8(out).expect("utf-8 report"))
}

/// Dispatch a parsed command line; the caller maps errors to the exit code.
pub fn execute(cli: &Cli) -> Result<String> {
    let manifest = RunManifest::from_cli(cli);
    match manifest.command {
        CommandKind::Run => {
            let files = cmd_run(&manifest)?;
            Ok(files
                .iter()
                .map(|p| format!("wrote {}\n", p.display()))
                .collect())
        }
        CommandKind::Sweep => {
            let path = cmd_sweep(&manifest)?;
            Ok(format!("wrote {}\n", path.display()))
        }
        CommandKind::Validate => cmd_validate(&manifest),
    }
}
