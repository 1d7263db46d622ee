//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 input file parse error, 3 solver
//! failure, 4 voltage collapse in a run that did not expect one.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::algebraic::{ConstraintSet, FreeVar};
use crate::cases::{builtin_case, case_names, BuiltinCase, Scenario};
use crate::dynsim::{simulate, SimOptions, Termination, Trajectory};
use crate::homotopy::{
    find_all_solutions_configured, trace_branch, BranchTermination, SweepConfig, RESTARTS,
};
use crate::net::Network;
use crate::pecs::{
    detect_entrapment, execute_pulse_recovery, lsivc_demonstration, DetectorConfig, PulseCommand,
    RecoveryOutcome,
};
use crate::scenario::load_scenario_file;
use crate::stability::{
    classified_solutions, normal_equilibrium, phase_portrait, Classification, Equilibrium,
    PortraitAxes,
};
use crate::table;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_COLLAPSE: i32 = 4;

#[derive(Debug, Error)]
enum CmdError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    Collapse(String),
}

impl CmdError {
    fn code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => EXIT_USAGE,
            CmdError::Parse(_) => EXIT_PARSE,
            CmdError::Solver(_) => EXIT_SOLVER,
            CmdError::Collapse(_) => EXIT_COLLAPSE,
        }
    }
}

#[derive(Parser)]
#[command(name = "feedersim", version, about = "Feeder power-flow and transient simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Find every power-flow solution of a built-in case.
    Solve(SolveArgs),
    /// Trace a solution branch while sweeping one load admittance.
    Trace(TraceArgs),
    /// Integrate a disturbance scenario.
    Simulate(SimulateArgs),
    /// Classify the stability of every solution.
    Classify(ClassifyArgs),
    /// Sample the load-state derivative field on a grid.
    Portrait(PortraitArgs),
    /// Detect post-disturbance entrapment and optionally fire a recovery pulse.
    Pecs(PecsArgs),
    /// Run the load-shedding collapse demonstration.
    Lsivc(LsivcArgs),
    /// List the built-in cases and their scenarios.
    Cases,
}

#[derive(Args)]
struct SolveArgs {
    /// Built-in case name (see `cases`).
    #[arg(long)]
    case: String,
    /// Random admittance restarts beyond the systematic seeds.
    #[arg(long, default_value_t = RESTARTS)]
    seed_restarts: usize,
    /// Write the solutions as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    case: String,
    /// Bus whose conductance is swept.
    #[arg(long)]
    free_bus: usize,
    /// Sweep interval as lo:hi.
    #[arg(long)]
    sweep_range: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    case: String,
    /// Scenario name within the case; defaults to the case's first scenario.
    #[arg(long, conflicts_with = "scenario_file")]
    scenario: Option<String>,
    /// Scenario TOML file to run instead of a built-in scenario.
    #[arg(long)]
    scenario_file: Option<PathBuf>,
    /// Override the scenario end time.
    #[arg(long)]
    t_end: Option<f64>,
    /// Override the output sampling interval.
    #[arg(long)]
    dt_out: Option<f64>,
    /// Relative integration tolerance (absolute is 100x tighter).
    #[arg(long)]
    tol: Option<f64>,
    /// Write the trajectory as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    case: String,
}

#[derive(Args)]
struct PortraitArgs {
    #[arg(long)]
    case: String,
    /// Grid points per axis.
    #[arg(long, default_value_t = 50)]
    grid: usize,
    /// Conductance axis interval as lo:hi.
    #[arg(long, default_value = "-1.5:1.5")]
    x_range: String,
    /// Susceptance axis interval as lo:hi.
    #[arg(long, default_value = "-1.5:1.5")]
    y_range: String,
    /// Write the sampled field as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PecsArgs {
    #[arg(long)]
    case: String,
    #[arg(long, conflicts_with = "scenario_file")]
    scenario: Option<String>,
    #[arg(long)]
    scenario_file: Option<PathBuf>,
    /// Recovery pulse as p:duration, applied from the detected equilibrium.
    #[arg(long)]
    pulse: Option<String>,
    /// Bus the pulse targets; defaults to the first dynamic-load bus.
    #[arg(long)]
    pulse_bus: Option<usize>,
}

#[derive(Args)]
struct LsivcArgs {
    /// Active power shed at bus 2 once entrapped.
    #[arg(long, default_value_t = 0.2)]
    dp: f64,
    /// Write the demonstration trajectory as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let result = match cli.cmd {
        Cmd::Solve(a) => cmd_solve(&a),
        Cmd::Trace(a) => cmd_trace(&a),
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Classify(a) => cmd_classify(&a),
        Cmd::Portrait(a) => cmd_portrait(&a),
        Cmd::Pecs(a) => cmd_pecs(&a),
        Cmd::Lsivc(a) => cmd_lsivc(&a),
        Cmd::Cases => cmd_cases(),
    };
    eprintln!("elapsed: {:.2}s", started.elapsed().as_secs_f64());
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn get_case(name: &str) -> Result<BuiltinCase, CmdError> {
    builtin_case(name).map_err(CmdError::Usage)
}

fn parse_range(text: &str) -> Result<(f64, f64), CmdError> {
    let bad = || CmdError::Usage(format!("expected lo:hi with lo < hi, got '{text}'"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn write_out(path: &Path, text: &str) -> Result<(), CmdError> {
    std::fs::write(path, text)
        .map_err(|e| CmdError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn classification_word(eq: &Equilibrium) -> String {
    match &eq.classification {
        Classification::Stable => "stable".into(),
        Classification::Unstable { positive_real_parts } => {
            format!("unstable ({} eigenvalues in the right half-plane)", positive_real_parts)
        }
        Classification::Marginal => "marginal".into(),
    }
}

fn vmag_summary(net: &Network, voltages: &[num_complex::Complex64]) -> String {
    (1..=net.n_buses)
        .filter(|&b| b != net.slack_bus)
        .map(|b| format!("|V{b}|={:.4}", voltages[b - 1].norm()))
        .collect::<Vec<_>>()
        .join("  ")
}

fn cmd_solve(a: &SolveArgs) -> Result<(), CmdError> {
    let case = get_case(&a.case)?;
    let net = &case.network;
    let targets = ConstraintSet::from_network(net);
    let set = find_all_solutions_configured(net, &targets, a.seed_restarts);
    if set.solutions.is_empty() {
        return Err(CmdError::Solver(format!("no power-flow solution found for {}", a.case)));
    }
    let classified: Vec<Equilibrium> = set
        .solutions
        .iter()
        .filter_map(|(y, _)| crate::stability::classify_equilibrium(net, y).ok())
        .collect();
    println!("{}: {} solutions", a.case, set.solutions.len());
    for (i, eq) in classified.iter().enumerate() {
        println!("  {}: {}  [{}]", i, vmag_summary(net, &eq.voltages), classification_word(eq));
    }
    let singular_ends = set
        .branches
        .iter()
        .map(|b| {
            usize::from(b.terminated_by == BranchTermination::Singularity)
                + usize::from(b.terminated_low == BranchTermination::Singularity)
        })
        .sum::<usize>();
    println!(
        "traced {} branches; {} branch ends stopped at a singular Jacobian",
        set.branches.len(),
        singular_ends
    );
    if let Some(path) = &a.out {
        write_out(path, &table::solutions_table(net, &classified).csv())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_classify(a: &ClassifyArgs) -> Result<(), CmdError> {
    let case = get_case(&a.case)?;
    let net = &case.network;
    let eqs = classified_solutions(net);
    if eqs.is_empty() {
        return Err(CmdError::Solver(format!("no power-flow solution found for {}", a.case)));
    }
    println!("{}: {} solutions", a.case, eqs.len());
    for (i, eq) in eqs.iter().enumerate() {
        println!("  {}: {}  [{}]", i, vmag_summary(net, &eq.voltages), classification_word(eq));
        let eig = eq
            .eigenvalues
            .iter()
            .map(|l| format!("{:+.4}{:+.4}i", l.re, l.im))
            .collect::<Vec<_>>()
            .join(", ");
        println!("     eigenvalues: {eig}");
    }
    Ok(())
}

fn cmd_trace(a: &TraceArgs) -> Result<(), CmdError> {
    let case = get_case(&a.case)?;
    let net = &case.network;
    if a.free_bus == net.slack_bus || a.free_bus == 0 || a.free_bus > net.n_buses {
        return Err(CmdError::Usage(format!("--free-bus must be a non-slack bus of {}", a.case)));
    }
    let start = normal_equilibrium(net)
        .ok_or_else(|| CmdError::Solver("no stable operating point to start from".into()))?;
    let mut sweep = SweepConfig::conductance(a.free_bus);
    if let Some(r) = &a.sweep_range {
        sweep.range = parse_range(r)?;
    }
    let targets = ConstraintSet::from_network(net);
    let branch = trace_branch(net, &targets, &sweep, &start.admittances);
    if branch.points.is_empty() {
        return Err(CmdError::Solver("continuation failed at the starting point".into()));
    }
    let tip = branch.points.iter().map(|p| p.realized_power).fold(f64::INFINITY, f64::min);
    let ends = |t: &BranchTermination| format!("{t:?}");
    println!(
        "{} points over g{} in [{:.4}, {:.4}]",
        branch.points.len(),
        a.free_bus,
        branch.points.first().unwrap().free_value,
        branch.points.last().unwrap().free_value,
    );
    println!(
        "terminations: low {}, high {}; most negative realized power {:.4}",
        ends(&branch.terminated_low),
        ends(&branch.terminated_by),
        tip
    );
    if let Some(path) = &a.out {
        write_out(path, &table::branch_table(net, &branch).csv())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn resolve_scenario(
    case: &BuiltinCase,
    name: Option<&str>,
    file: Option<&PathBuf>,
) -> Result<Scenario, CmdError> {
    if let Some(path) = file {
        return load_scenario_file(path).map_err(CmdError::Parse);
    }
    match name {
        Some(n) => case.scenario(n).cloned().ok_or_else(|| {
            let known = case.scenarios.iter().map(|s| s.name.clone()).collect::<Vec<_>>();
            CmdError::Usage(format!(
                "case {} has no scenario '{n}'; known: {}",
                case.name,
                known.join(", ")
            ))
        }),
        None => case
            .scenarios
            .first()
            .cloned()
            .ok_or_else(|| CmdError::Usage(format!("case {} has no scenarios", case.name))),
    }
}

fn sim_options(tol: Option<f64>) -> Result<SimOptions, CmdError> {
    let mut opts = SimOptions::default();
    if let Some(t) = tol {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CmdError::Usage("--tol must be a positive number".into()));
        }
        opts.rtol = t;
        opts.atol = t * 1e-2;
    }
    Ok(opts)
}

fn print_trajectory_summary(net: &Network, tr: &Trajectory) {
    for (t, what) in &tr.events_applied {
        println!("t={t:.3}: {what}");
    }
    let last = tr.last();
    match &tr.termination {
        Termination::Completed => {
            println!("completed at t={:.3}: {}", last.t, vmag_summary(net, &last.voltages));
        }
        Termination::Collapsed { t } => {
            println!("voltage collapse at t={t:.3}");
        }
        Termination::Failed { t, reason } => {
            println!("integration failed at t={t:.3}: {reason}");
        }
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CmdError> {
    let case = get_case(&a.case)?;
    let net = &case.network;
    let mut sc = resolve_scenario(&case, a.scenario.as_deref(), a.scenario_file.as_ref())?;
    if let Some(t) = a.t_end {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CmdError::Usage("--t-end must be a positive number".into()));
        }
        sc.t_end = t;
    }
    if let Some(d) = a.dt_out {
        if !(d > 0.0 && d.is_finite()) {
            return Err(CmdError::Usage("--dt-out must be a positive number".into()));
        }
        sc.output_interval = d;
    }
    let opts = sim_options(a.tol)?;
    let tr = simulate(net, &sc, &opts).map_err(CmdError::Solver)?;
    println!("{} / {}", a.case, sc.name);
    print_trajectory_summary(net, &tr);
    if let Some(path) = &a.out {
        write_out(path, &table::trajectory_table(net, &tr).csv())?;
        println!("wrote {}", path.display());
    }
    match &tr.termination {
        Termination::Completed => Ok(()),
        Termination::Collapsed { t } => {
            Err(CmdError::Collapse(format!("voltage collapse at t={t:.3}")))
        }
        Termination::Failed { t, reason } => {
            Err(CmdError::Solver(format!("integration failed at t={t:.3}: {reason}")))
        }
    }
}

fn cmd_portrait(a: &PortraitArgs) -> Result<(), CmdError> {
    let case = get_case(&a.case)?;
    let net = &case.network;
    if a.grid < 2 {
        return Err(CmdError::Usage("--grid must be at least 2".into()));
    }
    let model = crate::dynsim::SimModel::new(net);
    let &bus = model
        .dynamic_buses()
        .first()
        .ok_or_else(|| CmdError::Usage(format!("case {} has no dynamic load states", a.case)))?;
    let axes = PortraitAxes {
        x_bus: bus,
        x_var: FreeVar::G,
        x_range: parse_range(&a.x_range)?,
        x_points: a.grid,
        y_bus: bus,
        y_var: FreeVar::B,
        y_range: parse_range(&a.y_range)?,
        y_points: a.grid,
    };
    let rest = normal_equilibrium(net)
        .map(|eq| eq.admittances)
        .unwrap_or_else(|| crate::algebraic::AdmittanceState::zeros(net.n_constrained()));
    let pf = phase_portrait(net, &axes, &rest);
    println!(
        "sampled {}x{} nodes of (g{}, b{}); {} equilibria in window, {} stable",
        a.grid,
        a.grid,
        bus,
        bus,
        pf.equilibria.len(),
        pf.equilibria.iter().filter(|e| e.is_stable()).count()
    );
    for (i, eq) in pf.equilibria.iter().enumerate() {
        println!("  {}: {}  [{}]", i, vmag_summary(net, &eq.voltages), classification_word(eq));
    }
    if let Some(path) = &a.out {
        write_out(path, &table::field_table(&pf).csv())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_pecs(a: &PecsArgs) -> Result<(), CmdError> {
    let case = get_case(&a.case)?;
    let net = &case.network;
    let sc = resolve_scenario(&case, a.scenario.as_deref(), a.scenario_file.as_ref())?;
    let opts = SimOptions::default();
    let tr = simulate(net, &sc, &opts).map_err(CmdError::Solver)?;
    if let Termination::Failed { t, reason } = &tr.termination {
        return Err(CmdError::Solver(format!("integration failed at t={t:.3}: {reason}")));
    }
    if let Termination::Collapsed { t } = &tr.termination {
        return Err(CmdError::Collapse(format!("scenario collapsed at t={t:.3}")));
    }
    let det = detect_entrapment(net, &tr, &DetectorConfig::default());
    let Some(det) = det else {
        println!("no entrapment detected in {} / {}", a.case, sc.name);
        return Ok(());
    };
    println!(
        "entrapment detected at t={:.3}; matched equilibrium: {}",
        det.t,
        vmag_summary(net, &det.equilibrium.voltages)
    );
    let Some(pulse) = &a.pulse else {
        return Ok(());
    };
    let (p, duration) = {
        let (p, d) = pulse
            .split_once(':')
            .ok_or_else(|| CmdError::Usage(format!("expected --pulse p:duration, got '{pulse}'")))?;
        let p: f64 = p.trim().parse().map_err(|_| {
            CmdError::Usage(format!("expected --pulse p:duration, got '{pulse}'"))
        })?;
        let d: f64 = d.trim().parse().map_err(|_| {
            CmdError::Usage(format!("expected --pulse p:duration, got '{pulse}'"))
        })?;
        (p, d)
    };
    let model = crate::dynsim::SimModel::new(net);
    let bus = match a.pulse_bus {
        Some(b) => b,
        None => *model
            .dynamic_buses()
            .first()
            .ok_or_else(|| CmdError::Usage("case has no dynamic load to pulse".into()))?,
    };
    let q = match net.load(bus) {
        Some(crate::net::LoadModel::DynamicAdmittance { q_set, .. }) => *q_set,
        _ => return Err(CmdError::Usage(format!("bus {bus} is not a dynamic load"))),
    };
    let cmd = PulseCommand { bus, p, q, duration };
    let (outcome, _) = execute_pulse_recovery(net, &det.equilibrium, &cmd);
    match outcome {
        RecoveryOutcome::Recovered => {
            println!("pulse p={p} for {duration}s at bus {bus}: recovered to normal operation");
            Ok(())
        }
        RecoveryOutcome::StillEntrapped => {
            println!("pulse p={p} for {duration}s at bus {bus}: still entrapped");
            Ok(())
        }
        RecoveryOutcome::Diverted { min_vmag } => {
            println!(
                "pulse p={p} for {duration}s at bus {bus}: settled elsewhere (min |V|={min_vmag:.4})"
            );
            Ok(())
        }
        RecoveryOutcome::Collapsed { t } => {
            Err(CmdError::Collapse(format!("recovery pulse collapsed the feeder at t={t:.3}")))
        }
        RecoveryOutcome::Failed { t, reason } => {
            Err(CmdError::Solver(format!("integration failed at t={t:.3}: {reason}")))
        }
    }
}

fn cmd_lsivc(a: &LsivcArgs) -> Result<(), CmdError> {
    let report = lsivc_demonstration(a.dp).map_err(CmdError::Solver)?;
    println!("branch tip power: {:.4}", report.tip_power);
    println!("entrapped setpoint: {:.4}", report.entrapped_power);
    println!("shed: {:.4}", report.shed_dp);
    match report.collapse_time {
        Some(t) => println!("collapsed at t={t:.3}"),
        None => println!("no collapse; remote bus still consumes |P3|={:.6}", report.final_p3),
    }
    if report.collapsed {
        println!("final |P3|={:.6}", report.final_p3);
    }
    if let Some(path) = &a.out {
        let net = builtin_case("three_bus_alt").map_err(CmdError::Usage)?.network;
        write_out(path, &table::trajectory_table(&net, &report.trajectory).csv())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_cases() -> Result<(), CmdError> {
    for name in case_names() {
        let case = builtin_case(name).map_err(CmdError::Usage)?;
        println!("{name}: {}", case.describe);
        for (i, sc) in case.scenarios.iter().enumerate() {
            let default = if i == 0 { " (default)" } else { "" };
            println!("  - {}{default}: {}", sc.name, sc.describe);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("feedersim").chain(args.iter().copied()))
    }

    #[test]
    fn cases_lists_everything() {
        assert_eq!(run_args(&["cases"]), EXIT_OK);
    }

    #[test]
    fn unknown_case_is_a_usage_error() {
        assert_eq!(run_args(&["solve", "--case", "no_such_case"]), EXIT_USAGE);
        assert_eq!(run_args(&["simulate", "--case", "three_bus_base", "--scenario", "nope"]), EXIT_USAGE);
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        assert_eq!(run_args(&["solve"]), EXIT_USAGE);
        assert_eq!(run_args(&["frobnicate"]), EXIT_USAGE);
        assert_eq!(run_args(&["trace", "--case", "three_bus_base", "--free-bus", "1"]), EXIT_USAGE);
    }

    #[test]
    fn malformed_scenario_file_is_a_parse_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "this is not a scenario").unwrap();
        let path = f.path().to_str().unwrap().to_string();
        assert_eq!(
            run_args(&["simulate", "--case", "three_bus_base", "--scenario-file", &path]),
            EXIT_PARSE
        );
    }

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("-2:3.5").unwrap(), (-2.0, 3.5));
        assert!(parse_range("5:1").is_err());
        assert!(parse_range("abc").is_err());
    }
}
