//! `proxid`: identification, oracle verification and simulation from the
//! command line.
//!
//! Exit codes: 0 success, 1 input error, 2 not identified, 3 verification
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use proxid_core::estimand::{render_latex, render_text, simplify, Estimand};
use proxid_core::graph::{parse_graph, MixedGraph, VSet};
use proxid_core::id::{identify, CausalQuery, IdVerdict};
use proxid_core::oracle::RESIDUAL_TOL;
use proxid_core::proximal::{proximal_identify, SearchConfig};
use proxid_core::sim::{cell_seed, run_experiment, ExperimentConfig, MetricReport};
use proxid_core::verify::{run_trial, TrialOptions};

const NOT_IDENTIFIED: u8 = 2;
const VERIFY_FAILED: u8 = 3;
/// Max-abs error allowed between an evaluated estimand and the oracle truth.
const VERIFY_TOL: f64 = 1e-8;
const SEED_TRIAL: u64 = 6;

#[derive(Parser)]
#[command(name = "proxid", version, about = "Classical and proximal causal identification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Identify a query and print the estimand.
    Identify(IdentifyArgs),
    /// Proximal identification with the step-by-step derivation trace.
    Pid(PidArgs),
    /// Compare the estimand against random discrete SCMs.
    Verify(VerifyArgs),
    /// Run a simulation experiment from a config file.
    Simulate(SimulateArgs),
    /// Re-render the table of a finished experiment.
    Report(ReportArgs),
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    query: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    /// Largest proxy set tried per proximal step.
    #[arg(long, default_value_t = 3)]
    max_proxies: usize,
    /// Largest control set tried per proximal step.
    #[arg(long, default_value_t = 3)]
    max_controls: usize,
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        SearchConfig { max_proxy_set: self.max_proxies, max_control_set: self.max_controls, cards: None }
    }
}

#[derive(Args)]
struct IdentifyArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    proximal: bool,
    #[command(flatten)]
    search: SearchArgs,
    /// Write the estimand JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    latex: bool,
}

#[derive(Args)]
struct PidArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    proximal: bool,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum CPT entry of the random SCMs.
    #[arg(long, default_value_t = 0.05)]
    floor: f64,
    /// Make the child's CPT ignore this parent, e.g. `U->W`.
    #[arg(long)]
    sever: Vec<String>,
    /// Directory for SCMs that breach the tolerance.
    #[arg(long)]
    replay_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of `simulate`, or a report.json.
    #[arg(long = "in")]
    input: PathBuf,
}

/// Failures carrying a non-default exit code.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Command::Identify(a) => cmd_identify(&a),
        Command::Pid(a) => cmd_pid(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Exit>() {
            Some(Exit(code)) => ExitCode::from(*code),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load(inputs: &Inputs) -> Result<(MixedGraph, CausalQuery)> {
    let g = parse_graph(&read(&inputs.graph)?).with_context(|| format!("graph {}", inputs.graph.display()))?;
    let q = CausalQuery::from_json(&read(&inputs.query)?).with_context(|| format!("query {}", inputs.query.display()))?;
    q.validate(&g)?;
    Ok((g, q))
}

/// Runs the requested engine. The trace is empty for the classical one.
fn run_engine(g: &MixedGraph, q: &CausalQuery, proximal: bool, search: &SearchArgs) -> Result<(IdVerdict, String)> {
    if proximal {
        let out = proximal_identify(g, q, &search.config())?;
        let trace = out.render_trace();
        Ok((out.verdict, trace))
    } else {
        Ok((identify(g, q)?, String::new()))
    }
}

fn not_identified(district: &VSet, stuck: &VSet) -> anyhow::Error {
    println!("not identified");
    println!("witness district: {}", fmt_vset(district));
    println!("unfixable: {}", fmt_vset(stuck));
    anyhow!(Exit(NOT_IDENTIFIED))
}

fn fmt_vset(s: &VSet) -> String {
    format!("{{{}}}", s.iter().cloned().collect::<Vec<_>>().join(","))
}

fn estimand_json(e: &Estimand, trace: &str) -> serde_json::Value {
    json!({
        "estimand": e.to_json(),
        "text": render_text(&e.root),
        "trace": trace.lines().collect::<Vec<_>>(),
    })
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_identify(a: &IdentifyArgs) -> Result<()> {
    let (g, q) = load(&a.inputs)?;
    let (verdict, trace) = run_engine(&g, &q, a.proximal, &a.search)?;
    let e = match verdict {
        IdVerdict::Identified(e) => simplify(&e),
        IdVerdict::NotIdentified { district, stuck } => return Err(not_identified(&district, &stuck)),
    };
    print!("{}", e.render_derivation());
    if a.latex {
        println!("{}", render_latex(&e.inline()));
    }
    if let Some(out) = &a.out {
        write_json(out, &estimand_json(&e, &trace))?;
    }
    Ok(())
}

fn cmd_pid(a: &PidArgs) -> Result<()> {
    let (g, q) = load(&a.inputs)?;
    let (verdict, trace) = run_engine(&g, &q, true, &a.search)?;
    print!("{trace}");
    let e = match verdict {
        IdVerdict::Identified(e) => simplify(&e),
        IdVerdict::NotIdentified { district, stuck } => return Err(not_identified(&district, &stuck)),
    };
    print!("{}", e.render_derivation());
    if let Some(out) = &a.out {
        write_json(out, &estimand_json(&e, &trace))?;
    }
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let (g, q) = load(&a.inputs)?;
    let (verdict, _) = run_engine(&g, &q, a.proximal, &a.search)?;
    let e = match verdict {
        IdVerdict::Identified(e) => e,
        IdVerdict::NotIdentified { district, stuck } => return Err(not_identified(&district, &stuck)),
    };
    if a.trials == 0 {
        eprintln!("warning: no trials requested");
        println!("trials 0: nothing to verify");
        return Ok(());
    }
    let opts = TrialOptions { floor: a.floor, sever: a.sever.clone() };
    let mut max_err: f64 = 0.0;
    let mut skipped = 0;
    let mut breaches = 0;
    for i in 0..a.trials {
        let seed = cell_seed(a.seed, SEED_TRIAL, i as u64, 0, 0);
        let t = run_trial(&e, &g, &q, &opts, seed)?;
        if t.skipped {
            skipped += 1;
            continue;
        }
        max_err = max_err.max(t.error);
        if t.error > VERIFY_TOL {
            breaches += 1;
            let replay = json!({ "trial": i, "seed": seed, "error": t.error, "scm": t.scm.to_json() });
            match &a.replay_dir {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    write_json(&dir.join(format!("trial_{i}.json")), &replay)?;
                }
                None => eprintln!("{}", serde_json::to_string(&replay)?),
            }
        }
    }
    let checked = a.trials - skipped;
    println!("trials {}  checked {checked}  skipped (rank check failed) {skipped}", a.trials);
    println!("rank-check pass rate {:.3}", checked as f64 / a.trials as f64);
    println!("max abs error {max_err:.3e} (tolerance {VERIFY_TOL:.0e}, bridge residual tolerance {RESIDUAL_TOL:.0e})");
    if breaches > 0 {
        println!("FAILED: {breaches} trial(s) over tolerance");
        return Err(anyhow!(Exit(VERIFY_FAILED)));
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::parse(&read(&a.config)?)?;
    if let Ok(s) = std::env::var("PROXID_SEED") {
        cfg.seed = s.trim().parse().with_context(|| format!("PROXID_SEED `{s}` is not an integer"))?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs.unwrap_or(0)).build()?;
    let report = pool.install(|| run_experiment(&cfg))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let table = report.render_table();
    fs::write(a.out.join("results.csv"), report.to_csv())?;
    fs::write(a.out.join("estimates.csv"), report.cells_csv())?;
    fs::write(a.out.join("table.txt"), &table)?;
    write_json(&a.out.join("report.json"), &report.to_json())?;
    print!("{table}");
    let failures = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failures > 0 {
        println!("{failures} cell(s) failed; see report.json");
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let path = if a.input.is_dir() { a.input.join("report.json") } else { a.input.clone() };
    let v: serde_json::Value = serde_json::from_str(&read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    let report = MetricReport::from_json(&v)?;
    print!("{}", report.render_table());
    Ok(())
}

