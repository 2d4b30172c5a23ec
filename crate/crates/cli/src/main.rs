use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use fedchain::exec::Exec;
use fedchain::experiment::{run_benchmark, BenchmarkSpec};
use fedchain::kv::KvFile;
use fedchain::net::sim::SimConfig;
use fedchain::node::{NodeConfig, NodeKey};
use fedchain::runtime::run_node;
use fedchain::simulation::{run_simulation, write_trace, SimulationSpec};

#[derive(Parser)]
#[command(name = "fedchain", version, about = "Federated learning over a proof-of-work chain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a node address (40 hex characters).
    Keygen {
        /// Derive the key from this seed instead of the system RNG.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a node until interrupted.
    Run(RunArgs),
    /// Run an in-process multi-node simulation and write its trace and summary.
    Simulate(SimArgs),
    /// Run the federated-versus-centralized accuracy grid.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated roles, overriding the config file.
    #[arg(long)]
    roles: Option<String>,
    /// Override any config key, e.g. `--set net.bootstrap=10.0.0.1:9333`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Exit once the chain reaches this height.
    #[arg(long)]
    rounds: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, default_value_t = 5)]
    rounds: u64,
    #[arg(long, default_value_t = 0.0)]
    drop: f64,
    #[arg(long, default_value_t = 0.0)]
    duplicate: f64,
    #[arg(long, default_value_t = 1)]
    max_delay: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Run training and mining jobs on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Key-value spec file; the full default grid if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequential: bool,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn load_node_config(args: &RunArgs) -> Result<NodeConfig> {
    let mut kv = KvFile::from_path(&args.config).map_err(usage)?;
    if let Some(r) = &args.roles {
        kv.set("roles", r.as_str());
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    NodeConfig::from_kv(&kv).map_err(usage)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = load_node_config(&args)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)).context("installing signal handler")?;
    let report = run_node(config, stop, args.rounds)?;
    println!("height {} tip {}", report.height, report.tip);
    Ok(())
}

fn cmd_simulate(args: SimArgs) -> Result<()> {
    if args.nodes == 0 {
        return Err(usage("--nodes must be at least 1"));
    }
    let net = SimConfig::new(args.drop, args.duplicate, args.max_delay, args.seed).map_err(usage)?;
    let spec = SimulationSpec::new(args.nodes, args.rounds, net);
    let run = run_simulation(&spec, exec(args.sequential)).map_err(usage)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let trace_path = args.out.join("trace.jsonl");
    let mut w = BufWriter::new(fs::File::create(&trace_path).with_context(|| trace_path.display().to_string())?);
    write_trace(&mut w, &run.trace)?;
    let summary_path = args.out.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&run.summary)? + "\n")?;
    info!(
        "network: {} sent, {} dropped, {} delivered",
        run.network.sent, run.network.dropped, run.network.delivered
    );
    println!(
        "{} nodes converged={} height={} trace={} summary={}",
        run.summary.nodes,
        run.summary.converged,
        run.summary.final_heights.first().copied().unwrap_or(0),
        trace_path.display(),
        summary_path.display()
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => BenchmarkSpec::from_kv(&KvFile::from_path(p).map_err(usage)?).map_err(usage)?,
        None => BenchmarkSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate().map_err(usage)?;
    let report = run_benchmark(&spec, exec(args.sequential))?;
    write_output(&args.out, &report.to_csv())?;
    println!(
        "{} rows, max federated-centralized gap {:.2} points, wrote {}",
        report.rows.len(),
        100.0 * report.max_gap(),
        args.out.display()
    );
    Ok(())
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDCHAIN_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Keygen { seed } => {
            let key = seed.map_or_else(NodeKey::random, NodeKey::from_seed);
            println!("{}", key.address().to_hex());
            Ok(())
        }
        Command::Run(a) => cmd_run(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
