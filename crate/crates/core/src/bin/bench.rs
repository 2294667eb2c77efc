use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hacommit::audit::audit;
use hacommit::bench::{run_sweep, write_csv, write_throughput_csv, ResultRow, SweepConfig};
use hacommit::experiment::{run_experiment, ExperimentConfig, RunOutput};
use hacommit::serial::{check_serializable, committed_footprints, MAX_WINDOW};
use hacommit::sim::{parse_fault_schedule, DelayDist};
use hacommit::topology::Topology;
use hacommit::trace::{EventTrace, Protocol};
use hacommit::types::Isolation;

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Run, audit and sweep commit-protocol experiments in the simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Check a recorded trace for safety violations.
    Audit {
        #[arg(long)]
        trace: PathBuf,
        /// Also search for a serial order of the committed transactions.
        #[arg(long)]
        serializable: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run every point of a JSON sweep description.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    ops_per_txn: Option<u32>,
    #[arg(long)]
    read_fraction: Option<f64>,
    #[arg(long)]
    nodes: Option<u32>,
    #[arg(long)]
    shards: Option<u32>,
    #[arg(long)]
    replicas: Option<u32>,
    #[arg(long)]
    clients: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds during which clients issue transactions.
    #[arg(long)]
    duration_s: Option<f64>,
    /// Transactions per client, when no duration is given.
    #[arg(long)]
    txns: Option<u64>,
    #[arg(long)]
    fault_schedule: Option<PathBuf>,
    #[arg(long, value_parser = parse_isolation)]
    isolation: Option<Isolation>,
    /// Constant one-way message delay.
    #[arg(long)]
    delay_us: Option<u64>,
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Coordinator-failure timeout of the replicas.
    #[arg(long)]
    timeout_ms: Option<f64>,
    /// Leave the first and last quarter out of the metrics.
    #[arg(long)]
    elide: bool,
    /// Do not write the trace file.
    #[arg(long)]
    no_trace: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_isolation(s: &str) -> Result<Isolation, String> {
    match s {
        "serializable" => Ok(Isolation::Serializable),
        "read-committed" => Ok(Isolation::ReadCommitted),
        _ => Err(format!(
            "unknown isolation {s:?} (expected serializable|read-committed)"
        )),
    }
}

fn secs(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

impl RunArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.protocol {
            c.protocol = p;
        }
        let t = c.topology;
        c.topology = Topology {
            nodes: self.nodes.unwrap_or(t.nodes),
            shards: self.shards.unwrap_or(t.shards),
            replicas: self.replicas.unwrap_or(t.replicas),
        };
        let w = &mut c.workload;
        w.ops_per_txn = self.ops_per_txn.unwrap_or(w.ops_per_txn);
        w.read_fraction = self.read_fraction.unwrap_or(w.read_fraction);
        w.clients = self.clients.unwrap_or(w.clients);
        w.isolation = self.isolation.unwrap_or(w.isolation);
        if let Some(d) = self.duration_s {
            w.duration = Some(secs(d));
            w.txn_count = self.txns;
        } else if let Some(n) = self.txns {
            w.txn_count = Some(n);
        }
        if let Some(s) = self.seed {
            c.sim.seed = s;
        }
        if let Some(d) = self.delay_us {
            c.sim.one_way_delay = DelayDist::Constant { us: d };
        }
        if let Some(r) = self.drop_rate {
            c.sim.drop_rate = r;
        }
        if let Some(p) = &self.fault_schedule {
            c.sim.fault_schedule = parse_fault_schedule(&fs::read_to_string(p)?)?;
        }
        if let Some(t) = self.timeout_ms {
            c.participant = c.participant.with_timeout((t * 1e3).round() as u64);
        }
        c.elide |= self.elide;
        Ok(c)
    }
}

fn write_run(dir: &Path, config: &ExperimentConfig, out: &RunOutput, trace: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let row = ResultRow::new(config, &out.metrics);
    write_csv(&[row], File::create(dir.join("results.csv"))?)?;
    write_throughput_csv(&out.metrics, File::create(dir.join("throughput.csv"))?)?;
    serde_json::to_writer_pretty(File::create(dir.join("metrics.json"))?, &out.metrics)?;
    serde_json::to_writer_pretty(File::create(dir.join("config.json"))?, config)?;
    if trace {
        let mut w = BufWriter::new(File::create(dir.join("trace.jsonl"))?);
        out.trace.write_jsonl(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn print_table(rows: &[ResultRow]) {
    println!(
        "{:<12} {:>4} {:>6} {:>8} {:>7} {:>7} {:>10} {:>8} {:>10} {:>6}",
        "protocol",
        "ops",
        "seed",
        "commits",
        "aborts",
        "retries",
        "mean_us",
        "p99_us",
        "tps",
        "delays"
    );
    for r in rows {
        println!(
            "{:<12} {:>4} {:>6} {:>8} {:>7} {:>7} {:>10.1} {:>8} {:>10.1} {:>6.2}",
            r.protocol,
            r.ops_per_txn,
            r.seed,
            r.commits,
            r.aborts,
            r.retries,
            r.mean_latency_us,
            r.p99_latency_us,
            r.throughput_tps,
            r.msg_delays_per_commit
        );
    }
}

fn run(args: RunArgs) -> Result<bool> {
    let config = args.build()?;
    let out = run_experiment(&config)?;
    write_run(&args.out, &config, &out, !args.no_trace)?;
    print_table(&[ResultRow::new(&config, &out.metrics)]);
    let report = audit(&out.trace);
    println!("audit: {}", report.summary());
    Ok(report.passed())
}

fn audit_cmd(path: &Path, serializable: bool, json: bool) -> Result<bool> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let trace = EventTrace::read_jsonl(BufReader::new(file))?;
    let report = audit(&trace);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{}", report.summary());
        for v in &report.violations {
            let tid = v.tid.map(|t| t.to_string()).unwrap_or_default();
            println!("  {} {} events {:?}: {}", v.check, tid, v.events, v.detail);
        }
        for b in &report.blocked {
            println!(
                "  blocked {} at {} holding {:?} (coordinator crashed: {})",
                b.tid, b.node, b.keys, b.coordinator_crashed
            );
        }
    }
    let mut ok = report.passed();
    if serializable {
        let txns = committed_footprints(&trace);
        match check_serializable(&txns, MAX_WINDOW, None) {
            Ok(w) => println!("serializable: witness over {} transactions", w.len()),
            Err(e) => {
                println!("serializable: {e}");
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn sweep(config: &Path, out: &Path) -> Result<bool> {
    let sweep =
        SweepConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if sweep.protocols.is_empty() || sweep.ops_per_txn.is_empty() || sweep.seeds.is_empty() {
        bail!("sweep needs at least one protocol, ops_per_txn value and seed");
    }
    let results = run_sweep(&sweep)?;
    let rows: Vec<ResultRow> = results
        .iter()
        .map(|(c, o)| ResultRow::new(c, &o.metrics))
        .collect();
    fs::create_dir_all(out)?;
    write_csv(&rows, File::create(out.join("results.csv"))?)?;
    print_table(&rows);
    let mut ok = true;
    for (c, o) in &results {
        let report = audit(&o.trace);
        if !report.passed() {
            ok = false;
            println!(
                "audit {} ops={} seed={}: {}",
                c.protocol.name(),
                c.workload.ops_per_txn,
                c.sim.seed,
                report.summary()
            );
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Audit {
            trace,
            serializable,
            json,
        } => audit_cmd(&trace, serializable, json),
        Command::Sweep { config, out } => sweep(&config, &out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
