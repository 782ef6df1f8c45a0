//! Command-line front end for the simulator.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedpool_core::sim::{self, ExperimentConfig, MetricsReport, RunOutput, TraceGenConfig, TraceRecord};

#[derive(Parser)]
#[command(name = "fedpool", version, about = "Federated-learning resource manager simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write events.jsonl, metrics.json, metrics.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several configurations and write one CSV per metric.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Client counts to sweep; defaults to each config's own value.
        #[arg(long, value_delimiter = ',')]
        clients: Vec<usize>,
        /// Repeats per setting, with seeds `seed, seed+1, ...`; metrics are averaged.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
    },
    /// Generate a synthetic client trace.
    GenTrace {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        out: PathBuf,
        /// Trace length in seconds.
        #[arg(long, default_value_t = 43200.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1800.0)]
        mean_online: f64,
        #[arg(long, default_value_t = 1800.0)]
        mean_offline: f64,
        #[arg(long, default_value_t = 4)]
        regions: u32,
    },
    /// Re-verify run invariants from an event log; exits nonzero on violations.
    Audit {
        #[arg(long)]
        log: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    sim::read_trace(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_outputs(out: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(out)?;
    sim::events::write_log(&output.log, BufWriter::new(File::create(out.join("events.jsonl"))?))?;
    let metrics = serde_json::json!({ "report": output.report, "stats": output.stats });
    let mut f = BufWriter::new(File::create(out.join("metrics.json"))?);
    serde_json::to_writer_pretty(&mut f, &metrics)?;
    f.write_all(b"\n")?;
    output.report.write_csv(BufWriter::new(File::create(out.join("metrics.csv"))?))?;
    output.report.write_ledger(BufWriter::new(File::create(out.join("ledger.csv"))?))?;
    Ok(())
}

fn summary(r: &MetricsReport) -> String {
    format!(
        "{:?} makespan={:.1}s utilization={:.4} throughput={:.4}/s avg_jct={:.1}s failure_rate={:.4}",
        r.status, r.makespan, r.resource_utilization, r.throughput, r.avg_jct, r.failure_rate
    )
}

fn compare(configs: &[PathBuf], trace: &Path, out: &Path, clients: &[usize], repeats: u64) -> Result<()> {
    if repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let trace = load_trace(trace)?;
    let mut loaded = Vec::new();
    for path in configs {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        loaded.push((name, load_config(path)?));
    }
    fs::create_dir_all(out)?;
    // metric -> client count -> config name -> mean
    let mut table: BTreeMap<&'static str, BTreeMap<usize, BTreeMap<String, f64>>> = BTreeMap::new();
    let mut runs = BufWriter::new(File::create(out.join("runs.csv"))?);
    writeln!(runs, "config,seed,{}", sim::metrics::CSV_HEADER)?;
    for (name, base) in &loaded {
        let counts = if clients.is_empty() {
            vec![base.num_clients]
        } else {
            clients.to_vec()
        };
        for n in counts {
            let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
            for k in 0..repeats {
                let mut cfg = base.clone();
                cfg.num_clients = n;
                cfg.seed = base.seed + k;
                let output = sim::run(&cfg, &trace).with_context(|| format!("running {name} with {n} clients"))?;
                writeln!(runs, "{name},{},{}", cfg.seed, output.report.csv_row())?;
                eprintln!("{name} n={n} seed={}: {}", cfg.seed, summary(&output.report));
                for (metric, v) in output.report.scalars() {
                    *sums.entry(metric).or_default() += v;
                }
            }
            for (metric, total) in sums {
                table
                    .entry(metric)
                    .or_default()
                    .entry(n)
                    .or_default()
                    .insert(name.clone(), total / repeats as f64);
            }
        }
    }
    let names: Vec<&String> = loaded.iter().map(|(n, _)| n).collect();
    for (metric, rows) in &table {
        let mut f = BufWriter::new(File::create(out.join(format!("{metric}.csv")))?);
        write!(f, "num_clients")?;
        for n in &names {
            write!(f, ",{n}")?;
        }
        writeln!(f)?;
        for (n, cols) in rows {
            write!(f, "{n}")?;
            for name in &names {
                match cols.get(*name) {
                    Some(v) => write!(f, ",{v}")?,
                    None => write!(f, ",")?,
                }
            }
            writeln!(f)?;
        }
    }
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, trace, out } => {
            let cfg = load_config(&config)?;
            let trace = load_trace(&trace)?;
            let output = sim::run(&cfg, &trace)?;
            write_outputs(&out, &output)?;
            println!("{}", summary(&output.report));
        }
        Command::Compare {
            configs,
            trace,
            out,
            clients,
            repeats,
        } => compare(&configs, &trace, &out, &clients, repeats)?,
        Command::GenTrace {
            seed,
            clients,
            out,
            horizon,
            mean_online,
            mean_offline,
            regions,
        } => {
            let records = sim::generate(&TraceGenConfig {
                seed,
                clients,
                horizon,
                mean_online,
                mean_offline,
                regions,
            });
            sim::write_trace(&records, BufWriter::new(File::create(&out)?))?;
            println!("wrote {} sessions for {clients} clients to {}", records.len(), out.display());
        }
        Command::Audit { log } => {
            let f = File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let records = sim::events::read_log(BufReader::new(f))?;
            let report = sim::audit(&records);
            for v in &report.violations {
                println!("VIOLATION {v}");
            }
            println!(
                "{} records, {} bindings, {} violations",
                report.records,
                report.bindings,
                report.violations.len()
            );
            if !report.is_clean() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
