use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use star_sim::harness::{
    gen_workload, gen_zipf, report, report_csv, run_with, RunConfig, RunOptions, Stats, Trace,
    Workload,
};
use star_sim::{Error, Result};

#[derive(Parser)]
#[command(name = "star-sim", version, about = "Secure-NVM metadata crash-recovery simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic trace file.
    GenTrace {
        #[arg(long)]
        workload: String,
        #[arg(long, default_value = "16MiB")]
        region_bytes: String,
        /// Defaults to the region size.
        #[arg(long)]
        mem_bytes: Option<String>,
        #[arg(long, default_value_t = 100_000)]
        ops: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Zipf exponent (zipf workload only).
        #[arg(long)]
        zipf_s: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a trace and write its stats JSON.
    Run(RunArgs),
    /// Replay a trace with crash injection and audit every recovered image.
    CrashTest(RunArgs),
    /// Compare stats files; writes CSV and JSON tables.
    Report {
        files: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mem_bytes: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    aw_mode: Option<String>,
    #[arg(long)]
    adr_lines: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Crash after K events (comma-separated list allowed).
    #[arg(long)]
    crash_at: Option<String>,
    /// Crash at N random points.
    #[arg(long)]
    crash_random: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, trace: &Trace) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("mem_bytes", &self.mem_bytes),
            ("scheme", &self.scheme),
            ("aw_mode", &self.aw_mode),
            ("adr_lines", &self.adr_lines),
            ("seed", &self.seed),
            ("crash_at", &self.crash_at),
            ("crash_random", &self.crash_random),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if !cfg.mem_explicit {
            cfg.engine.mem_bytes = trace.mem_bytes;
        }
        Ok(cfg)
    }
}

fn size(v: &str) -> Result<u64> {
    let mut c = RunConfig::default();
    c.set("mem_bytes", v)?;
    Ok(c.engine.mem_bytes)
}

fn run_cmd(args: &RunArgs, audit: bool) -> Result<ExitCode> {
    let trace = Trace::load(&args.trace)?;
    let cfg = args.config(&trace)?;
    let mut out = run_with(&cfg.engine, &trace, &cfg.crash, RunOptions { audit, shadow: false })?;
    out.stats.label = args
        .trace
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let json = out.stats.to_json()?;
    match &args.out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    if audit {
        for c in &out.crashes {
            let verdict = match (&c.recovery, &c.audit_error) {
                (_, Some(e)) => format!("FAIL {e}"),
                (Some(r), None) if !r.verified() => "FAIL root mismatch".to_string(),
                (Some(r), None) => format!("ok reads={} time_ns={}", r.reads, r.time_ns),
                (None, None) => "not recoverable".to_string(),
            };
            eprintln!("crash @{:>9} dirty={:>6} {verdict}", c.event_index, c.dirty_lines);
        }
        if out.stats.recovery_failures > 0 {
            eprintln!("{} of {} crash points failed", out.stats.recovery_failures, out.crashes.len());
            return Ok(ExitCode::from(4));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::GenTrace { workload, region_bytes, mem_bytes, ops, seed, zipf_s, out } => {
            let w: Workload = workload.parse()?;
            let region = size(&region_bytes)?;
            let mem = match mem_bytes {
                Some(m) => size(&m)?,
                None => region,
            };
            let trace = match (w, zipf_s) {
                (Workload::Zipf, Some(s)) => gen_zipf(region, mem, ops, seed, s)?,
                (_, Some(_)) => return Err(Error::Config("--zipf-s needs the zipf workload".into())),
                _ => gen_workload(w, region, mem, ops, seed)?,
            };
            trace.save(&out)?;
            eprintln!("{} events ({} writes) -> {}", trace.events.len(), trace.writes(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run(args) => run_cmd(&args, false),
        Cmd::CrashTest(args) => run_cmd(&args, true),
        Cmd::Report { files, csv, json } => {
            let stats = files
                .iter()
                .map(|p| Stats::from_json(&std::fs::read_to_string(p)?))
                .collect::<Result<Vec<_>>>()?;
            let rows = report(&stats)?;
            let table = report_csv(&rows);
            match csv {
                Some(p) => std::fs::write(p, &table)?,
                None => print!("{table}"),
            }
            if let Some(p) = json {
                std::fs::write(p, serde_json::to_string_pretty(&rows)? + "\n")?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("star-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
