use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vnoc::harness::{compare, load_config, run_once, run_sweep, stats_json, HarnessError};
use vnoc::manager::Mode;
use vnoc::stats::RunStats;

#[derive(Parser)]
#[command(name = "vnoc", version, about = "Cycle-level simulator of a virtualized NoC-based reconfigurable system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and emit its statistics as JSON.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write statistics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the event trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Baseline and vnoc runs for several task counts; emits a speedup CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        tasks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Makespan ratio of two statistics files (A / B).
    Compare { a: PathBuf, b: PathBuf },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "baseline" => Ok(Mode::Baseline),
        "vnoc" => Ok(Mode::Vnoc),
        _ => Err(format!("unknown mode {s:?}; expected baseline or vnoc")),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| HarnessError::Io { path: p.display().to_string(), message: e.to_string() }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_stats(path: &Path) -> Result<RunStats, HarnessError> {
    let io = |e: &dyn std::fmt::Display| HarnessError::Io { path: path.display().to_string(), message: e.to_string() };
    let text = std::fs::read_to_string(path).map_err(|e| io(&e))?;
    serde_json::from_str(&text).map_err(|e| io(&e))
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run { config, mode, seed, out, trace } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = trace {
                cfg.trace = Some(t.display().to_string());
            }
            let stats = run_once(&cfg)?;
            emit(out.as_deref(), &stats_json(&stats))
        }
        Command::Sweep { config, tasks, out } => {
            let cfg = load_config(&config)?;
            let report = run_sweep(&cfg, &tasks)?;
            emit(out.as_deref(), &report.to_csv())
        }
        Command::Compare { a, b } => {
            let (a, b) = (read_stats(&a)?, read_stats(&b)?);
            let r = compare(&a, &b)?;
            emit(None, &format!("a_makespan,b_makespan,ratio\n{},{},{r:.4}\n", a.makespan_cycles, b.makespan_cycles))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vnoc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
