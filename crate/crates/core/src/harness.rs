//! Run, sweep and compare: the reproduction surface used by the CLI.

use std::fs::File;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{parse_config, ConfigError, SimConfig};
use crate::engine::{SimError, Simulation};
use crate::manager::Mode;
use crate::stats::RunStats;
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("runs are not comparable: workload digest {a} vs {b}")]
    ConfigMismatch { a: String, b: String },
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    /// 1 usage, 2 configuration, 3 simulation fault, 4 watchdog.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::ConfigMismatch { .. } => 1,
            HarnessError::Io { .. } | HarnessError::Config(_) | HarnessError::Sim(SimError::Config(_)) => 2,
            HarnessError::Sim(SimError::WatchdogTimeout { .. }) => 4,
            HarnessError::Sim(_) => 3,
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub fn load_config(path: &Path) -> Result<SimConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(parse_config(&text)?)
}

/// Builds and runs one simulation, writing the trace if the config names one.
pub fn run_once(config: &SimConfig) -> Result<RunStats, HarnessError> {
    let trace = match &config.trace {
        Some(p) => {
            let path = Path::new(p);
            Trace::to_writer(Box::new(File::create(path).map_err(|e| io_error(path, e))?))
        }
        None => Trace::disabled(),
    };
    Ok(Simulation::with_trace(config, trace)?.run()?)
}

/// Runs without any trace output.
pub fn run_quiet(config: &SimConfig) -> Result<RunStats, SimError> {
    Simulation::build(&SimConfig { trace: None, ..config.clone() })?.run()
}

pub fn stats_json(stats: &RunStats) -> String {
    let mut s = serde_json::to_string_pretty(stats).expect("stats serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupPoint {
    pub n: usize,
    pub baseline_makespan: u64,
    pub vnoc_makespan: u64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SpeedupReport {
    pub points: Vec<SpeedupPoint>,
}

impl SpeedupReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,baseline_makespan,vnoc_makespan,speedup\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{:.4}\n", p.n, p.baseline_makespan, p.vnoc_makespan, p.speedup));
        }
        s
    }
}

pub fn ratio(a: u64, b: u64) -> f64 {
    a as f64 / b as f64
}

/// Runs independent jobs on a small worker pool; output order matches input.
pub fn parallel_map<T: Sync, R: Send>(jobs: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    if workers == 1 {
        // Also the path taken where threads are unavailable.
        return jobs.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Baseline and vnoc runs for each task count, same seed and workload.
pub fn run_sweep(config: &SimConfig, task_counts: &[usize]) -> Result<SpeedupReport, HarnessError> {
    if task_counts.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one task count".into()));
    }
    let mut counts = task_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let jobs: Vec<SimConfig> = counts
        .iter()
        .flat_map(|&n| [Mode::Baseline, Mode::Vnoc].map(|m| config.with_tasks(n).with_mode(m)))
        .collect();
    let results = parallel_map(&jobs, run_quiet);
    let mut points = Vec::new();
    for (n, pair) in counts.iter().zip(results.chunks(2)) {
        let base = pair[0].clone()?.makespan_cycles;
        let vnoc = pair[1].clone()?.makespan_cycles;
        points.push(SpeedupPoint { n: *n, baseline_makespan: base, vnoc_makespan: vnoc, speedup: ratio(base, vnoc) });
    }
    Ok(SpeedupReport { points })
}

/// Ratio `a.makespan / b.makespan` of two runs of the same workload.
pub fn compare(a: &RunStats, b: &RunStats) -> Result<f64, HarnessError> {
    if a.workload_digest != b.workload_digest {
        return Err(HarnessError::ConfigMismatch { a: a.workload_digest.clone(), b: b.workload_digest.clone() });
    }
    Ok(ratio(a.makespan_cycles, b.makespan_cycles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{DecisionCounts, NetworkStats};

    fn stats(makespan: u64, digest: &str) -> RunStats {
        RunStats {
            mode: Mode::Vnoc,
            seed: 1,
            config_digest: "0".into(),
            workload_digest: digest.into(),
            makespan_cycles: makespan,
            cycles_simulated: makespan,
            verified_replies: 0,
            decisions: DecisionCounts::default(),
            tasks: Vec::new(),
            pes: Vec::new(),
            network: NetworkStats { packets: 0, flits: 0, mean_packet_latency: 0.0, max_packet_latency: 0 },
        }
    }

    #[test]
    fn compare_ratios() {
        assert_eq!(compare(&stats(10000, "x"), &stats(5000, "x")).unwrap(), 2.0);
        assert_eq!(compare(&stats(777, "x"), &stats(777, "x")).unwrap(), 1.0);
        assert!(matches!(compare(&stats(1, "x"), &stats(1, "y")), Err(HarnessError::ConfigMismatch { .. })));
    }

    #[test]
    fn csv_has_four_decimals() {
        let r = SpeedupReport { points: vec![SpeedupPoint { n: 2, baseline_makespan: 3, vnoc_makespan: 2, speedup: 1.5 }] };
        assert_eq!(r.to_csv(), "n,baseline_makespan,vnoc_makespan,speedup\n2,3,2,1.5000\n");
    }

    #[test]
    fn parallel_map_keeps_order() {
        let jobs: Vec<u64> = (0..50).collect();
        assert_eq!(parallel_map(&jobs, |x| x * x), jobs.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn single_task_sweep_is_neutral() {
        let mut cfg = SimConfig::default();
        cfg.workload.num_requests = 2;
        let r = run_sweep(&cfg, &[1]).unwrap();
        assert_eq!(r.points[0].speedup, 1.0);
        assert!(matches!(run_sweep(&cfg, &[]), Err(HarnessError::Usage(_))));
    }

    #[test]
    fn exit_code_mapping() {
        use crate::engine::SimFault;
        let sim = |e| HarnessError::Sim(e).exit_code();
        assert_eq!(HarnessError::Usage("x".into()).exit_code(), 1);
        assert_eq!(HarnessError::ConfigMismatch { a: "a".into(), b: "b".into() }.exit_code(), 1);
        assert_eq!(HarnessError::Io { path: "p".into(), message: "m".into() }.exit_code(), 2);
        assert_eq!(HarnessError::Config(ConfigError::Semantic("s".into())).exit_code(), 2);
        assert_eq!(sim(SimError::Config(ConfigError::Semantic("s".into()))), 2);
        assert_eq!(sim(SimError::Fault { cycle: 3, fault: SimFault::StrayDelivery { node: crate::model::MeshCoordinate::new(0, 0), kind: crate::model::MessageKind::MapReq } }), 3);
        assert_eq!(sim(SimError::WatchdogTimeout { cycle: 9, stuck: Vec::new() }), 4);
    }
}
