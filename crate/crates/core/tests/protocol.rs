//! Manager protocol and workload properties observed through the trace.

use std::collections::HashMap;
use std::path::PathBuf;

use vnoc::config::{parse_config, SimConfig};
use vnoc::engine::Simulation;
use vnoc::manager::{Mode, PortMirror};
use vnoc::router::TaskStatus;
use vnoc::stats::RunStats;
use vnoc::trace::{SharedBuffer, Trace, TRACE_HEADER};

fn suite_config(name: &str) -> SimConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.json"));
    parse_config(&std::fs::read_to_string(path).unwrap()).unwrap()
}

struct Record {
    cycle: u64,
    event: String,
    node: (u8, u8),
    port_or_slot: String,
    ordinal: Option<u16>,
    detail: String,
}

fn traced_run(cfg: &SimConfig) -> (Simulation, RunStats, Vec<Record>) {
    let buf = SharedBuffer::default();
    let mut sim = Simulation::with_trace(cfg, Trace::to_writer(Box::new(buf.clone()))).unwrap();
    let stats = sim.run().unwrap();
    let text = buf.text();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    let records = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 8, "{l}");
            Record {
                cycle: f[0].parse().unwrap(),
                event: f[1].to_string(),
                node: (f[2].parse().unwrap(), f[3].parse().unwrap()),
                port_or_slot: f[4].to_string(),
                ordinal: f[6].parse().ok(),
                detail: f[7].to_string(),
            }
        })
        .collect();
    (sim, stats, records)
}

fn shared_workload() -> SimConfig {
    suite_config("gcd_only").with_tasks(6)
}

#[test]
fn slot_one_is_activated_only_while_local1_is_enabled() {
    let (_, stats, records) = traced_run(&shared_workload());
    assert!(stats.decisions.enable_then_assign > 0);
    let mut enabled: HashMap<(u8, u8), bool> = HashMap::new();
    let mut activations = 0;
    for r in records.iter().filter(|r| r.event == "CTRL") {
        match r.detail.as_str() {
            "EnableLocal1 accepted" => {
                enabled.insert(r.node, true);
            }
            "DisableLocal1 accepted" => {
                enabled.insert(r.node, false);
            }
            "SetTaskStatus Active" if r.port_or_slot == "1" => {
                assert_eq!(enabled.get(&r.node), Some(&true), "slot 1 active at cycle {} before EnableAck", r.cycle);
                activations += 1;
            }
            _ => {}
        }
    }
    assert_eq!(activations as u64, stats.decisions.enable_then_assign + count_direct_slot1(&records));
}

fn count_direct_slot1(records: &[Record]) -> u64 {
    records.iter().filter(|r| r.event == "DECISION" && r.detail.contains("Assign node=") && r.detail.contains("slot=1")).count() as u64
}

#[test]
fn baseline_never_touches_local1() {
    let (sim, stats, records) = traced_run(&shared_workload().with_mode(Mode::Baseline));
    assert_eq!(stats.decisions.enable_then_assign, 0);
    assert!(records.iter().all(|r| r.port_or_slot != "Local1"));
    assert!(records.iter().all(|r| !(r.event == "CTRL" && r.detail.contains("Local1"))));
    assert!(sim.tasks().all(|t| t.assigned.is_some_and(|a| a.slot == vnoc::model::SlotId::S0)));
    assert!(stats.pes.iter().all(|p| p.virtualized_cycles == 0));
}

#[test]
fn directory_mirrors_routers_after_drain() {
    let (sim, _, _) = traced_run(&shared_workload());
    for e in sim.manager().directory() {
        let router = sim.fabric.router(e.node);
        let active = router.vctrl.task_status.iter().filter(|s| **s == TaskStatus::Active).count();
        assert_eq!(active, e.active_slots());
        assert_eq!(router.vctrl.local1_enabled, e.port == PortMirror::Enabled);
        assert_eq!(e.port, PortMirror::Disabled, "last release returns the router to conventional mode");
    }
}

#[test]
fn message_budget_per_task() {
    let cfg = suite_config("fixed_pair").with_tasks(6);
    let (_, stats, records) = traced_run(&cfg);
    let mut headers: HashMap<String, u64> = HashMap::new();
    for r in records.iter().filter(|r| r.event == "INJ" && r.ordinal == Some(0)) {
        *headers.entry(r.detail.clone()).or_default() += 1;
    }
    let n = 6;
    let rr = n * cfg.workload.num_requests as u64;
    for (kind, count) in [("MapReq", n), ("MapGrant", n), ("ComputeReq", rr), ("ComputeRep", rr), ("Release", n), ("ReleaseAck", n)] {
        assert_eq!(headers.get(kind).copied().unwrap_or(0), count, "{kind}");
    }
    assert_eq!(headers.get("EnablePort"), headers.get("EnableAck"));
    assert_eq!(stats.verified_replies, rr);
}

#[test]
fn wormhole_flits_stay_contiguous_per_output() {
    let (_, _, records) = traced_run(&shared_workload());
    // (node, output) -> (input, last ordinal) of the packet holding it.
    let mut holder: HashMap<((u8, u8), String), (String, u16)> = HashMap::new();
    let mut fwd = 0;
    for r in records.iter().filter(|r| r.event == "FWD") {
        fwd += 1;
        let key = (r.node, r.port_or_slot.clone());
        let input = r.detail.clone();
        let ord = r.ordinal.expect("tagged flits");
        if ord == 0 {
            holder.insert(key, (input, 0));
            continue;
        }
        let (owner, last) = holder.get_mut(&key).expect("body flit follows a header");
        assert_eq!(*owner, input, "interleaved packets on {key:?} at cycle {}", r.cycle);
        assert_eq!(*last + 1, ord, "out-of-order flit on {key:?} at cycle {}", r.cycle);
        *last = ord;
    }
    assert!(fwd > 1000);
}

#[test]
fn think_time_separates_requests() {
    let cfg = suite_config("duty_half").with_tasks(1);
    let (_, stats, records) = traced_run(&cfg);
    let starts: Vec<u64> = records.iter().filter(|r| r.event == "SVC_START").map(|r| r.cycle).collect();
    let s = cfg.service.gcd_base + 3 * cfg.service.gcd_per_iter;
    // Host (0,1) to PE (2,1) is two hops: 14 cycles each way.
    let gap = cfg.workload.think_cycles + s + 28;
    assert_eq!(starts.len(), cfg.workload.num_requests as usize);
    assert!(starts.windows(2).all(|w| w[1] - w[0] == gap), "uncontended rounds take C + S + round trip");
    let task = &stats.tasks[0];
    assert_eq!(task.max_request_latency, s + 28);
}

#[test]
fn single_task_matches_closed_form() {
    let cfg = suite_config("duty_half").with_tasks(1);
    let stats = Simulation::build(&cfg).unwrap().run().unwrap();
    let s = cfg.service.gcd_base + 3 * cfg.service.gcd_per_iter;
    let c = cfg.workload.think_cycles;
    let r = cfg.workload.num_requests as u64;
    // Host (0,1) and manager (0,0) are one hop apart; the PE (2,1) is two
    // hops from the host. A packet of F flits over H hops reaches its
    // consumer 2H + F + 2 cycles after emission.
    let net = |h: u64, f: u64| 2 * h + f + 2;
    let grant = net(1, 8) + net(1, 8);
    let per_request = c + net(2, 8) + s + net(2, 8);
    let release = net(1, 6) + net(1, 6);
    assert_eq!(stats.makespan_cycles, grant + r * per_request + release);
}

#[test]
fn tracing_and_tags_do_not_change_results() {
    let cfg = shared_workload();
    let quiet = Simulation::build(&cfg).unwrap().run().unwrap();
    let (_, traced, _) = traced_run(&cfg);
    let mut stripped = Simulation::build(&cfg).unwrap();
    stripped.set_strip_tags(true);
    let stripped = stripped.run().unwrap();
    assert_eq!(quiet, traced);
    assert_eq!(quiet, stripped);
}

#[test]
fn traces_are_reproducible() {
    let cfg = suite_config("fixed_pair");
    let run = || {
        let buf = SharedBuffer::default();
        Simulation::with_trace(&cfg, Trace::to_writer(Box::new(buf.clone()))).unwrap().run().unwrap();
        buf.contents()
    };
    assert_eq!(run(), run());
}

#[test]
fn utilization_is_a_fraction_and_makespan_is_last_finish() {
    for name in ["default", "fixed_pair", "rsa_only"] {
        for mode in [Mode::Baseline, Mode::Vnoc] {
            let stats = Simulation::build(&suite_config(name).with_mode(mode)).unwrap().run().unwrap();
            assert!(stats.pes.iter().all(|p| (0.0..=1.0).contains(&p.utilization)));
            assert_eq!(stats.makespan_cycles, stats.tasks.iter().filter_map(|t| t.finish).max().unwrap());
            assert!(stats.tasks.iter().all(|t| t.start <= t.finish));
        }
    }
}
