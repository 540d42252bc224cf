//! Browser bindings: run a configuration, sweep task counts, trace a packet.
//!
//! The plain functions return `Result<String, String>` so they can be tested
//! natively; the `#[wasm_bindgen]` wrappers only convert the error side.

use serde_json::json;
use wasm_bindgen::prelude::*;

use vnoc::config::{parse_config, SimConfig};
use vnoc::engine::Fabric;
use vnoc::harness::{run_quiet, run_sweep, stats_json};
use vnoc::model::{Message, MessageKind, MeshCoordinate, SlotId, VirtualAddress};
use vnoc::ni::Inbox;
use vnoc::router::ControlCommand;
use vnoc::trace::{SharedBuffer, Trace};

/// The configurations shipped with the simulator, by file stem.
pub const PRESETS: [(&str, &str); 6] = [
    ("default", include_str!("../../core/configs/default.json")),
    ("fixed_pair", include_str!("../../core/configs/fixed_pair.json")),
    ("duty_half", include_str!("../../core/configs/duty_half.json")),
    ("duty_two_thirds", include_str!("../../core/configs/duty_two_thirds.json")),
    ("gcd_only", include_str!("../../core/configs/gcd_only.json")),
    ("rsa_only", include_str!("../../core/configs/rsa_only.json")),
];

pub fn default_config_json() -> String {
    serde_json::to_string_pretty(&SimConfig::default()).expect("config serializes")
}

pub fn run_json(config: &str) -> Result<String, String> {
    let cfg = parse_config(config).map_err(|e| e.to_string())?;
    let stats = run_quiet(&cfg).map_err(|e| e.to_string())?;
    Ok(stats_json(&stats))
}

/// `counts` is a comma separated list such as `"2,4,6,8"`.
pub fn sweep_json(config: &str, counts: &str) -> Result<String, String> {
    let cfg = parse_config(config).map_err(|e| e.to_string())?;
    let counts = counts
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad task count {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    let report = run_sweep(&cfg, &counts).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

struct Sink;

impl Inbox for Sink {
    fn has_space(&self, _slot: SlotId) -> bool {
        true
    }
    fn deliver(&mut self, _slot: SlotId, _msg: Message, _now: u64) {}
}

/// Sends one packet across an idle mesh and reports where its header went.
pub fn route_json(width: u8, height: u8, src: (u8, u8), dst: (u8, u8), words: usize) -> Result<String, String> {
    if width == 0 || height == 0 || width > vnoc::model::MAX_MESH_DIM || height > vnoc::model::MAX_MESH_DIM {
        return Err(format!("mesh {width}x{height} out of range"));
    }
    let inside = |(x, y): (u8, u8)| x < width && y < height;
    if !inside(src) || !inside(dst) {
        return Err("endpoint outside the mesh".into());
    }
    let (src, dst) = (MeshCoordinate::new(src.0, src.1), MeshCoordinate::new(dst.0, dst.1));
    let mut fabric = Fabric::new(width, height, 4, true);
    fabric.router_mut(dst).apply_control(ControlCommand::EnableLocal1).map_err(|e| e.to_string())?;
    let msg = Message::new(1, MessageKind::ComputeReq, VirtualAddress::new(src, SlotId::S0), VirtualAddress::new(dst, SlotId::S0), vec![0; words]);
    fabric.ni_mut(src).send(msg).map_err(|e| e.to_string())?;

    let buf = SharedBuffer::default();
    let mut trace = Trace::to_writer(Box::new(buf.clone()));
    let mut sinks: Vec<Sink> = (0..fabric.node_count()).map(|_| Sink).collect();
    for now in 0..10_000 {
        if !fabric.delivered.is_empty() {
            break;
        }
        fabric.network_phases(now, &mut sinks, &mut trace).map_err(|e| e.to_string())?;
    }
    let Some(&p) = fabric.delivered.first() else { return Err("packet was not delivered".into()) };
    trace.finish().map_err(|e| e.to_string())?;
    let hops: Vec<_> = buf
        .text()
        .lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f.len() == 8 && f[1] == "FWD" && f[6] == "0")
        .map(|f| json!({ "cycle": f[0].parse::<u64>().unwrap_or(0), "x": f[2].parse::<u8>().unwrap_or(0), "y": f[3].parse::<u8>().unwrap_or(0), "out": f[4] }))
        .collect();
    Ok(json!({ "flits": p.flits, "latency": p.latency(), "hops": hops }).to_string())
}

#[wasm_bindgen]
pub fn default_config() -> String {
    default_config_json()
}

#[wasm_bindgen]
pub fn preset_names() -> Vec<String> {
    PRESETS.iter().map(|(n, _)| n.to_string()).collect()
}

#[wasm_bindgen]
pub fn preset(name: &str) -> Option<String> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| text.to_string())
}

#[wasm_bindgen]
pub fn run(config: &str) -> Result<String, JsError> {
    run_json(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sweep(config: &str, counts: &str) -> Result<String, JsError> {
    sweep_json(config, counts).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn route(width: u8, height: u8, sx: u8, sy: u8, dx: u8, dy: u8, words: usize) -> Result<String, JsError> {
    route_json(width, height, (sx, sy), (dx, dy), words).map_err(|e| JsError::new(&e))
}
