//! Run statistics emitted as JSON.

use serde::{Deserialize, Serialize};

use crate::manager::Mode;
use crate::model::{MeshCoordinate, PeType, VirtualAddress};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub id: u32,
    #[serde(rename = "type")]
    pub pe_type: PeType,
    pub host: MeshCoordinate,
    pub assigned: Option<VirtualAddress>,
    pub start: Option<u64>,
    pub finish: Option<u64>,
    pub requests: u32,
    pub mean_request_latency: f64,
    pub max_request_latency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeStats {
    pub node: MeshCoordinate,
    #[serde(rename = "type")]
    pub pe_type: Option<PeType>,
    pub busy_cycles: u64,
    pub utilization: f64,
    pub reconfig_count: u64,
    /// Cycles during which both slots of the PE held an active task.
    pub virtualized_cycles: u64,
    pub served: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkStats {
    pub packets: u64,
    pub flits: u64,
    pub mean_packet_latency: f64,
    pub max_packet_latency: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub assign: u64,
    pub enable_then_assign: u64,
    pub reconfig_then_assign: u64,
    pub queued: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mode: Mode,
    pub seed: u64,
    pub config_digest: String,
    pub workload_digest: String,
    pub makespan_cycles: u64,
    pub cycles_simulated: u64,
    pub verified_replies: u64,
    pub decisions: DecisionCounts,
    pub tasks: Vec<TaskStats>,
    pub pes: Vec<PeStats>,
    pub network: NetworkStats,
}

pub fn digest_hex(d: u64) -> String {
    format!("{d:016x}")
}

pub(crate) fn mean(sum: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}
