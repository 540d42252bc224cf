//! Software tasks: workload generation, operand streams and the host-side
//! state machine that maps, drives and releases a virtual PE.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MeshCoordinate, Message, MessageKind, PeType, SlotId, VirtualAddress};
use crate::pe::compute_result;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64, the generator behind every operand stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-task seed: the `(index + 1)`-th splitmix64 output of `seed`.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    mix64(seed.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index + 1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mix {
    GcdOnly,
    RsaOnly,
    #[default]
    Mixed,
}

impl Mix {
    pub fn type_of(self, index: usize) -> PeType {
        match self {
            Mix::GcdOnly => PeType::Gcd,
            Mix::RsaOnly => PeType::Rsa,
            Mix::Mixed if index.is_multiple_of(2) => PeType::Gcd,
            Mix::Mixed => PeType::Rsa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalSchedule {
    /// Every task submits its mapping request at cycle 0.
    #[default]
    Simultaneous,
    /// Task `i` arrives at `i * interval`.
    Staggered { interval: u64 },
    /// Explicit per-task cycles; tasks past the end reuse the last value.
    Explicit { cycles: Vec<u64> },
}

impl ArrivalSchedule {
    pub fn cycle_of(&self, index: usize) -> u64 {
        match self {
            ArrivalSchedule::Simultaneous => 0,
            ArrivalSchedule::Staggered { interval } => interval * index as u64,
            ArrivalSchedule::Explicit { cycles } => cycles.get(index).or(cycles.last()).copied().unwrap_or(0),
        }
    }
}

/// How request operands are produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperandModel {
    pub rsa_e: u32,
    pub rsa_n: u32,
    /// Constant GCD operands instead of the random stream.
    pub fixed_gcd: Option<[u32; 2]>,
    /// Constant RSA message instead of the random stream.
    pub fixed_rsa_m: Option<u32>,
}

impl Default for OperandModel {
    fn default() -> Self {
        Self { rsa_e: 65537, rsa_n: 3233, fixed_gcd: None, fixed_rsa_m: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub pe_type: PeType,
    pub num_requests: u32,
    pub think_cycles: u64,
    pub arrival_cycle: u64,
    pub operand_seed: u64,
}

/// Per-task parameters shared by every generated task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskTemplate {
    pub num_requests: u32,
    pub think_cycles: u64,
}

pub fn generate_workload(
    n_tasks: usize,
    mix: Mix,
    base: TaskTemplate,
    arrival: &ArrivalSchedule,
    seed: u64,
) -> Vec<TaskSpec> {
    (0..n_tasks)
        .map(|i| TaskSpec {
            task_id: i as u32,
            pe_type: mix.type_of(i),
            num_requests: base.num_requests,
            think_cycles: base.think_cycles,
            arrival_cycle: arrival.cycle_of(i),
            operand_seed: split_seed(seed, i as u64),
        })
        .collect()
}

/// Next request payload of a task's operand stream.
pub fn next_operands(gen: &mut SplitMix64, pe_type: PeType, model: &OperandModel) -> Vec<u32> {
    match pe_type {
        PeType::Gcd => match model.fixed_gcd {
            Some(ops) => ops.to_vec(),
            None => vec![gen.next_u64() as u32 | 1, gen.next_u64() as u32 | 1],
        },
        PeType::Rsa => {
            let m = match model.fixed_rsa_m {
                Some(m) => m % model.rsa_n,
                None => (gen.next_u64() as u32) % model.rsa_n,
            };
            vec![m, model.rsa_e, model.rsa_n]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error("task {task}: reply {got} does not match recomputed {expected}")]
    ResultMismatch { task: u32, expected: u32, got: u32 },
    #[error("host {node}: unexpected {kind:?} message from {src}")]
    UnexpectedMessage { node: MeshCoordinate, kind: MessageKind, src: VirtualAddress },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HostPhase {
    Dormant,
    AwaitingGrant,
    Thinking { until: u64 },
    AwaitingReply { request_id: u16 },
    Releasing,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Outstanding {
    id: u16,
    payload: Vec<u32>,
    issued_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskHostState {
    pub spec: TaskSpec,
    pub host_node: MeshCoordinate,
    pub phase: HostPhase,
    pub assigned: Option<VirtualAddress>,
    pub issued: u32,
    pub completed: u32,
    pub start_cycle: Option<u64>,
    pub finish_cycle: Option<u64>,
    /// Issue-to-reply latency of every completed request.
    pub request_latencies: Vec<u64>,
    pub verified_replies: u64,
    gen: SplitMix64,
    outstanding: Option<Outstanding>,
}

impl TaskHostState {
    pub fn new(spec: TaskSpec, host_node: MeshCoordinate) -> Self {
        let gen = SplitMix64::new(spec.operand_seed);
        Self {
            spec,
            host_node,
            phase: HostPhase::Dormant,
            assigned: None,
            issued: 0,
            completed: 0,
            start_cycle: None,
            finish_cycle: None,
            request_latencies: Vec::new(),
            verified_replies: 0,
            gen,
            outstanding: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == HostPhase::Done
    }
}

/// A mesh node running one or more software tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostNode {
    pub node: MeshCoordinate,
    pub manager: MeshCoordinate,
    pub tasks: Vec<TaskHostState>,
    pub inbox: VecDeque<Message>,
    next_id: u16,
}

impl HostNode {
    pub fn new(node: MeshCoordinate, manager: MeshCoordinate) -> Self {
        Self { node, manager, tasks: Vec::new(), inbox: VecDeque::new(), next_id: 0 }
    }

    fn address(&self) -> VirtualAddress {
        VirtualAddress::new(self.node, SlotId::S0)
    }

    fn message(&mut self, kind: MessageKind, dst: VirtualAddress, payload: Vec<u32>) -> Message {
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1);
        Message::new(id, kind, self.address(), dst, payload)
    }

    pub fn all_done(&self) -> bool {
        self.tasks.iter().all(TaskHostState::is_done)
    }

    fn find_task(&self, msg: &Message) -> Option<usize> {
        match msg.kind {
            MessageKind::MapGrant | MessageKind::ReleaseAck => {
                let id = *msg.payload.first()?;
                self.tasks.iter().position(|t| t.spec.task_id == id)
            }
            MessageKind::ComputeRep => {
                let request_id = *msg.payload.first()? as u16;
                self.tasks.iter().position(|t| {
                    t.phase == HostPhase::AwaitingReply { request_id } && t.assigned == Some(msg.src)
                })
            }
            _ => None,
        }
    }

    fn issue_request(&mut self, i: usize, now: u64, operands: &OperandModel, out: &mut Vec<Message>) {
        let pe_type = self.tasks[i].spec.pe_type;
        let payload = next_operands(&mut self.tasks[i].gen, pe_type, operands);
        let dst = self.tasks[i].assigned.expect("granted before issuing");
        let msg = self.message(MessageKind::ComputeReq, dst, payload.clone());
        let task = &mut self.tasks[i];
        task.outstanding = Some(Outstanding { id: msg.id, payload, issued_at: now });
        task.issued += 1;
        task.phase = HostPhase::AwaitingReply { request_id: msg.id };
        out.push(msg);
    }

    /// Handles delivered messages, then fires arrivals and expired think timers.
    pub fn step(&mut self, now: u64, operands: &OperandModel, out: &mut Vec<Message>) -> Result<(), WorkloadError> {
        while let Some(msg) = self.inbox.pop_front() {
            let unexpected =
                || WorkloadError::UnexpectedMessage { node: self.node, kind: msg.kind, src: msg.src };
            let Some(i) = self.find_task(&msg) else { return Err(unexpected()) };
            match (msg.kind, self.tasks[i].phase) {
                (MessageKind::MapGrant, HostPhase::AwaitingGrant) => {
                    let addr = msg.payload.get(1).map(|w| VirtualAddress::from_word(*w)).ok_or_else(unexpected)?;
                    let task = &mut self.tasks[i];
                    task.assigned = Some(addr);
                    task.start_cycle.get_or_insert(now);
                    task.phase = HostPhase::Thinking { until: now + task.spec.think_cycles };
                }
                (MessageKind::ComputeRep, HostPhase::AwaitingReply { .. }) => {
                    let task = &mut self.tasks[i];
                    let got = *msg.payload.get(1).ok_or_else(unexpected)?;
                    let req = task.outstanding.take().expect("awaiting reply");
                    let expected = compute_result(task.spec.pe_type, &req.payload).expect("generated operands are valid");
                    if got != expected {
                        return Err(WorkloadError::ResultMismatch { task: task.spec.task_id, expected, got });
                    }
                    task.verified_replies += 1;
                    task.completed += 1;
                    task.request_latencies.push(now - req.issued_at);
                    if task.completed == task.spec.num_requests {
                        task.phase = HostPhase::Releasing;
                        let manager = VirtualAddress::new(self.manager, SlotId::S0);
                        let task_id = task.spec.task_id;
                        let release = self.message(MessageKind::Release, manager, vec![task_id]);
                        out.push(release);
                    } else {
                        task.phase = HostPhase::Thinking { until: now + task.spec.think_cycles };
                    }
                }
                (MessageKind::ReleaseAck, HostPhase::Releasing) => {
                    let task = &mut self.tasks[i];
                    task.phase = HostPhase::Done;
                    task.finish_cycle = Some(now);
                }
                _ => return Err(unexpected()),
            }
        }

        for i in 0..self.tasks.len() {
            match self.tasks[i].phase {
                HostPhase::Dormant if now >= self.tasks[i].spec.arrival_cycle => {
                    let spec = &self.tasks[i].spec;
                    let payload = vec![spec.task_id, spec.pe_type.code()];
                    let manager = VirtualAddress::new(self.manager, SlotId::S0);
                    let msg = self.message(MessageKind::MapReq, manager, payload);
                    self.tasks[i].phase = HostPhase::AwaitingGrant;
                    out.push(msg);
                }
                HostPhase::Thinking { until } if now >= until => self.issue_request(i, now, operands, out),
                _ => {}
            }
        }
        Ok(())
    }
}
