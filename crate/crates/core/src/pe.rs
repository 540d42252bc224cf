//! Reconfigurable regions and the processing elements they host.
//!
//! A configured PE owns one execution unit shared by two slot queues; requests
//! are served non-preemptively in global arrival order (ties go to slot 0).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MeshCoordinate, Message, MessageKind, PeType, SlotId, VirtualAddress};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeError {
    #[error("{pe_type} expects {expected} operand words, got {got}")]
    ArityMismatch { pe_type: PeType, expected: usize, got: usize },
    #[error("RSA modulus must be nonzero")]
    ZeroModulus,
    #[error("PE {node}: slot {slot} queue full")]
    QueueFull { node: MeshCoordinate, slot: SlotId },
    #[error("region {node} is busy")]
    RegionBusy { node: MeshCoordinate },
    #[error("region {node} received a request while not configured")]
    NotConfigured { node: MeshCoordinate },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceModelParams {
    pub gcd_base: u64,
    pub gcd_per_iter: u64,
    pub rsa_base: u64,
    pub rsa_mult_cost: u64,
    pub t_recfg: u64,
}

impl Default for ServiceModelParams {
    fn default() -> Self {
        Self { gcd_base: 4, gcd_per_iter: 8, rsa_base: 4, rsa_mult_cost: 16, t_recfg: 100_000 }
    }
}

/// Modulo steps of Euclid's algorithm until the remainder is zero.
pub fn gcd_iterations(mut a: u32, mut b: u32) -> u64 {
    let mut steps = 0;
    while b != 0 {
        (a, b) = (b, a % b);
        steps += 1;
    }
    steps
}

pub fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Modular multiplications of left-to-right square-and-multiply.
pub fn rsa_op_count(e: u32) -> u64 {
    if e == 0 {
        return 0;
    }
    let bitlen = 32 - e.leading_zeros() as u64;
    bitlen + e.count_ones() as u64 - 2
}

/// `m^e mod n`, left-to-right square-and-multiply on 64-bit intermediates.
pub fn mod_pow(m: u32, e: u32, n: u32) -> u32 {
    let n = n as u64;
    if e == 0 {
        return (1 % n) as u32;
    }
    let base = m as u64 % n;
    let mut acc = base;
    for bit in (0..31 - e.leading_zeros()).rev() {
        acc = acc * acc % n;
        if e >> bit & 1 == 1 {
            acc = acc * base % n;
        }
    }
    acc as u32
}

pub fn arity(pe_type: PeType) -> usize {
    match pe_type {
        PeType::Gcd => 2,
        PeType::Rsa => 3,
    }
}

fn check_arity(pe_type: PeType, payload: &[u32]) -> Result<(), PeError> {
    let expected = arity(pe_type);
    if payload.len() != expected {
        return Err(PeError::ArityMismatch { pe_type, expected, got: payload.len() });
    }
    if pe_type == PeType::Rsa && payload[2] == 0 {
        return Err(PeError::ZeroModulus);
    }
    Ok(())
}

pub fn service_cycles(pe_type: PeType, payload: &[u32], params: &ServiceModelParams) -> Result<u64, PeError> {
    check_arity(pe_type, payload)?;
    Ok(match pe_type {
        PeType::Gcd => params.gcd_base + params.gcd_per_iter * gcd_iterations(payload[0], payload[1]),
        PeType::Rsa => params.rsa_base + params.rsa_mult_cost * rsa_op_count(payload[1]),
    })
}

/// Functional result of a request: the gcd, or `m^e mod n`.
pub fn compute_result(pe_type: PeType, payload: &[u32]) -> Result<u32, PeError> {
    check_arity(pe_type, payload)?;
    Ok(match pe_type {
        PeType::Gcd => gcd(payload[0], payload[1]),
        PeType::Rsa => mod_pow(payload[0], payload[1], payload[2]),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecState {
    Idle,
    Busy { request: Message, slot: SlotId, start: u64, finish_at: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeState {
    pub pe_type: PeType,
    queues: [VecDeque<(Message, u64)>; 2],
    capacity: usize,
    pub exec: ExecState,
}

/// What a PE did during one cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeStep {
    pub finished: Option<(SlotId, Message)>,
    pub started: Option<(SlotId, u16, u64)>,
}

impl PeState {
    pub fn new(pe_type: PeType, capacity: usize) -> Self {
        Self { pe_type, queues: Default::default(), capacity, exec: ExecState::Idle }
    }

    pub fn queue_len(&self, slot: SlotId) -> usize {
        self.queues[slot.index()].len()
    }

    pub fn has_space(&self, slot: SlotId) -> bool {
        self.queue_len(slot) < self.capacity
    }

    pub fn is_idle(&self) -> bool {
        self.exec == ExecState::Idle && self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn enqueue(&mut self, node: MeshCoordinate, slot: SlotId, msg: Message, now: u64) -> Result<(), PeError> {
        if !self.has_space(slot) {
            return Err(PeError::QueueFull { node, slot });
        }
        self.queues[slot.index()].push_back((msg, now));
        Ok(())
    }

    /// Slot whose head request arrived first; slot 0 wins ties.
    fn fcfs_pick(&self) -> Option<SlotId> {
        let head = |s: SlotId| self.queues[s.index()].front().map(|(_, t)| *t);
        match (head(SlotId::S0), head(SlotId::S1)) {
            (Some(a), Some(b)) => Some(if b < a { SlotId::S1 } else { SlotId::S0 }),
            (Some(_), None) => Some(SlotId::S0),
            (None, Some(_)) => Some(SlotId::S1),
            (None, None) => None,
        }
    }

    /// Completes the running request at its finish cycle, then starts the
    /// oldest queued one in the same cycle.
    pub fn step(&mut self, now: u64, params: &ServiceModelParams) -> Result<PeStep, PeError> {
        let mut out = PeStep::default();
        if let ExecState::Busy { finish_at, .. } = self.exec {
            if now >= finish_at {
                let ExecState::Busy { request, slot, .. } = std::mem::replace(&mut self.exec, ExecState::Idle) else {
                    unreachable!()
                };
                out.finished = Some((slot, request));
            }
        }
        if self.exec == ExecState::Idle {
            if let Some(slot) = self.fcfs_pick() {
                let (request, _) = self.queues[slot.index()].pop_front().expect("picked");
                let service = service_cycles(self.pe_type, &request.payload, params)?;
                out.started = Some((slot, request.id, service));
                self.exec = ExecState::Busy { request, slot, start: now, finish_at: now + service };
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrrStatus {
    Empty,
    Reconfiguring { ready_at: u64, pe_type: PeType },
    Configured(PeState),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrrState {
    pub node: MeshCoordinate,
    pub status: PrrStatus,
    pub last_used: u64,
    pub reconfig_count: u64,
    pub busy_cycles: u64,
    pub served: u64,
    queue_capacity: usize,
    next_reply_id: u16,
}

/// Outcome of one PRR cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrrStep {
    pub reply: Option<Message>,
    pub started: Option<(SlotId, u16, u64)>,
    pub finished: Option<(SlotId, u16)>,
}

impl PrrState {
    pub fn new(node: MeshCoordinate, initial: Option<PeType>, queue_capacity: usize) -> Self {
        Self {
            node,
            status: match initial {
                Some(t) => PrrStatus::Configured(PeState::new(t, queue_capacity)),
                None => PrrStatus::Empty,
            },
            last_used: 0,
            reconfig_count: 0,
            busy_cycles: 0,
            served: 0,
            queue_capacity,
            next_reply_id: 0,
        }
    }

    pub fn pe(&self) -> Option<&PeState> {
        match &self.status {
            PrrStatus::Configured(pe) => Some(pe),
            _ => None,
        }
    }

    pub fn pe_type(&self) -> Option<PeType> {
        match &self.status {
            PrrStatus::Empty => None,
            PrrStatus::Reconfiguring { pe_type, .. } => Some(*pe_type),
            PrrStatus::Configured(pe) => Some(pe.pe_type),
        }
    }

    pub fn is_idle(&self) -> bool {
        match &self.status {
            PrrStatus::Configured(pe) => pe.is_idle(),
            PrrStatus::Empty => true,
            PrrStatus::Reconfiguring { .. } => false,
        }
    }

    pub fn has_space(&self, slot: SlotId) -> bool {
        self.pe().is_none_or(|pe| pe.has_space(slot))
    }

    pub fn enqueue(&mut self, slot: SlotId, msg: Message, now: u64) -> Result<(), PeError> {
        match &mut self.status {
            PrrStatus::Configured(pe) => pe.enqueue(self.node, slot, msg, now),
            _ => Err(PeError::NotConfigured { node: self.node }),
        }
    }

    /// Starts loading a new PE; `tasks_active` reports whether any slot is
    /// still assigned on the co-located router.
    pub fn reconfigure(&mut self, new_type: PeType, now: u64, t_recfg: u64, tasks_active: bool) -> Result<u64, PeError> {
        let allowed = match &self.status {
            PrrStatus::Empty => true,
            PrrStatus::Configured(pe) => pe.is_idle() && !tasks_active,
            PrrStatus::Reconfiguring { .. } => false,
        };
        if !allowed {
            return Err(PeError::RegionBusy { node: self.node });
        }
        let ready_at = now + t_recfg;
        self.status = PrrStatus::Reconfiguring { ready_at, pe_type: new_type };
        self.reconfig_count += 1;
        Ok(ready_at)
    }

    /// Finishes a pending reconfiguration; true on the completion cycle.
    pub fn tick(&mut self, now: u64) -> bool {
        if let PrrStatus::Reconfiguring { ready_at, pe_type } = self.status {
            if now >= ready_at {
                self.status = PrrStatus::Configured(PeState::new(pe_type, self.queue_capacity));
                return true;
            }
        }
        false
    }

    pub fn step(&mut self, now: u64, params: &ServiceModelParams) -> Result<PrrStep, PeError> {
        let PrrStatus::Configured(pe) = &mut self.status else {
            return Ok(PrrStep::default());
        };
        let pe_type = pe.pe_type;
        let step = pe.step(now, params)?;
        let mut out = PrrStep { started: step.started, ..PrrStep::default() };
        if let Some((_, _, service)) = step.started {
            self.busy_cycles += service;
        }
        if let Some((slot, request)) = step.finished {
            let result = compute_result(pe_type, &request.payload)?;
            let id = self.next_reply_id;
            self.next_reply_id = self.next_reply_id.wrapping_add(1);
            self.served += 1;
            self.last_used = now;
            out.finished = Some((slot, request.id));
            out.reply = Some(Message::new(
                id,
                MessageKind::ComputeRep,
                VirtualAddress::new(self.node, slot),
                request.src,
                vec![request.id as u32, result],
            ));
        }
        Ok(out)
    }
}
