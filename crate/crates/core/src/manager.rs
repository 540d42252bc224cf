//! The global manager: a software allocator on one mesh node that maps tasks
//! onto (virtual) PEs, drives Local1 enablement and reconfigures regions.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MeshCoordinate, Message, MessageKind, PeType, SlotId, VirtualAddress};
use crate::ni::ACK_OK;
use crate::ni::Inbox;
use crate::router::TaskStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Conventional single-local-port routers; a mapped task blocks its PE.
    Baseline,
    #[default]
    Vnoc,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Vnoc => "vnoc",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    /// Share a busy PE before paying for a reconfiguration.
    pub prefer_virtualize_over_reconfig: bool,
    /// Reconfigure an idle PE of another type when nothing else fits.
    /// Off pins every region to its initial configuration.
    pub allow_eviction: bool,
}

impl Default for Policy {
    fn default() -> Self {
        Self { prefer_virtualize_over_reconfig: false, allow_eviction: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Assign(MeshCoordinate, SlotId),
    EnableThenAssign(MeshCoordinate),
    ReconfigThenAssign(MeshCoordinate, PeType),
    Queued,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Assign(n, s) => write!(f, "Assign node={}:{} slot={}", n.x, n.y, s.index()),
            Decision::EnableThenAssign(n) => write!(f, "EnableThenAssign node={}:{}", n.x, n.y),
            Decision::ReconfigThenAssign(n, t) => write!(f, "ReconfigThenAssign node={}:{} type={t}", n.x, n.y),
            Decision::Queued => f.write_str("Queued"),
        }
    }
}

/// Manager actions that bypass the NoC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sideband {
    SetTaskStatus { node: MeshCoordinate, slot: SlotId, status: TaskStatus },
    Reconfigure { node: MeshCoordinate, pe_type: PeType },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManagerError {
    #[error("no service model for PE type code {code}")]
    UnknownPeType { code: u32 },
    #[error("release of unmapped task {task}")]
    UnknownTask { task: u32 },
    #[error("task {task} requested a mapping twice")]
    DuplicateRequest { task: u32 },
    #[error("unexpected {kind:?} from {src}")]
    UnexpectedMessage { kind: MessageKind, src: VirtualAddress },
    #[error("router {node} rejected Local1 enablement")]
    EnableRejected { node: MeshCoordinate },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionMirror {
    Empty,
    Reconfiguring { ready_at: u64 },
    Configured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PortMirror {
    Disabled,
    Enabling,
    Enabled,
    Disabling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SlotUse {
    /// Held for a task whose grant is parked.
    Reserved(u32),
    Active(u32),
}

impl SlotUse {
    pub fn task(self) -> u32 {
        match self {
            SlotUse::Reserved(t) | SlotUse::Active(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DirectoryEntry {
    pub node: MeshCoordinate,
    pub status: RegionMirror,
    pub pe_type: Option<PeType>,
    pub slots: [Option<SlotUse>; 2],
    pub last_used: u64,
    pub port: PortMirror,
}

impl DirectoryEntry {
    pub fn active_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    fn is_configured(&self, pe_type: PeType) -> bool {
        self.status == RegionMirror::Configured && self.pe_type == Some(pe_type)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PendingRequest {
    task: u32,
    pe_type: PeType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TaskRecord {
    host: VirtualAddress,
    placement: Option<(MeshCoordinate, SlotId)>,
}

/// Everything one manager step produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManagerOutput {
    pub messages: Vec<Message>,
    pub sideband: Vec<Sideband>,
    pub decisions: Vec<(u32, Decision)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManagerState {
    pub node: MeshCoordinate,
    pub mode: Mode,
    pub policy: Policy,
    t_recfg: u64,
    /// Keyed by row-major order so scans are deterministic.
    directory: BTreeMap<(u8, u8), DirectoryEntry>,
    pending: VecDeque<PendingRequest>,
    tasks: BTreeMap<u32, TaskRecord>,
    pub inbox: VecDeque<Message>,
    next_id: u16,
    pub grants_sent: u64,
}

impl ManagerState {
    pub fn new(node: MeshCoordinate, prrs: &[(MeshCoordinate, Option<PeType>)], mode: Mode, policy: Policy, t_recfg: u64) -> Self {
        let directory = prrs
            .iter()
            .map(|&(node, pe_type)| {
                let status = if pe_type.is_some() { RegionMirror::Configured } else { RegionMirror::Empty };
                let entry = DirectoryEntry { node, status, pe_type, slots: [None; 2], last_used: 0, port: PortMirror::Disabled };
                (node.row_major_key(), entry)
            })
            .collect();
        Self {
            node,
            mode,
            policy,
            t_recfg,
            directory,
            pending: VecDeque::new(),
            tasks: BTreeMap::new(),
            inbox: VecDeque::new(),
            next_id: 0,
            grants_sent: 0,
        }
    }

    pub fn entry(&self, node: MeshCoordinate) -> Option<&DirectoryEntry> {
        self.directory.get(&node.row_major_key())
    }

    pub fn directory(&self) -> impl Iterator<Item = &DirectoryEntry> {
        self.directory.values()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// No parked decisions, no queued requests and no port transitions.
    pub fn is_quiescent(&self) -> bool {
        self.inbox.is_empty()
            && self.pending.is_empty()
            && self.directory.values().all(|e| {
                !matches!(e.status, RegionMirror::Reconfiguring { .. })
                    && matches!(e.port, PortMirror::Disabled | PortMirror::Enabled)
            })
    }

    fn address(&self) -> VirtualAddress {
        VirtualAddress::new(self.node, SlotId::S0)
    }

    fn message(&mut self, kind: MessageKind, dst: VirtualAddress, payload: Vec<u32>) -> Message {
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1);
        Message::new(id, kind, self.address(), dst, payload)
    }

    fn entry_mut(&mut self, node: MeshCoordinate) -> &mut DirectoryEntry {
        self.directory.get_mut(&node.row_major_key()).expect("node in directory")
    }

    /// LRU idle PE; ties go to the smaller `(y, x)`.
    pub fn select_victim(&self, pe_type: PeType) -> Option<MeshCoordinate> {
        self.directory
            .values()
            .filter(|e| e.status == RegionMirror::Configured && e.active_slots() == 0 && e.pe_type != Some(pe_type))
            .min_by_key(|e| (e.last_used, e.node.row_major_key()))
            .map(|e| e.node)
    }

    fn grant(&mut self, node: MeshCoordinate, slot: SlotId, task: u32, out: &mut ManagerOutput) {
        let host = self.tasks[&task].host;
        self.entry_mut(node).slots[slot.index()] = Some(SlotUse::Active(task));
        self.tasks.get_mut(&task).expect("known task").placement = Some((node, slot));
        out.sideband.push(Sideband::SetTaskStatus { node, slot, status: TaskStatus::Active });
        let msg = self.message(MessageKind::MapGrant, host, vec![task, VirtualAddress::new(node, slot).to_word()]);
        out.messages.push(msg);
        self.grants_sent += 1;
    }

    fn try_idle(&self, pe_type: PeType) -> Option<MeshCoordinate> {
        self.directory.values().find(|e| e.is_configured(pe_type) && e.active_slots() == 0).map(|e| e.node)
    }

    fn try_empty(&self) -> Option<MeshCoordinate> {
        self.directory.values().find(|e| e.status == RegionMirror::Empty).map(|e| e.node)
    }

    fn try_share(&self, pe_type: PeType) -> Option<(MeshCoordinate, SlotId)> {
        if self.mode != Mode::Vnoc {
            return None;
        }
        self.directory
            .values()
            .find(|e| e.is_configured(pe_type) && e.active_slots() == 1 && matches!(e.port, PortMirror::Disabled | PortMirror::Enabled))
            .map(|e| (e.node, if e.slots[0].is_none() { SlotId::S0 } else { SlotId::S1 }))
    }

    fn reconfigure(&mut self, node: MeshCoordinate, pe_type: PeType, task: u32, now: u64, out: &mut ManagerOutput) -> Decision {
        let ready_at = now + self.t_recfg;
        let e = self.entry_mut(node);
        e.status = RegionMirror::Reconfiguring { ready_at };
        e.pe_type = Some(pe_type);
        e.slots[0] = Some(SlotUse::Reserved(task));
        out.sideband.push(Sideband::Reconfigure { node, pe_type });
        Decision::ReconfigThenAssign(node, pe_type)
    }

    fn share(&mut self, node: MeshCoordinate, slot: SlotId, task: u32, out: &mut ManagerOutput) -> Decision {
        if slot == SlotId::S1 && self.entry(node).expect("known").port == PortMirror::Disabled {
            let e = self.entry_mut(node);
            e.port = PortMirror::Enabling;
            e.slots[1] = Some(SlotUse::Reserved(task));
            let msg = self.message(MessageKind::EnablePort, VirtualAddress::new(node, SlotId::S0), Vec::new());
            out.messages.push(msg);
            Decision::EnableThenAssign(node)
        } else {
            self.grant(node, slot, task, out);
            Decision::Assign(node, slot)
        }
    }

    /// Applies the placement rules; `Queued` leaves the state untouched.
    fn decide(&mut self, req: PendingRequest, now: u64, out: &mut ManagerOutput) -> Decision {
        let task = req.task;
        if let Some(node) = self.try_idle(req.pe_type) {
            self.grant(node, SlotId::S0, task, out);
            return Decision::Assign(node, SlotId::S0);
        }
        if self.policy.prefer_virtualize_over_reconfig {
            if let Some((node, slot)) = self.try_share(req.pe_type) {
                return self.share(node, slot, task, out);
            }
        }
        if let Some(node) = self.try_empty() {
            return self.reconfigure(node, req.pe_type, task, now, out);
        }
        if !self.policy.prefer_virtualize_over_reconfig {
            if let Some((node, slot)) = self.try_share(req.pe_type) {
                return self.share(node, slot, task, out);
            }
        }
        if self.policy.allow_eviction {
            if let Some(node) = self.select_victim(req.pe_type) {
                return self.reconfigure(node, req.pe_type, task, now, out);
            }
        }
        Decision::Queued
    }

    fn drain_pending(&mut self, now: u64, out: &mut ManagerOutput) {
        let mut still = VecDeque::new();
        while let Some(req) = self.pending.pop_front() {
            let d = self.decide(req, now, out);
            if d == Decision::Queued {
                still.push_back(req);
            } else {
                out.decisions.push((req.task, d));
            }
        }
        self.pending = still;
    }

    pub fn handle_map_request(&mut self, msg: &Message, now: u64, out: &mut ManagerOutput) -> Result<Decision, ManagerError> {
        let bad = || ManagerError::UnexpectedMessage { kind: msg.kind, src: msg.src };
        let (&task, &code) = match msg.payload.as_slice() {
            [task, code] => (task, code),
            _ => return Err(bad()),
        };
        let pe_type = PeType::from_code(code).ok_or(ManagerError::UnknownPeType { code })?;
        if self.tasks.contains_key(&task) {
            return Err(ManagerError::DuplicateRequest { task });
        }
        self.tasks.insert(task, TaskRecord { host: msg.src, placement: None });
        let req = PendingRequest { task, pe_type };
        let d = self.decide(req, now, out);
        if d == Decision::Queued {
            self.pending.push_back(req);
        }
        out.decisions.push((task, d));
        Ok(d)
    }

    pub fn handle_release(&mut self, msg: &Message, now: u64, out: &mut ManagerOutput) -> Result<(), ManagerError> {
        let task = *msg.payload.first().ok_or(ManagerError::UnexpectedMessage { kind: msg.kind, src: msg.src })?;
        let record = self.tasks.remove(&task).ok_or(ManagerError::UnknownTask { task })?;
        let (node, slot) = record.placement.ok_or(ManagerError::UnknownTask { task })?;
        let e = self.entry_mut(node);
        e.slots[slot.index()] = None;
        e.last_used = now;
        let disable = e.active_slots() == 0 && e.port == PortMirror::Enabled;
        if disable {
            e.port = PortMirror::Disabling;
        }
        out.sideband.push(Sideband::SetTaskStatus { node, slot, status: TaskStatus::Inactive });
        let ack = self.message(MessageKind::ReleaseAck, record.host, vec![task]);
        out.messages.push(ack);
        if disable {
            let msg = self.message(MessageKind::DisablePort, VirtualAddress::new(node, SlotId::S0), Vec::new());
            out.messages.push(msg);
        }
        self.drain_pending(now, out);
        Ok(())
    }

    fn handle_enable_ack(&mut self, msg: &Message, out: &mut ManagerOutput) -> Result<(), ManagerError> {
        let node = msg.src.node;
        let entry = self.entry(node).ok_or(ManagerError::UnexpectedMessage { kind: msg.kind, src: msg.src })?;
        if entry.port != PortMirror::Enabling {
            return Err(ManagerError::UnexpectedMessage { kind: msg.kind, src: msg.src });
        }
        if msg.payload.first() != Some(&ACK_OK) {
            return Err(ManagerError::EnableRejected { node });
        }
        let Some(SlotUse::Reserved(task)) = entry.slots[1] else {
            return Err(ManagerError::UnexpectedMessage { kind: msg.kind, src: msg.src });
        };
        self.entry_mut(node).port = PortMirror::Enabled;
        self.grant(node, SlotId::S1, task, out);
        Ok(())
    }

    fn handle_disable_ack(&mut self, msg: &Message, now: u64, out: &mut ManagerOutput) -> Result<(), ManagerError> {
        let node = msg.src.node;
        let entry = self.entry(node).ok_or(ManagerError::UnexpectedMessage { kind: msg.kind, src: msg.src })?;
        if entry.port != PortMirror::Disabling {
            return Err(ManagerError::UnexpectedMessage { kind: msg.kind, src: msg.src });
        }
        if msg.payload.first() == Some(&ACK_OK) {
            self.entry_mut(node).port = PortMirror::Disabled;
            self.drain_pending(now, out);
        } else {
            // Local1 was not yet drained; ask again.
            let retry = self.message(MessageKind::DisablePort, VirtualAddress::new(node, SlotId::S0), Vec::new());
            out.messages.push(retry);
        }
        Ok(())
    }

    fn complete_reconfiguration(&mut self, now: u64, out: &mut ManagerOutput) -> bool {
        let due = self
            .directory
            .values()
            .filter_map(|e| match e.status {
                RegionMirror::Reconfiguring { ready_at } if ready_at <= now => Some((ready_at, e.node.row_major_key(), e.node)),
                _ => None,
            })
            .min();
        let Some((_, _, node)) = due else { return false };
        let e = self.entry_mut(node);
        e.status = RegionMirror::Configured;
        let Some(SlotUse::Reserved(task)) = e.slots[0] else { unreachable!("reconfiguration always reserves slot 0") };
        self.grant(node, SlotId::S0, task, out);
        true
    }

    /// One management action: a due reconfiguration completion, else the
    /// oldest inbound message.
    pub fn step(&mut self, now: u64) -> Result<ManagerOutput, ManagerError> {
        let mut out = ManagerOutput::default();
        if self.complete_reconfiguration(now, &mut out) {
            return Ok(out);
        }
        let Some(msg) = self.inbox.pop_front() else { return Ok(out) };
        match msg.kind {
            MessageKind::MapReq => {
                self.handle_map_request(&msg, now, &mut out)?;
            }
            MessageKind::Release => self.handle_release(&msg, now, &mut out)?,
            MessageKind::EnableAck => self.handle_enable_ack(&msg, &mut out)?,
            MessageKind::DisableAck => self.handle_disable_ack(&msg, now, &mut out)?,
            kind => return Err(ManagerError::UnexpectedMessage { kind, src: msg.src }),
        }
        Ok(out)
    }
}

impl Inbox for ManagerState {
    fn has_space(&self, _slot: SlotId) -> bool {
        true
    }

    fn deliver(&mut self, _slot: SlotId, msg: Message, _now: u64) {
        self.inbox.push_back(msg);
    }
}
