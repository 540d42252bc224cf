//! The cycle kernel.
//!
//! Every cycle runs six phases, each visiting nodes in row-major order:
//! link propagation, routers, network interfaces, attachments, region
//! timers, then the cycle counter. Link outputs are latched, so no phase
//! observes a later phase of the same cycle and node order has no effect.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::config::{ConfigError, SimConfig};
use crate::manager::{Decision, ManagerError, ManagerState, Mode, Sideband};
use crate::model::{MeshCoordinate, Message, MessageKind, SlotId, VirtualAddress};
use crate::ni::{Inbox, NetworkInterface, NiError, NiEvent, PacketKey};
use crate::pe::{PeError, PrrState, PrrStatus};
use crate::router::{ControlCommand, PortId, RouterError, RouterState, TaskStatus, LINK_PORTS};
use crate::stats::{digest_hex, mean, DecisionCounts, NetworkStats, PeStats, RunStats, TaskStats};
use crate::trace::{Trace, TraceEvent};
use crate::workload::{generate_workload, HostNode, TaskHostState, WorkloadError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimFault {
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Ni(#[from] NiError),
    #[error(transparent)]
    Pe(#[from] PeError),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("node {node} has no consumer for a {kind:?} message")]
    StrayDelivery { node: MeshCoordinate, kind: MessageKind },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation fault at cycle {cycle}: {fault}")]
    Fault { cycle: u64, fault: SimFault },
    #[error("watchdog expired at cycle {cycle}; stuck: {}", stuck.join("; "))]
    WatchdogTimeout { cycle: u64, stuck: Vec<String> },
    #[error("trace output failed: {0}")]
    TraceIo(String),
}

/// A packet whose tail reached its destination DataReceive unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveredPacket {
    pub key: PacketKey,
    pub dst: VirtualAddress,
    pub flits: usize,
    /// Cycle the header left the source router's local input.
    pub injected: u64,
    /// Cycle the tail entered the destination DataReceive unit.
    pub delivered: u64,
}

impl DeliveredPacket {
    pub fn latency(&self) -> u64 {
        self.delivered - self.injected
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetCounters {
    pub flits_injected: u64,
    pub flits_delivered: u64,
}

fn port_name(p: PortId) -> &'static str {
    p.name()
}

/// Routers, network interfaces and the links between them.
#[derive(Debug, Clone)]
pub struct Fabric {
    pub width: u8,
    pub height: u8,
    routers: Vec<RouterState>,
    nis: Vec<NetworkInterface>,
    /// Flit leaving node `i` through link port `d`, visible next cycle.
    flit_latch: Vec<[Option<crate::model::Flit>; 4]>,
    /// Input port `d` of node `i` freed a slot; credit travels next cycle.
    credit_latch: Vec<[bool; 4]>,
    local_out: Vec<[Option<crate::model::Flit>; 2]>,
    injected_at: HashMap<PacketKey, u64>,
    pub delivered: Vec<DeliveredPacket>,
    pub counters: NetCounters,
    events: Vec<NiEvent>,
}

impl Fabric {
    pub fn new(width: u8, height: u8, buffer_depth: usize, has_local1: bool) -> Self {
        let n = width as usize * height as usize;
        let coords = (0..height).flat_map(|y| (0..width).map(move |x| MeshCoordinate::new(x, y)));
        Self {
            width,
            height,
            routers: coords.clone().map(|c| RouterState::new(c, buffer_depth, has_local1)).collect(),
            nis: coords.map(NetworkInterface::new).collect(),
            flit_latch: vec![[None; 4]; n],
            credit_latch: vec![[false; 4]; n],
            local_out: vec![[None; 2]; n],
            injected_at: HashMap::new(),
            delivered: Vec::new(),
            counters: NetCounters::default(),
            events: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.routers.len()
    }

    pub fn index(&self, c: MeshCoordinate) -> usize {
        c.y as usize * self.width as usize + c.x as usize
    }

    pub fn coord(&self, i: usize) -> MeshCoordinate {
        MeshCoordinate::new((i % self.width as usize) as u8, (i / self.width as usize) as u8)
    }

    pub fn router(&self, c: MeshCoordinate) -> &RouterState {
        &self.routers[self.index(c)]
    }

    pub fn router_mut(&mut self, c: MeshCoordinate) -> &mut RouterState {
        let i = self.index(c);
        &mut self.routers[i]
    }

    pub fn ni(&self, c: MeshCoordinate) -> &NetworkInterface {
        &self.nis[self.index(c)]
    }

    pub fn ni_mut(&mut self, c: MeshCoordinate) -> &mut NetworkInterface {
        let i = self.index(c);
        &mut self.nis[i]
    }

    pub fn set_strip_tags(&mut self, strip: bool) {
        self.nis.iter_mut().for_each(|ni| ni.set_strip_tags(strip));
    }

    pub fn flits_in_flight(&self) -> u64 {
        let buffered: usize = self.routers.iter().map(RouterState::buffered_flits).sum();
        let latched = self.flit_latch.iter().flatten().filter(|f| f.is_some()).count();
        (buffered + latched) as u64
    }

    pub fn is_idle(&self) -> bool {
        self.routers.iter().all(RouterState::is_idle)
            && self.nis.iter().all(NetworkInterface::is_idle)
            && self.flit_latch.iter().flatten().all(Option::is_none)
            && self.credit_latch.iter().flatten().all(|c| !c)
    }

    /// Phases 1 to 3 of one cycle. `inboxes[i]` consumes what node `i` receives.
    pub fn network_phases<I: Inbox>(&mut self, now: u64, inboxes: &mut [I], trace: &mut Trace) -> Result<(), SimFault> {
        let (w, h) = (self.width, self.height);
        for i in 0..self.node_count() {
            let here = self.coord(i);
            for (d, port) in LINK_PORTS.iter().enumerate() {
                if let Some(flit) = self.flit_latch[i][d].take() {
                    let j = self.index(port.neighbour(here, w, h).expect("links stay inside the mesh"));
                    self.routers[j].receive(port.opposite(), flit, now)?;
                }
                if std::mem::take(&mut self.credit_latch[i][d]) {
                    let j = self.index(port.neighbour(here, w, h).expect("links stay inside the mesh"));
                    self.routers[j].return_credit(port.opposite());
                }
            }
        }

        for i in 0..self.node_count() {
            let ready = self.nis[i].dr_ready();
            let out = self.routers[i].cycle(now, ready)?;
            let here = self.coord(i);
            for &(input, output) in &out.grants {
                trace.record(now, TraceEvent::Grant, here, port_name(output), None, None, format_args!("in={}", input.name()));
            }
            for f in &out.forwarded {
                if trace.is_enabled() {
                    let tag = f.flit.tag;
                    trace.record(
                        now,
                        TraceEvent::Fwd,
                        here,
                        port_name(f.output),
                        tag.map(|t| t.packet_id),
                        tag.map(|t| t.ordinal),
                        format_args!("in={}", f.input.name()),
                    );
                }
                if f.header && f.input.is_local() {
                    if let Some(key) = self.nis[i].header_departed(f.input) {
                        self.injected_at.insert(key, now);
                    }
                }
            }
            for (d, port) in LINK_PORTS.iter().enumerate() {
                if let Some(flit) = out.outgoing[port.index()] {
                    self.flit_latch[i][d] = Some(flit);
                }
                if out.credit_returns[port.index()] {
                    self.credit_latch[i][d] = true;
                }
            }
            for slot in SlotId::ALL {
                self.local_out[i][slot.index()] = out.outgoing[PortId::local(slot).index()];
            }
        }

        #[allow(clippy::needless_range_loop)]
        for i in 0..self.node_count() {
            let here = self.coord(i);
            let mut events = std::mem::take(&mut self.events);
            for slot in SlotId::ALL {
                if let Some(flit) = self.local_out[i][slot.index()].take() {
                    self.counters.flits_delivered += 1;
                    self.nis[i].receive_flit(slot, flit, &mut events)?;
                }
            }
            self.nis[i].buffer_deliver(&mut inboxes[i], now, &mut events);
            self.nis[i].inject(&mut self.routers[i], now, &mut events)?;
            self.nis[i].intercept_control(&mut self.routers[i], &mut events)?;
            for ev in events.drain(..) {
                self.note(now, here, ev, trace);
            }
            self.events = events;
        }
        Ok(())
    }

    fn note(&mut self, now: u64, here: MeshCoordinate, ev: NiEvent, trace: &mut Trace) {
        match ev {
            NiEvent::AvReceive { slot, msg } => {
                let key = PacketKey::of(&msg);
                if let Some(injected) = self.injected_at.remove(&key) {
                    self.delivered.push(DeliveredPacket { key, dst: msg.dst, flits: msg.flit_len(), injected, delivered: now });
                }
                trace.record(now, TraceEvent::AvRcv, here, &slot.to_string(), Some(msg.id), None, format_args!("{:?}", msg.kind));
            }
            NiEvent::DataIn { slot, key } => {
                trace.record(now, TraceEvent::DataIn, here, &slot.to_string(), Some(key.id), None, format_args!("{:?}", key.kind));
            }
            NiEvent::Inject { port, flit, key } => {
                self.counters.flits_injected += 1;
                if trace.is_enabled() {
                    let tag = flit.tag;
                    trace.record(
                        now,
                        TraceEvent::Inj,
                        here,
                        port.name(),
                        tag.map(|t| t.packet_id),
                        tag.map(|t| t.ordinal),
                        format_args!("{:?}", key.kind),
                    );
                }
            }
            NiEvent::Control { slot, cmd, accepted } => {
                let verdict = if accepted { "accepted" } else { "rejected" };
                trace.record(now, TraceEvent::Ctrl, here, &slot.to_string(), None, None, format_args!("{cmd:?} {verdict}"));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Attachment {
    Prr(PrrState),
    Host(HostNode),
    Manager(ManagerState),
    None,
}

/// An attachment plus the messages it produced that the NI has not taken yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeAttachment {
    pub kind: Attachment,
    pub outbox: VecDeque<Message>,
    node: MeshCoordinate,
    fault: Option<SimFault>,
}

impl Inbox for NodeAttachment {
    fn has_space(&self, slot: SlotId) -> bool {
        match &self.kind {
            Attachment::Prr(prr) => prr.has_space(slot),
            _ => true,
        }
    }

    fn deliver(&mut self, slot: SlotId, msg: Message, now: u64) {
        let result = match &mut self.kind {
            Attachment::Prr(prr) => prr.enqueue(slot, msg, now).map_err(SimFault::from),
            Attachment::Host(host) => {
                host.inbox.push_back(msg);
                Ok(())
            }
            Attachment::Manager(m) => {
                m.deliver(slot, msg, now);
                Ok(())
            }
            Attachment::None => Err(SimFault::StrayDelivery { node: self.node, kind: msg.kind }),
        };
        if let Err(e) = result {
            self.fault.get_or_insert(e);
        }
    }
}

pub struct Simulation {
    config: SimConfig,
    pub fabric: Fabric,
    attachments: Vec<NodeAttachment>,
    cycle: u64,
    trace: Trace,
    virtualized: Vec<u64>,
    decisions: DecisionCounts,
    scratch: Vec<Message>,
}

impl Simulation {
    pub fn build(config: &SimConfig) -> Result<Self, SimError> {
        Self::with_trace(config, Trace::disabled())
    }

    pub fn with_trace(config: &SimConfig, trace: Trace) -> Result<Self, SimError> {
        config.validate()?;
        let fabric = Fabric::new(
            config.mesh.width,
            config.mesh.height,
            config.router.buffer_depth,
            config.mode == Mode::Vnoc,
        );
        let coords: Vec<MeshCoordinate> = (0..fabric.node_count()).map(|i| fabric.coord(i)).collect();
        let mut attachments: Vec<NodeAttachment> = coords
            .iter()
            .map(|&node| NodeAttachment { kind: Attachment::None, outbox: VecDeque::new(), node, fault: None })
            .collect();

        let roles = &config.roles;
        let prrs: Vec<_> = roles.prrs.iter().map(|p| (p.node, p.pe_type)).collect();
        let manager = ManagerState::new(roles.manager, &prrs, config.mode, config.policy, config.service.t_recfg);
        attachments[fabric.index(roles.manager)].kind = Attachment::Manager(manager);
        for p in &roles.prrs {
            attachments[fabric.index(p.node)].kind =
                Attachment::Prr(PrrState::new(p.node, p.pe_type, config.pe_queue_capacity));
        }
        for &h in &roles.hosts {
            attachments[fabric.index(h)].kind = Attachment::Host(HostNode::new(h, roles.manager));
        }
        let w = &config.workload;
        for (i, spec) in generate_workload(w.n_tasks, w.mix, w.template(), &w.arrival, config.seed).into_iter().enumerate() {
            let host = roles.hosts[i % roles.hosts.len()];
            let Attachment::Host(node) = &mut attachments[fabric.index(host)].kind else { unreachable!("host role") };
            node.tasks.push(TaskHostState::new(spec, host));
        }

        let n = fabric.node_count();
        Ok(Self {
            config: config.clone(),
            fabric,
            attachments,
            cycle: 0,
            trace,
            virtualized: vec![0; n],
            decisions: DecisionCounts::default(),
            scratch: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Injects untagged flits; results must not change.
    pub fn set_strip_tags(&mut self, strip: bool) {
        self.fabric.set_strip_tags(strip);
    }

    pub fn attachment(&self, c: MeshCoordinate) -> &Attachment {
        &self.attachments[self.fabric.index(c)].kind
    }

    pub fn manager(&self) -> &ManagerState {
        let i = self.fabric.index(self.config.roles.manager);
        match &self.attachments[i].kind {
            Attachment::Manager(m) => m,
            _ => unreachable!("manager role"),
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskHostState> {
        self.attachments.iter().filter_map(|a| match &a.kind {
            Attachment::Host(h) => Some(h.tasks.iter()),
            _ => None,
        }).flatten()
    }

    pub fn prrs(&self) -> impl Iterator<Item = &PrrState> {
        self.attachments.iter().filter_map(|a| match &a.kind {
            Attachment::Prr(p) => Some(p),
            _ => None,
        })
    }

    fn fault(&self, fault: impl Into<SimFault>) -> SimError {
        SimError::Fault { cycle: self.cycle, fault: fault.into() }
    }

    /// Advances the world by one cycle.
    pub fn step(&mut self) -> Result<(), SimError> {
        let now = self.cycle;
        if let Err(f) = self.fabric.network_phases(now, &mut self.attachments, &mut self.trace) {
            return Err(self.fault(f));
        }
        if let Some(f) = self.attachments.iter_mut().find_map(|a| a.fault.take()) {
            return Err(self.fault(f));
        }
        for i in 0..self.attachments.len() {
            self.attachment_phase(i, now)?;
        }
        for i in 0..self.attachments.len() {
            if let Attachment::Prr(prr) = &mut self.attachments[i].kind {
                if prr.tick(now) {
                    let t = prr.pe_type().expect("configured");
                    self.trace.record(now, TraceEvent::RecfgEnd, prr.node, "", None, None, t);
                }
                if self.fabric.routers[i].vctrl.both_active() {
                    self.virtualized[i] += 1;
                }
            }
        }
        self.cycle += 1;
        Ok(())
    }

    fn attachment_phase(&mut self, i: usize, now: u64) -> Result<(), SimError> {
        let here = self.fabric.coord(i);
        let mut sideband = Vec::new();
        let mut out = std::mem::take(&mut self.scratch);
        match &mut self.attachments[i].kind {
            Attachment::Prr(prr) => {
                let step = prr.step(now, &self.config.service).map_err(|e| SimError::Fault { cycle: now, fault: e.into() })?;
                if let Some((slot, id)) = step.finished {
                    self.trace.record(now, TraceEvent::SvcEnd, here, &slot.to_string(), Some(id), None, "");
                }
                if let Some((slot, id, service)) = step.started {
                    self.trace.record(now, TraceEvent::SvcStart, here, &slot.to_string(), Some(id), None, format_args!("service={service}"));
                }
                out.extend(step.reply);
            }
            Attachment::Host(host) => {
                host.step(now, &self.config.workload.operands, &mut out)
                    .map_err(|e| SimError::Fault { cycle: now, fault: e.into() })?;
            }
            Attachment::Manager(m) => {
                let step = m.step(now).map_err(|e| SimError::Fault { cycle: now, fault: e.into() })?;
                for (task, d) in &step.decisions {
                    match d {
                        Decision::Assign(..) => self.decisions.assign += 1,
                        Decision::EnableThenAssign(_) => self.decisions.enable_then_assign += 1,
                        Decision::ReconfigThenAssign(..) => self.decisions.reconfig_then_assign += 1,
                        Decision::Queued => self.decisions.queued += 1,
                    }
                    let pending = m.pending_len();
                    self.trace.record(now, TraceEvent::Decision, here, "", None, None, format_args!("task={task} {d} pending={pending}"));
                }
                out.extend(step.messages);
                sideband = step.sideband;
            }
            Attachment::None => {}
        }
        for cmd in sideband {
            self.apply_sideband(cmd, now)?;
        }
        let a = &mut self.attachments[i];
        a.outbox.extend(out.drain(..));
        self.scratch = out;
        let ni = &mut self.fabric.nis[i];
        while ni.can_send() {
            let Some(msg) = a.outbox.pop_front() else { break };
            ni.send(msg).expect("space checked");
        }
        Ok(())
    }

    fn apply_sideband(&mut self, cmd: Sideband, now: u64) -> Result<(), SimError> {
        match cmd {
            Sideband::SetTaskStatus { node, slot, status } => {
                let router = self.fabric.router_mut(node);
                router.apply_control(ControlCommand::SetTaskStatus(slot, status)).map_err(|e| self.fault(e))?;
                self.trace.record(now, TraceEvent::Ctrl, node, &slot.to_string(), None, None, format_args!("SetTaskStatus {status:?}"));
            }
            Sideband::Reconfigure { node, pe_type } => {
                let tasks_active = self.fabric.router(node).vctrl.task_status.contains(&TaskStatus::Active);
                let i = self.fabric.index(node);
                let Attachment::Prr(prr) = &mut self.attachments[i].kind else {
                    unreachable!("manager directory only holds regions")
                };
                let ready_at = prr
                    .reconfigure(pe_type, now, self.config.service.t_recfg, tasks_active)
                    .map_err(|e| SimError::Fault { cycle: now, fault: e.into() })?;
                self.trace.record(now, TraceEvent::RecfgStart, node, "", None, None, format_args!("{pe_type} ready_at={ready_at}"));
            }
        }
        Ok(())
    }

    pub fn all_tasks_done(&self) -> bool {
        self.tasks().all(TaskHostState::is_done)
    }

    /// Every task finished and nothing is left anywhere in the system.
    pub fn is_drained(&self) -> bool {
        self.all_tasks_done()
            && self.fabric.is_idle()
            && self.manager().is_quiescent()
            && self.attachments.iter().all(|a| a.outbox.is_empty())
            && self.prrs().all(PrrState::is_idle)
    }

    fn stuck_report(&self) -> Vec<String> {
        let mut stuck = Vec::new();
        for t in self.tasks().filter(|t| !t.is_done()) {
            stuck.push(format!("task {} on {} in {:?} ({}/{} replies)", t.spec.task_id, t.host_node, t.phase, t.completed, t.spec.num_requests));
        }
        for i in 0..self.fabric.node_count() {
            let r = &self.fabric.routers[i];
            if !r.is_idle() {
                stuck.push(format!("router {} holds {} flits", r.coord, r.buffered_flits()));
            }
        }
        let m = self.manager();
        if m.pending_len() > 0 {
            stuck.push(format!("manager has {} queued requests", m.pending_len()));
        }
        for p in self.prrs() {
            if let PrrStatus::Reconfiguring { ready_at, .. } = p.status {
                stuck.push(format!("region {} reconfiguring until {ready_at}", p.node));
            }
        }
        stuck
    }

    /// Steps until drained or the watchdog expires.
    pub fn run(&mut self) -> Result<RunStats, SimError> {
        while !self.is_drained() {
            if self.cycle >= self.config.watchdog {
                return Err(SimError::WatchdogTimeout { cycle: self.cycle, stuck: self.stuck_report() });
            }
            self.step()?;
        }
        self.trace.finish().map_err(|e| SimError::TraceIo(e.to_string()))?;
        Ok(self.stats())
    }

    pub fn makespan(&self) -> u64 {
        self.tasks().filter_map(|t| t.finish_cycle).max().unwrap_or(0)
    }

    pub fn stats(&self) -> RunStats {
        let makespan = self.makespan();
        let mut tasks: Vec<TaskStats> = self
            .tasks()
            .map(|t| {
                let lat = &t.request_latencies;
                TaskStats {
                    id: t.spec.task_id,
                    pe_type: t.spec.pe_type,
                    host: t.host_node,
                    assigned: t.assigned,
                    start: t.start_cycle,
                    finish: t.finish_cycle,
                    requests: t.completed,
                    mean_request_latency: mean(lat.iter().sum(), lat.len() as u64),
                    max_request_latency: lat.iter().copied().max().unwrap_or(0),
                }
            })
            .collect();
        tasks.sort_by_key(|t| t.id);
        let pes = self
            .config
            .roles
            .prrs
            .iter()
            .map(|p| {
                let i = self.fabric.index(p.node);
                let Attachment::Prr(prr) = &self.attachments[i].kind else { unreachable!("region role") };
                PeStats {
                    node: p.node,
                    pe_type: prr.pe_type(),
                    busy_cycles: prr.busy_cycles,
                    utilization: if makespan == 0 { 0.0 } else { prr.busy_cycles as f64 / makespan as f64 },
                    reconfig_count: prr.reconfig_count,
                    virtualized_cycles: self.virtualized[i],
                    served: prr.served,
                }
            })
            .collect();
        let d = &self.fabric.delivered;
        let network = NetworkStats {
            packets: d.len() as u64,
            flits: self.fabric.counters.flits_delivered,
            mean_packet_latency: mean(d.iter().map(DeliveredPacket::latency).sum(), d.len() as u64),
            max_packet_latency: d.iter().map(DeliveredPacket::latency).max().unwrap_or(0),
        };
        RunStats {
            mode: self.config.mode,
            seed: self.config.seed,
            config_digest: digest_hex(self.config.digest()),
            workload_digest: digest_hex(self.config.workload_digest()),
            makespan_cycles: makespan,
            cycles_simulated: self.cycle,
            verified_replies: self.tasks().map(|t| t.verified_replies).sum(),
            decisions: self.decisions,
            tasks,
            pes,
            network,
        }
    }
}
