//! Wormhole mesh router: XY routing, credit flow control, round-robin output
//! arbitration, two local ports and the virtualization controller.
//!
//! Timing: a flit written into an input buffer during cycle `t` is eligible
//! for arbitration and forwarding in cycle `t + 1`; a flit forwarded onto a
//! mesh link is latched and enters the neighbour's buffer in the next cycle.
//! Flits forwarded to a local output go straight to the matching
//! DataReceive unit in the same cycle.

use std::collections::VecDeque;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::model::{Flit, MeshCoordinate, SlotId, VirtualAddress};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum PortId {
    East,
    West,
    North,
    South,
    Local0,
    Local1,
}

/// Fixed scan order of the round-robin arbiters.
pub const ARBITRATION_ORDER: [PortId; 6] =
    [PortId::East, PortId::West, PortId::North, PortId::South, PortId::Local0, PortId::Local1];

pub const LINK_PORTS: [PortId; 4] = [PortId::East, PortId::West, PortId::North, PortId::South];

impl PortId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_local(self) -> bool {
        matches!(self, PortId::Local0 | PortId::Local1)
    }

    pub fn local(slot: SlotId) -> Self {
        match slot {
            SlotId::S0 => PortId::Local0,
            SlotId::S1 => PortId::Local1,
        }
    }

    pub fn slot(self) -> Option<SlotId> {
        match self {
            PortId::Local0 => Some(SlotId::S0),
            PortId::Local1 => Some(SlotId::S1),
            _ => None,
        }
    }

    /// Port on the neighbour that faces this one.
    pub fn opposite(self) -> Self {
        match self {
            PortId::East => PortId::West,
            PortId::West => PortId::East,
            PortId::North => PortId::South,
            PortId::South => PortId::North,
            local => local,
        }
    }

    /// Neighbour reached through a link port, if any.
    pub fn neighbour(self, at: MeshCoordinate, width: u8, height: u8) -> Option<MeshCoordinate> {
        let (x, y) = (at.x as i16, at.y as i16);
        let (nx, ny) = match self {
            PortId::East => (x + 1, y),
            PortId::West => (x - 1, y),
            PortId::North => (x, y + 1),
            PortId::South => (x, y - 1),
            _ => return None,
        };
        (nx >= 0 && ny >= 0 && nx < width as i16 && ny < height as i16).then(|| MeshCoordinate::new(nx as u8, ny as u8))
    }

    pub fn name(self) -> &'static str {
        match self {
            PortId::East => "E",
            PortId::West => "W",
            PortId::North => "N",
            PortId::South => "S",
            PortId::Local0 => "L0",
            PortId::Local1 => "L1",
        }
    }
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dimension-ordered routing: resolve x, then y, then pick the local port by slot.
pub fn route_xy(current: MeshCoordinate, dst: VirtualAddress) -> PortId {
    use std::cmp::Ordering::*;
    match (dst.node.x.cmp(&current.x), dst.node.y.cmp(&current.y)) {
        (Greater, _) => PortId::East,
        (Less, _) => PortId::West,
        (Equal, Greater) => PortId::North,
        (Equal, Less) => PortId::South,
        (Equal, Equal) => PortId::local(dst.slot),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouterError {
    #[error("router {coord}: slot-1 flit arrived while Local1 is disabled")]
    Local1Disabled { coord: MeshCoordinate },
    #[error("router {coord}: input {port} overflowed its {capacity}-flit buffer")]
    BufferOverflow { coord: MeshCoordinate, port: PortId, capacity: usize },
    #[error("router {coord}: illegal control transition: {reason}")]
    IllegalTransition { coord: MeshCoordinate, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BufferedFlit {
    flit: Flit,
    entered: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputBuffer {
    fifo: VecDeque<BufferedFlit>,
    capacity: usize,
    drained: u64,
}

impl InputBuffer {
    fn new(capacity: usize) -> Self {
        Self { fifo: VecDeque::with_capacity(capacity), capacity, drained: 0 }
    }

    pub fn occupancy(&self) -> usize {
        self.fifo.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn has_space(&self) -> bool {
        self.fifo.len() < self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    /// Flits drained so far, which is also the number of credits returned.
    pub fn drained(&self) -> u64 {
        self.drained
    }

    fn eligible_head(&self, now: u64) -> Option<Flit> {
        self.fifo.front().filter(|b| b.entered < now).map(|b| b.flit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TaskStatus {
    Inactive,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualizationController {
    pub task_status: [TaskStatus; 2],
    pub local1_enabled: bool,
}

impl VirtualizationController {
    pub fn task(&self, slot: SlotId) -> TaskStatus {
        self.task_status[slot.index()]
    }

    pub fn both_active(&self) -> bool {
        self.task_status.iter().all(|s| *s == TaskStatus::Active)
    }
}

impl Default for VirtualizationController {
    fn default() -> Self {
        Self { task_status: [TaskStatus::Inactive; 2], local1_enabled: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlCommand {
    EnableLocal1,
    DisableLocal1,
    SetTaskStatus(SlotId, TaskStatus),
}

/// Wormhole ownership of an output port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Owner {
    pub input: PortId,
    /// Flits still to forward; unknown until the size flit has passed.
    pub remaining: Option<u16>,
    forwarded: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Forwarded {
    pub input: PortId,
    pub output: PortId,
    pub flit: Flit,
    /// First flit of its packet through this router.
    pub header: bool,
    /// Last flit of its packet; the output is released.
    pub tail: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleOutput {
    pub outgoing: [Option<Flit>; 6],
    /// One credit owed upstream per input port that drained a flit.
    pub credit_returns: [bool; 6],
    pub grants: Vec<(PortId, PortId)>,
    pub forwarded: Vec<Forwarded>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterState {
    pub coord: MeshCoordinate,
    has_local1: bool,
    in_buf: [InputBuffer; 6],
    credits: [usize; 6],
    out_owner: [Option<Owner>; 6],
    in_route: [Option<PortId>; 6],
    last_grant: [PortId; 6],
    pub vctrl: VirtualizationController,
}

impl RouterState {
    /// `has_local1` is false for conventional five-port routers.
    pub fn new(coord: MeshCoordinate, buffer_depth: usize, has_local1: bool) -> Self {
        Self {
            coord,
            has_local1,
            in_buf: std::array::from_fn(|_| InputBuffer::new(buffer_depth)),
            credits: [buffer_depth; 6],
            out_owner: [None; 6],
            in_route: [None; 6],
            // Pointer at the last port, so the first scan starts at East.
            last_grant: [PortId::Local1; 6],
            vctrl: VirtualizationController::default(),
        }
    }

    pub fn has_local1(&self) -> bool {
        self.has_local1
    }

    pub fn port_count(&self) -> usize {
        if self.has_local1 {
            6
        } else {
            5
        }
    }

    pub fn input(&self, port: PortId) -> &InputBuffer {
        &self.in_buf[port.index()]
    }

    pub fn owner(&self, output: PortId) -> Option<Owner> {
        self.out_owner[output.index()]
    }

    pub fn last_grant(&self, output: PortId) -> PortId {
        self.last_grant[output.index()]
    }

    pub fn credits(&self, output: PortId) -> usize {
        self.credits[output.index()]
    }

    pub fn is_idle(&self) -> bool {
        self.in_buf.iter().all(InputBuffer::is_empty) && self.out_owner.iter().all(Option::is_none)
    }

    pub fn buffered_flits(&self) -> usize {
        self.in_buf.iter().map(InputBuffer::occupancy).sum()
    }

    /// Writes a flit into an input buffer at cycle `now`.
    pub fn receive(&mut self, port: PortId, flit: Flit, now: u64) -> Result<(), RouterError> {
        if port == PortId::Local1 && !self.has_local1 {
            return Err(RouterError::Local1Disabled { coord: self.coord });
        }
        let buf = &mut self.in_buf[port.index()];
        if !buf.has_space() {
            return Err(RouterError::BufferOverflow { coord: self.coord, port, capacity: buf.capacity });
        }
        buf.fifo.push_back(BufferedFlit { flit, entered: now });
        Ok(())
    }

    pub fn return_credit(&mut self, output: PortId) {
        self.credits[output.index()] += 1;
    }

    fn requested_output(&self, input: PortId, now: u64) -> Result<Option<PortId>, RouterError> {
        if self.in_route[input.index()].is_some() {
            return Ok(None);
        }
        let Some(head) = self.in_buf[input.index()].eligible_head(now) else {
            return Ok(None);
        };
        let out = route_xy(self.coord, head.header_dst());
        if out == PortId::Local1 && !(self.has_local1 && self.vctrl.local1_enabled) {
            return Err(RouterError::Local1Disabled { coord: self.coord });
        }
        Ok(Some(out))
    }

    /// Grants free outputs to requesting header flits, round-robin per output.
    pub fn arbitrate(&mut self, now: u64) -> Result<Vec<(PortId, PortId)>, RouterError> {
        let mut requests: [Option<PortId>; 6] = [None; 6];
        for input in ARBITRATION_ORDER {
            requests[input.index()] = self.requested_output(input, now)?;
        }
        let mut grants = Vec::new();
        for output in ARBITRATION_ORDER {
            if self.out_owner[output.index()].is_some() {
                continue;
            }
            let start = self.last_grant[output.index()].index() + 1;
            let winner = (0..6)
                .map(|k| ARBITRATION_ORDER[(start + k) % 6])
                .find(|input| requests[input.index()] == Some(output));
            if let Some(input) = winner {
                self.out_owner[output.index()] = Some(Owner { input, remaining: None, forwarded: 0 });
                self.in_route[input.index()] = Some(output);
                self.last_grant[output.index()] = input;
                requests[input.index()] = None;
                grants.push((input, output));
            }
        }
        Ok(grants)
    }

    /// One cycle: arbitration then at most one flit per output.
    ///
    /// `local_ready[s]` tells whether DataReceive unit `s` accepts a flit.
    pub fn cycle(&mut self, now: u64, local_ready: [bool; 2]) -> Result<CycleOutput, RouterError> {
        let mut out = CycleOutput { grants: self.arbitrate(now)?, ..CycleOutput::default() };
        for output in ARBITRATION_ORDER {
            let Some(owner) = self.out_owner[output.index()] else { continue };
            let ready = match output.slot() {
                Some(slot) => local_ready[slot.index()],
                None => self.credits[output.index()] > 0,
            };
            if !ready {
                continue;
            }
            let buf = &mut self.in_buf[owner.input.index()];
            if buf.eligible_head(now).is_none() {
                continue;
            }
            let flit = buf.fifo.pop_front().map(|b| b.flit).expect("eligible head");
            buf.drained += 1;
            if !output.is_local() {
                self.credits[output.index()] -= 1;
            }
            out.credit_returns[owner.input.index()] = true;
            out.outgoing[output.index()] = Some(flit);

            let mut owner = owner;
            owner.forwarded += 1;
            let header = owner.forwarded == 1;
            owner.remaining = match (owner.forwarded, owner.remaining) {
                (1, _) => None,
                // The size flit counts the flits that follow it.
                (2, _) => Some(flit.value),
                (_, Some(r)) => Some(r - 1),
                (_, None) => unreachable!("size flit always precedes payload"),
            };
            let tail = owner.remaining == Some(0);
            if tail {
                self.out_owner[output.index()] = None;
                self.in_route[owner.input.index()] = None;
            } else {
                self.out_owner[output.index()] = Some(owner);
            }
            out.forwarded.push(Forwarded { input: owner.input, output, flit, header, tail });
        }
        Ok(out)
    }

    pub fn apply_control(&mut self, cmd: ControlCommand) -> Result<(), RouterError> {
        let illegal = |reason: &str| RouterError::IllegalTransition { coord: self.coord, reason: reason.to_string() };
        match cmd {
            ControlCommand::EnableLocal1 => {
                if !self.has_local1 {
                    return Err(illegal("conventional router has no Local1 port"));
                }
                self.vctrl.local1_enabled = true;
            }
            ControlCommand::DisableLocal1 => {
                if !self.has_local1 {
                    return Err(illegal("conventional router has no Local1 port"));
                }
                if self.vctrl.task(SlotId::S1) == TaskStatus::Active {
                    return Err(illegal("task_1 still active"));
                }
                if !self.local1_drained() {
                    return Err(illegal("Local1 still carries flits"));
                }
                self.vctrl.local1_enabled = false;
            }
            ControlCommand::SetTaskStatus(slot, status) => {
                if slot == SlotId::S1 && status == TaskStatus::Active && !self.vctrl.local1_enabled {
                    return Err(illegal("task_1 cannot be active while Local1 is disabled"));
                }
                self.vctrl.task_status[slot.index()] = status;
            }
        }
        Ok(())
    }

    fn local1_drained(&self) -> bool {
        let l1 = PortId::Local1.index();
        self.in_buf[l1].is_empty()
            && self.out_owner[l1].is_none()
            && self.in_route[l1].is_none()
            && !ARBITRATION_ORDER.iter().any(|&input| {
                self.in_route[input.index()].is_none()
                    && self.in_buf[input.index()]
                        .fifo
                        .front()
                        .is_some_and(|b| route_xy(self.coord, b.flit.header_dst()) == PortId::Local1)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_packet, Message, MessageKind};

    fn c(x: u8, y: u8) -> MeshCoordinate {
        MeshCoordinate::new(x, y)
    }

    fn va(x: u8, y: u8, slot: SlotId) -> VirtualAddress {
        VirtualAddress::new(c(x, y), slot)
    }

    fn packet(id: u16, dst: VirtualAddress, words: usize) -> Vec<Flit> {
        encode_packet(&Message::new(id, MessageKind::ComputeReq, va(0, 0, SlotId::S0), dst, vec![0xABCD; words])).unwrap()
    }

    #[test]
    fn x_before_y() {
        assert_eq!(route_xy(c(1, 1), va(2, 1, SlotId::S0)), PortId::East);
        assert_eq!(route_xy(c(1, 1), va(2, 0, SlotId::S0)), PortId::East);
        assert_eq!(route_xy(c(2, 1), va(2, 1, SlotId::S1)), PortId::Local1);
        assert_eq!(route_xy(c(2, 1), va(2, 1, SlotId::S0)), PortId::Local0);
    }

    #[test]
    fn path_oracle_from_2_2_to_0_1() {
        // Walk the route step by step; independent of any router state.
        let dst = va(0, 1, SlotId::S0);
        let mut at = c(2, 2);
        let mut hops = Vec::new();
        loop {
            let p = route_xy(at, dst);
            if p.is_local() {
                break;
            }
            hops.push(p);
            at = p.neighbour(at, 3, 3).unwrap();
        }
        assert_eq!(hops, vec![PortId::West, PortId::West, PortId::South]);
    }

    #[test]
    fn round_robin_walks_from_last_grant() {
        let mut r = RouterState::new(c(1, 1), 4, true);
        let east = va(2, 1, SlotId::S0);
        r.receive(PortId::West, packet(1, east, 0)[0], 0).unwrap();
        r.receive(PortId::Local0, packet(2, east, 0)[0], 0).unwrap();
        r.last_grant[PortId::East.index()] = PortId::West;
        let grants = r.arbitrate(1).unwrap();
        assert_eq!(grants, vec![(PortId::Local0, PortId::East)]);
    }

    #[test]
    fn single_request_granted() {
        let mut r = RouterState::new(c(1, 1), 4, true);
        r.receive(PortId::South, packet(1, va(1, 2, SlotId::S0), 0)[0], 0).unwrap();
        assert_eq!(r.arbitrate(1).unwrap(), vec![(PortId::South, PortId::North)]);
    }

    #[test]
    fn owned_output_blocks_new_header() {
        let mut r = RouterState::new(c(1, 1), 4, true);
        let east = va(2, 1, SlotId::S0);
        r.receive(PortId::West, packet(1, east, 1)[0], 0).unwrap();
        assert_eq!(r.arbitrate(1).unwrap().len(), 1);
        r.receive(PortId::North, packet(2, east, 1)[0], 1).unwrap();
        assert!(r.arbitrate(2).unwrap().is_empty());
    }

    #[test]
    fn flit_waits_one_cycle_in_buffer() {
        let mut r = RouterState::new(c(1, 1), 4, true);
        let f = packet(1, va(2, 1, SlotId::S0), 0);
        r.receive(PortId::West, f[0], 5).unwrap();
        let out = r.cycle(5, [true; 2]).unwrap();
        assert!(out.outgoing.iter().all(Option::is_none));
        let out = r.cycle(6, [true; 2]).unwrap();
        assert_eq!(out.outgoing[PortId::East.index()], Some(f[0]));
        assert!(out.credit_returns[PortId::West.index()]);
    }

    #[test]
    fn quiescent_router_is_unchanged() {
        let mut r = RouterState::new(c(0, 0), 4, true);
        let before = r.clone();
        let out = r.cycle(3, [true; 2]).unwrap();
        assert_eq!(out, CycleOutput::default());
        assert_eq!(r, before);
    }

    #[test]
    fn ownership_releases_after_tail() {
        let mut r = RouterState::new(c(1, 1), 8, true);
        let flits = packet(1, va(2, 1, SlotId::S0), 1);
        for (i, f) in flits.iter().enumerate() {
            r.receive(PortId::West, *f, i as u64).unwrap();
        }
        let mut sent = Vec::new();
        for now in 1..=6 {
            let out = r.cycle(now, [true; 2]).unwrap();
            sent.extend(out.forwarded);
        }
        assert_eq!(sent.len(), 6);
        assert!(sent[0].header && !sent[0].tail);
        assert!(sent[5].tail);
        assert!(r.owner(PortId::East).is_none());
        assert_eq!(r.credits(PortId::East), 2);
        assert_eq!(r.input(PortId::West).drained(), 6);
    }

    #[test]
    fn local_ports_forward_simultaneously() {
        let mut r = RouterState::new(c(2, 1), 4, true);
        r.apply_control(ControlCommand::EnableLocal1).unwrap();
        let a = packet(1, va(2, 1, SlotId::S0), 0);
        let b = packet(2, va(2, 1, SlotId::S1), 0);
        for i in 0..4 {
            r.receive(PortId::West, a[i], i as u64).unwrap();
            r.receive(PortId::East, b[i], i as u64).unwrap();
            let out = r.cycle(i as u64 + 1, [true; 2]).unwrap();
            assert_eq!(out.outgoing[PortId::Local0.index()], Some(a[i]));
            assert_eq!(out.outgoing[PortId::Local1.index()], Some(b[i]));
        }
    }

    #[test]
    fn slot_one_to_disabled_port_faults() {
        let mut r = RouterState::new(c(2, 1), 4, true);
        r.receive(PortId::West, packet(1, va(2, 1, SlotId::S1), 0)[0], 0).unwrap();
        assert!(matches!(r.cycle(1, [true; 2]), Err(RouterError::Local1Disabled { .. })));
    }

    #[test]
    fn control_transitions() {
        let mut r = RouterState::new(c(2, 1), 4, true);
        assert!(!r.vctrl.local1_enabled);
        r.apply_control(ControlCommand::EnableLocal1).unwrap();
        let once = r.clone();
        r.apply_control(ControlCommand::EnableLocal1).unwrap();
        assert_eq!(r, once);

        r.receive(PortId::Local1, packet(1, va(0, 0, SlotId::S0), 0)[0], 0).unwrap();
        assert!(matches!(r.apply_control(ControlCommand::DisableLocal1), Err(RouterError::IllegalTransition { .. })));

        let mut r = RouterState::new(c(2, 1), 4, true);
        r.apply_control(ControlCommand::EnableLocal1).unwrap();
        r.apply_control(ControlCommand::SetTaskStatus(SlotId::S1, TaskStatus::Active)).unwrap();
        assert!(r.apply_control(ControlCommand::DisableLocal1).is_err());
        r.apply_control(ControlCommand::SetTaskStatus(SlotId::S1, TaskStatus::Inactive)).unwrap();
        r.apply_control(ControlCommand::DisableLocal1).unwrap();
        assert!(!r.vctrl.local1_enabled);
        assert!(r.apply_control(ControlCommand::SetTaskStatus(SlotId::S1, TaskStatus::Active)).is_err());
    }

    #[test]
    fn conventional_router_rejects_local1() {
        let mut r = RouterState::new(c(0, 0), 4, false);
        assert_eq!(r.port_count(), 5);
        assert!(r.apply_control(ControlCommand::EnableLocal1).is_err());
        assert!(r.receive(PortId::Local1, Flit::raw(0), 0).is_err());
    }

    #[test]
    fn saturated_contention_alternates() {
        let mut r = RouterState::new(c(1, 1), 64, true);
        let east = va(2, 1, SlotId::S0);
        for k in 0..8u16 {
            for f in packet(k, east, 0) {
                r.receive(PortId::West, f, 0).unwrap();
            }
            for f in packet(100 + k, east, 0) {
                r.receive(PortId::North, f, 0).unwrap();
            }
        }
        let mut grants = Vec::new();
        for now in 1..200 {
            let out = r.cycle(now, [true; 2]).unwrap();
            grants.extend(out.grants.iter().map(|g| g.0));
            for _ in 0..out.outgoing.iter().flatten().count() {
                r.return_credit(PortId::East);
            }
        }
        assert_eq!(grants.len(), 16);
        for pair in grants.windows(2) {
            assert_ne!(pair[0], pair[1]);
        }
    }
}
