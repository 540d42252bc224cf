//! Network interface: two DataReceive units, the Data_in handoff registers,
//! the egress send unit and interception of port-control packets.

use std::collections::VecDeque;

use thiserror::Error;

use crate::model::{decode_packet, encode_packet, CodecError, Flit, MeshCoordinate, Message, MessageKind, SlotId, VirtualAddress};
use crate::router::{ControlCommand, PortId, RouterError, RouterState};

pub const SEND_QUEUE_CAPACITY: usize = 8;

/// Payload word of an acknowledgement that rejected the command.
pub const NACK: u32 = 1;
pub const ACK_OK: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NiError {
    #[error("NI {node}: {source}")]
    Codec { node: MeshCoordinate, source: CodecError },
    #[error("NI {node}: send queue full")]
    SendQueueFull { node: MeshCoordinate },
    #[error("NI {node}: DataReceive {slot} got a flit while holding a complete packet")]
    ReceiverBusy { node: MeshCoordinate, slot: SlotId },
    #[error("NI {node}: packet for slot {expected} arrived on DataReceive {slot}")]
    SlotMismatch { node: MeshCoordinate, slot: SlotId, expected: SlotId },
}

/// Identifies a packet for latency bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PacketKey {
    pub src: VirtualAddress,
    pub kind: MessageKind,
    pub id: u16,
}

impl PacketKey {
    pub fn of(msg: &Message) -> Self {
        Self { src: msg.src, kind: msg.kind, id: msg.id }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataReceiveState {
    pub slot: SlotId,
    accum: Vec<Flit>,
    expected_remaining: Option<u16>,
    pub av_receive: bool,
    assembled: Option<Message>,
}

impl DataReceiveState {
    pub fn new(slot: SlotId) -> Self {
        Self { slot, accum: Vec::new(), expected_remaining: None, av_receive: false, assembled: None }
    }

    pub fn ready(&self) -> bool {
        !self.av_receive
    }

    pub fn is_idle(&self) -> bool {
        self.accum.is_empty() && !self.av_receive
    }

    pub fn assembled(&self) -> Option<&Message> {
        self.assembled.as_ref()
    }

    pub fn partial_len(&self) -> usize {
        self.accum.len()
    }

    /// Appends one flit; returns true when the packet became complete.
    pub fn receive_flit(&mut self, flit: Flit) -> Result<bool, CodecError> {
        debug_assert!(!self.av_receive, "DataReceive must be ready");
        self.accum.push(flit);
        match self.accum.len() {
            1 => {}
            2 => self.expected_remaining = Some(flit.value),
            _ => {
                if let Some(r) = self.expected_remaining.as_mut() {
                    *r = r.saturating_sub(1);
                }
            }
        }
        if self.expected_remaining != Some(0) {
            return Ok(false);
        }
        let flits = std::mem::take(&mut self.accum);
        self.expected_remaining = None;
        let msg = decode_packet(&flits)?;
        self.assembled = Some(msg);
        self.av_receive = true;
        Ok(true)
    }

    fn take(&mut self) -> Option<Message> {
        let msg = self.assembled.take();
        if msg.is_some() {
            self.av_receive = false;
        }
        msg
    }
}

/// Data_in_0 / Data_in_1 handoff registers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BufferController {
    data_in: [Option<Message>; 2],
}

impl BufferController {
    pub fn occupied(&self, slot: SlotId) -> bool {
        self.data_in[slot.index()].is_some()
    }

    pub fn peek(&self, slot: SlotId) -> Option<&Message> {
        self.data_in[slot.index()].as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct InFlight {
    flits: Vec<Flit>,
    cursor: usize,
    port: PortId,
    key: PacketKey,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SendUnit {
    queue: VecDeque<Message>,
    current: Option<InFlight>,
}

impl SendUnit {
    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn is_full(&self) -> bool {
        self.queue.len() >= SEND_QUEUE_CAPACITY
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.current.is_none()
    }
}

/// Consumer of delivered messages (a PE, a host or the manager).
pub trait Inbox {
    fn has_space(&self, slot: SlotId) -> bool;
    fn deliver(&mut self, slot: SlotId, msg: Message, now: u64);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NiEvent {
    AvReceive { slot: SlotId, msg: Message },
    DataIn { slot: SlotId, key: PacketKey },
    Inject { port: PortId, flit: Flit, key: PacketKey },
    Control { slot: SlotId, cmd: ControlCommand, accepted: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkInterface {
    pub node: MeshCoordinate,
    dr: [DataReceiveState; 2],
    pub buffers: BufferController,
    pub send: SendUnit,
    /// Packets whose header is inside a local input buffer, oldest first.
    awaiting_departure: [VecDeque<PacketKey>; 2],
    next_ack_id: u16,
    strip_tags: bool,
}

impl NetworkInterface {
    pub fn new(node: MeshCoordinate) -> Self {
        Self {
            node,
            dr: [DataReceiveState::new(SlotId::S0), DataReceiveState::new(SlotId::S1)],
            buffers: BufferController::default(),
            send: SendUnit::default(),
            awaiting_departure: Default::default(),
            next_ack_id: 0,
            strip_tags: false,
        }
    }

    /// Injects flits without observability tags.
    pub fn set_strip_tags(&mut self, strip: bool) {
        self.strip_tags = strip;
    }

    pub fn dr(&self, slot: SlotId) -> &DataReceiveState {
        &self.dr[slot.index()]
    }

    pub fn dr_ready(&self) -> [bool; 2] {
        [self.dr[0].ready(), self.dr[1].ready()]
    }

    pub fn is_idle(&self) -> bool {
        self.dr.iter().all(DataReceiveState::is_idle)
            && self.buffers.data_in.iter().all(Option::is_none)
            && self.send.is_idle()
    }

    /// Feeds a flit from router local output `slot` into DataReceive `slot`.
    pub fn receive_flit(&mut self, slot: SlotId, flit: Flit, events: &mut Vec<NiEvent>) -> Result<(), NiError> {
        let node = self.node;
        let dr = &mut self.dr[slot.index()];
        if dr.av_receive {
            return Err(NiError::ReceiverBusy { node, slot });
        }
        let complete = dr.receive_flit(flit).map_err(|source| NiError::Codec { node, source })?;
        if complete {
            let msg = dr.assembled.clone().expect("complete packet");
            if msg.dst.slot != slot {
                return Err(NiError::SlotMismatch { node, slot, expected: msg.dst.slot });
            }
            events.push(NiEvent::AvReceive { slot, msg });
        }
        Ok(())
    }

    /// Data_in registers drain into the consumer, then completed packets move
    /// from the DataReceive units into free registers.
    pub fn buffer_deliver(&mut self, inbox: &mut dyn Inbox, now: u64, events: &mut Vec<NiEvent>) {
        for slot in SlotId::ALL {
            let i = slot.index();
            let is_control = self.buffers.data_in[i].as_ref().is_some_and(|m| m.kind.is_port_control());
            if self.buffers.data_in[i].is_some() && !is_control && inbox.has_space(slot) {
                let msg = self.buffers.data_in[i].take().expect("occupied");
                inbox.deliver(slot, msg, now);
            }
        }
        for slot in SlotId::ALL {
            let i = slot.index();
            if self.dr[i].av_receive && self.buffers.data_in[i].is_none() {
                let msg = self.dr[i].take().expect("assembled");
                events.push(NiEvent::DataIn { slot, key: PacketKey::of(&msg) });
                self.buffers.data_in[i] = Some(msg);
            }
        }
    }

    /// Queues a message for injection.
    pub fn send(&mut self, msg: Message) -> Result<(), NiError> {
        if self.send.is_full() {
            return Err(NiError::SendQueueFull { node: self.node });
        }
        self.send.queue.push_back(msg);
        Ok(())
    }

    pub fn can_send(&self) -> bool {
        !self.send.is_full()
    }

    fn egress_port(router: &RouterState, src_slot: SlotId) -> PortId {
        if src_slot == SlotId::S1 && router.has_local1() && router.vctrl.local1_enabled {
            PortId::Local1
        } else {
            PortId::Local0
        }
    }

    /// Writes at most one flit into the router's local input buffer.
    pub fn inject(&mut self, router: &mut RouterState, now: u64, events: &mut Vec<NiEvent>) -> Result<(), NiError> {
        if self.send.current.is_none() {
            if let Some(msg) = self.send.queue.pop_front() {
                let mut flits = encode_packet(&msg).map_err(|source| NiError::Codec { node: self.node, source })?;
                if self.strip_tags {
                    flits.iter_mut().for_each(|f| *f = f.stripped());
                }
                self.send.current = Some(InFlight {
                    flits,
                    cursor: 0,
                    port: Self::egress_port(router, msg.src.slot),
                    key: PacketKey::of(&msg),
                });
            }
        }
        let Some(cur) = self.send.current.as_mut() else { return Ok(()) };
        if !router.input(cur.port).has_space() {
            return Ok(());
        }
        let flit = cur.flits[cur.cursor];
        router.receive(cur.port, flit, now).expect("space checked");
        if cur.cursor == 0 {
            self.awaiting_departure[cur.port.slot().expect("local").index()].push_back(cur.key);
        }
        events.push(NiEvent::Inject { port: cur.port, flit, key: cur.key });
        cur.cursor += 1;
        if cur.cursor == cur.flits.len() {
            self.send.current = None;
        }
        Ok(())
    }

    /// Called when the router forwards a header out of a local input port.
    pub fn header_departed(&mut self, port: PortId) -> Option<PacketKey> {
        self.awaiting_departure[port.slot()?.index()].pop_front()
    }

    /// Consumes EnablePort/DisablePort packets sitting in Data_in, applies them
    /// to the co-located router and queues the acknowledgement.
    pub fn intercept_control(&mut self, router: &mut RouterState, events: &mut Vec<NiEvent>) -> Result<(), NiError> {
        for slot in SlotId::ALL {
            let Some(msg) = self.buffers.data_in[slot.index()].as_ref() else { continue };
            if !msg.kind.is_port_control() || self.send.is_full() {
                continue;
            }
            let msg = self.buffers.data_in[slot.index()].take().expect("checked");
            let (cmd, ack_kind) = match msg.kind {
                MessageKind::EnablePort => (ControlCommand::EnableLocal1, MessageKind::EnableAck),
                _ => (ControlCommand::DisableLocal1, MessageKind::DisableAck),
            };
            let accepted = match router.apply_control(cmd) {
                Ok(()) => true,
                Err(RouterError::IllegalTransition { .. }) => false,
                Err(other) => unreachable!("control commands only fail as illegal transitions: {other}"),
            };
            events.push(NiEvent::Control { slot, cmd, accepted });
            let id = self.next_ack_id;
            self.next_ack_id = self.next_ack_id.wrapping_add(1);
            let ack = Message::new(id, ack_kind, msg.dst, msg.src, vec![if accepted { ACK_OK } else { NACK }]);
            self.send(ack)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::TaskStatus;

    #[derive(Default)]
    struct Sink {
        cap: usize,
        got: Vec<(SlotId, Message, u64)>,
    }

    impl Inbox for Sink {
        fn has_space(&self, slot: SlotId) -> bool {
            self.got.iter().filter(|g| g.0 == slot).count() < self.cap
        }
        fn deliver(&mut self, slot: SlotId, msg: Message, now: u64) {
            self.got.push((slot, msg, now));
        }
    }

    fn coord(x: u8, y: u8) -> MeshCoordinate {
        MeshCoordinate::new(x, y)
    }

    fn reference_request(slot: SlotId) -> Message {
        Message::new(
            7,
            MessageKind::ComputeReq,
            VirtualAddress::new(coord(0, 1), SlotId::S0),
            VirtualAddress::new(coord(2, 1), slot),
            vec![48, 18],
        )
    }

    fn control(kind: MessageKind) -> Message {
        Message::new(
            3,
            kind,
            VirtualAddress::new(coord(0, 0), SlotId::S0),
            VirtualAddress::new(coord(2, 1), SlotId::S0),
            vec![],
        )
    }

    #[test]
    fn assembles_reference_packet_flit_by_flit() {
        let msg = reference_request(SlotId::S0);
        let flits = encode_packet(&msg).unwrap();
        let mut dr = DataReceiveState::new(SlotId::S0);
        for (i, f) in flits.iter().enumerate() {
            let done = dr.receive_flit(*f).unwrap();
            assert_eq!(done, i == 7);
            assert_eq!(dr.av_receive, i == 7);
        }
        assert_eq!(dr.assembled(), Some(&msg));
    }

    #[test]
    fn header_only_is_incomplete() {
        let mut dr = DataReceiveState::new(SlotId::S0);
        let flits = encode_packet(&reference_request(SlotId::S0)).unwrap();
        assert!(!dr.receive_flit(flits[0]).unwrap());
        assert!(!dr.av_receive);
        assert_eq!(dr.partial_len(), 1);
    }

    fn fill(ni: &mut NetworkInterface, msg: &Message) {
        let mut ev = Vec::new();
        for f in encode_packet(msg).unwrap() {
            ni.receive_flit(msg.dst.slot, f, &mut ev).unwrap();
        }
    }

    #[test]
    fn handoff_goes_dr_then_data_in_then_consumer() {
        let mut ni = NetworkInterface::new(coord(2, 1));
        let mut sink = Sink { cap: 4, ..Default::default() };
        let mut ev = Vec::new();
        fill(&mut ni, &reference_request(SlotId::S0));
        ni.buffer_deliver(&mut sink, 10, &mut ev);
        assert!(ni.dr(SlotId::S0).ready());
        assert!(ni.buffers.occupied(SlotId::S0));
        assert!(sink.got.is_empty());
        ni.buffer_deliver(&mut sink, 11, &mut ev);
        assert_eq!(sink.got.len(), 1);
        assert_eq!(sink.got[0].2, 11);
    }

    #[test]
    fn both_slots_move_in_same_cycle() {
        let mut ni = NetworkInterface::new(coord(2, 1));
        let mut sink = Sink { cap: 4, ..Default::default() };
        let mut ev = Vec::new();
        fill(&mut ni, &reference_request(SlotId::S0));
        fill(&mut ni, &reference_request(SlotId::S1));
        ni.buffer_deliver(&mut sink, 0, &mut ev);
        assert!(ni.buffers.occupied(SlotId::S0) && ni.buffers.occupied(SlotId::S1));
        ni.buffer_deliver(&mut sink, 1, &mut ev);
        let slots: Vec<SlotId> = sink.got.iter().map(|g| g.0).collect();
        assert_eq!(slots, vec![SlotId::S0, SlotId::S1]);
    }

    #[test]
    fn full_consumer_backpressures_dr() {
        let mut ni = NetworkInterface::new(coord(2, 1));
        let mut sink = Sink { cap: 0, ..Default::default() };
        let mut ev = Vec::new();
        fill(&mut ni, &reference_request(SlotId::S0));
        ni.buffer_deliver(&mut sink, 0, &mut ev);
        fill(&mut ni, &reference_request(SlotId::S0));
        ni.buffer_deliver(&mut sink, 1, &mut ev);
        assert!(ni.buffers.occupied(SlotId::S0));
        assert!(!ni.dr(SlotId::S0).ready());
        assert_eq!(ni.dr_ready(), [false, true]);
    }

    #[test]
    fn slot_one_reply_uses_local1_when_enabled() {
        let mut router = RouterState::new(coord(2, 1), 4, true);
        router.apply_control(ControlCommand::EnableLocal1).unwrap();
        let mut ni = NetworkInterface::new(coord(2, 1));
        let mut reply = reference_request(SlotId::S0);
        reply.src = VirtualAddress::new(coord(2, 1), SlotId::S1);
        reply.dst = VirtualAddress::new(coord(0, 2), SlotId::S0);
        ni.send(reply.clone()).unwrap();
        let mut ev = Vec::new();
        ni.inject(&mut router, 0, &mut ev).unwrap();
        assert_eq!(router.input(PortId::Local1).occupancy(), 1);

        let mut router = RouterState::new(coord(2, 1), 4, true);
        let mut ni = NetworkInterface::new(coord(2, 1));
        ni.send(reply).unwrap();
        ni.inject(&mut router, 0, &mut ev).unwrap();
        assert_eq!(router.input(PortId::Local0).occupancy(), 1);
    }

    #[test]
    fn idle_send_unit_injects_nothing() {
        let mut router = RouterState::new(coord(0, 0), 4, true);
        let mut ni = NetworkInterface::new(coord(0, 0));
        let mut ev = Vec::new();
        ni.inject(&mut router, 0, &mut ev).unwrap();
        assert!(ev.is_empty());
        assert!(router.is_idle());
    }

    #[test]
    fn injection_respects_buffer_space() {
        let mut router = RouterState::new(coord(0, 0), 4, true);
        let mut ni = NetworkInterface::new(coord(0, 0));
        ni.send(reference_request(SlotId::S0)).unwrap();
        let mut ev = Vec::new();
        for now in 0..10 {
            ni.inject(&mut router, now, &mut ev).unwrap();
        }
        assert_eq!(router.input(PortId::Local0).occupancy(), 4);
        assert_eq!(ev.len(), 4);
    }

    #[test]
    fn send_queue_bound() {
        let mut ni = NetworkInterface::new(coord(0, 0));
        for _ in 0..SEND_QUEUE_CAPACITY {
            ni.send(reference_request(SlotId::S0)).unwrap();
        }
        assert!(matches!(ni.send(reference_request(SlotId::S0)), Err(NiError::SendQueueFull { .. })));
    }

    #[test]
    fn enable_port_is_intercepted_and_acked() {
        let mut router = RouterState::new(coord(2, 1), 4, true);
        let mut ni = NetworkInterface::new(coord(2, 1));
        let mut sink = Sink { cap: 4, ..Default::default() };
        let mut ev = Vec::new();
        fill(&mut ni, &control(MessageKind::EnablePort));
        ni.buffer_deliver(&mut sink, 0, &mut ev);
        ni.intercept_control(&mut router, &mut ev).unwrap();
        assert!(router.vctrl.local1_enabled);
        assert!(sink.got.is_empty());
        let ack = ni.send.queue.front().unwrap();
        assert_eq!(ack.kind, MessageKind::EnableAck);
        assert_eq!(ack.dst.node, coord(0, 0));
        assert_eq!(ack.payload, vec![ACK_OK]);
    }

    #[test]
    fn disable_while_local1_busy_nacks() {
        let mut router = RouterState::new(coord(2, 1), 4, true);
        router.apply_control(ControlCommand::EnableLocal1).unwrap();
        router.receive(PortId::Local1, Flit::raw(0x0000), 0).unwrap();
        let mut ni = NetworkInterface::new(coord(2, 1));
        let mut sink = Sink { cap: 4, ..Default::default() };
        let mut ev = Vec::new();
        fill(&mut ni, &control(MessageKind::DisablePort));
        ni.buffer_deliver(&mut sink, 0, &mut ev);
        ni.intercept_control(&mut router, &mut ev).unwrap();
        assert!(router.vctrl.local1_enabled);
        let ack = ni.send.queue.front().unwrap();
        assert_eq!(ack.kind, MessageKind::DisableAck);
        assert_eq!(ack.payload, vec![NACK]);
        assert_eq!(router.vctrl.task(SlotId::S1), TaskStatus::Inactive);
    }

    #[test]
    fn compute_request_passes_through() {
        let mut router = RouterState::new(coord(2, 1), 4, true);
        let mut ni = NetworkInterface::new(coord(2, 1));
        let mut sink = Sink { cap: 4, ..Default::default() };
        let mut ev = Vec::new();
        let msg = reference_request(SlotId::S0);
        fill(&mut ni, &msg);
        ni.buffer_deliver(&mut sink, 0, &mut ev);
        ni.intercept_control(&mut router, &mut ev).unwrap();
        ni.buffer_deliver(&mut sink, 1, &mut ev);
        assert_eq!(sink.got[0].1, msg);
        assert!(ni.send.is_idle());
    }
}
