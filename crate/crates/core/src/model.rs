//! Shared value types and the 16-bit flit codec.
//!
//! Wire layout of a packet (one `u16` per flit):
//!
//! ```text
//! flit 0  header   bit 8 = dst slot, bits 7..4 = dst x, bits 3..0 = dst y
//! flit 1  size     number of flits that follow (2 + 2 * payload words)
//! flit 2  control  bits 12..9 = kind, bit 8 = src slot, bits 7..4 = src x, bits 3..0 = src y
//! flit 3  id       message sequence number
//! flit 4..         payload words, high half first
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest mesh extent addressable by the 4-bit coordinate fields.
pub const MAX_MESH_DIM: u8 = 16;

/// Size flit bound on payload length.
pub const MAX_PAYLOAD_WORDS: usize = 127;

/// Number of fixed flits before the payload.
pub const HEADER_FLITS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("payload of {0} words exceeds the 127-word bound")]
    PayloadTooLarge(usize),
    #[error("coordinate ({x},{y}) does not fit the 4-bit address fields")]
    AddressOutOfRange { x: u8, y: u8 },
    #[error("malformed packet: {0}")]
    MalformedPacket(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MeshCoordinate {
    pub x: u8,
    pub y: u8,
}

impl MeshCoordinate {
    pub const fn new(x: u8, y: u8) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Self) -> u32 {
        (self.x.abs_diff(other.x) as u32) + (self.y.abs_diff(other.y) as u32)
    }

    /// Row-major key; also the deterministic tie-break order `(y, x)`.
    pub fn row_major_key(self) -> (u8, u8) {
        (self.y, self.x)
    }

    fn check_addressable(self) -> Result<(), CodecError> {
        if self.x >= MAX_MESH_DIM || self.y >= MAX_MESH_DIM {
            return Err(CodecError::AddressOutOfRange { x: self.x, y: self.y });
        }
        Ok(())
    }
}

impl fmt::Display for MeshCoordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// One of the two virtual-PE slots of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotId {
    S0,
    S1,
}

impl SlotId {
    pub const ALL: [SlotId; 2] = [SlotId::S0, SlotId::S1];

    pub fn index(self) -> usize {
        match self {
            SlotId::S0 => 0,
            SlotId::S1 => 1,
        }
    }

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            SlotId::S1
        } else {
            SlotId::S0
        }
    }

    pub fn other(self) -> Self {
        match self {
            SlotId::S0 => SlotId::S1,
            SlotId::S1 => SlotId::S0,
        }
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VirtualAddress {
    pub node: MeshCoordinate,
    pub slot: SlotId,
}

impl VirtualAddress {
    pub const fn new(node: MeshCoordinate, slot: SlotId) -> Self {
        Self { node, slot }
    }

    /// Packs into one payload word: `x << 8 | y << 4 | slot`.
    pub fn to_word(self) -> u32 {
        ((self.node.x as u32) << 8) | ((self.node.y as u32) << 4) | self.slot.index() as u32
    }

    pub fn from_word(word: u32) -> Self {
        Self {
            node: MeshCoordinate::new(((word >> 8) & 0xF) as u8, ((word >> 4) & 0xF) as u8),
            slot: SlotId::from_bit(word & 1 == 1),
        }
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.node, self.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PeType {
    #[serde(rename = "GCD")]
    Gcd,
    #[serde(rename = "RSA")]
    Rsa,
}

impl PeType {
    pub fn code(self) -> u32 {
        match self {
            PeType::Gcd => 0,
            PeType::Rsa => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PeType::Gcd),
            1 => Some(PeType::Rsa),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PeType::Gcd => "GCD",
            PeType::Rsa => "RSA",
        }
    }
}

impl fmt::Display for PeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    ComputeReq = 0,
    ComputeRep = 1,
    MapReq = 2,
    MapGrant = 3,
    Release = 4,
    ReleaseAck = 5,
    EnablePort = 6,
    EnableAck = 7,
    DisablePort = 8,
    DisableAck = 9,
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::ComputeReq,
        MessageKind::ComputeRep,
        MessageKind::MapReq,
        MessageKind::MapGrant,
        MessageKind::Release,
        MessageKind::ReleaseAck,
        MessageKind::EnablePort,
        MessageKind::EnableAck,
        MessageKind::DisablePort,
        MessageKind::DisableAck,
    ];

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Port-control requests consumed by the network interface.
    pub fn is_port_control(self) -> bool {
        matches!(self, MessageKind::EnablePort | MessageKind::DisablePort)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub id: u16,
    pub kind: MessageKind,
    pub src: VirtualAddress,
    pub dst: VirtualAddress,
    pub payload: Vec<u32>,
}

impl Message {
    pub fn new(id: u16, kind: MessageKind, src: VirtualAddress, dst: VirtualAddress, payload: Vec<u32>) -> Self {
        Self { id, kind, src, dst, payload }
    }

    /// Flit count of the encoded packet.
    pub fn flit_len(&self) -> usize {
        packet_flits(self.payload.len())
    }
}

/// Flit count for a packet carrying `words` payload words.
pub const fn packet_flits(words: usize) -> usize {
    HEADER_FLITS + 2 * words
}

/// Observability tag: packet id and ordinal within the packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlitTag {
    pub packet_id: u16,
    pub ordinal: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Flit {
    pub value: u16,
    pub tag: Option<FlitTag>,
}

impl Flit {
    pub const fn raw(value: u16) -> Self {
        Self { value, tag: None }
    }

    pub fn stripped(self) -> Self {
        Self { value: self.value, tag: None }
    }

    /// Destination carried by a header flit.
    pub fn header_dst(self) -> VirtualAddress {
        VirtualAddress {
            node: MeshCoordinate::new(((self.value >> 4) & 0xF) as u8, (self.value & 0xF) as u8),
            slot: SlotId::from_bit(self.value & 0x0100 != 0),
        }
    }
}

fn pack_address(addr: VirtualAddress) -> u16 {
    ((addr.slot.index() as u16) << 8) | ((addr.node.x as u16) << 4) | addr.node.y as u16
}

fn unpack_address(value: u16) -> VirtualAddress {
    VirtualAddress {
        node: MeshCoordinate::new(((value >> 4) & 0xF) as u8, (value & 0xF) as u8),
        slot: SlotId::from_bit(value & 0x0100 != 0),
    }
}

/// Serializes a message into its flit sequence.
pub fn encode_packet(msg: &Message) -> Result<Vec<Flit>, CodecError> {
    if msg.payload.len() > MAX_PAYLOAD_WORDS {
        return Err(CodecError::PayloadTooLarge(msg.payload.len()));
    }
    msg.src.node.check_addressable()?;
    msg.dst.node.check_addressable()?;

    let mut values = Vec::with_capacity(msg.flit_len());
    values.push(pack_address(msg.dst));
    values.push((2 + 2 * msg.payload.len()) as u16);
    values.push((msg.kind.code() << 9) | pack_address(msg.src));
    values.push(msg.id);
    for word in &msg.payload {
        values.push((word >> 16) as u16);
        values.push(*word as u16);
    }
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(i, value)| Flit {
            value,
            tag: Some(FlitTag { packet_id: msg.id, ordinal: i as u16 }),
        })
        .collect())
}

/// Rebuilds a message from a complete flit sequence.
pub fn decode_packet(flits: &[Flit]) -> Result<Message, CodecError> {
    if flits.len() < HEADER_FLITS {
        return Err(CodecError::MalformedPacket(format!("{} flits is shorter than the fixed header", flits.len())));
    }
    let size = flits[1].value as usize;
    if flits.len() != size + 2 {
        return Err(CodecError::MalformedPacket(format!(
            "size flit says {} but {} flits follow",
            size,
            flits.len() - 2
        )));
    }
    let payload_flits = &flits[HEADER_FLITS..];
    if !payload_flits.len().is_multiple_of(2) {
        return Err(CodecError::MalformedPacket("odd payload flit count".into()));
    }
    if flits[0].value & 0xFE00 != 0 {
        return Err(CodecError::MalformedPacket(format!("reserved header bits set in {:#06x}", flits[0].value)));
    }
    let control = flits[2].value;
    let kind = MessageKind::from_code(control >> 9)
        .ok_or_else(|| CodecError::MalformedPacket(format!("unknown kind code {}", control >> 9)))?;
    let payload = payload_flits
        .chunks_exact(2)
        .map(|pair| ((pair[0].value as u32) << 16) | pair[1].value as u32)
        .collect();
    Ok(Message {
        id: flits[3].value,
        kind,
        src: unpack_address(control & 0x01FF),
        dst: unpack_address(flits[0].value),
        payload,
    })
}
