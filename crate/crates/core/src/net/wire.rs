//! Datagram framing:
//! `magic ∥ version:u16 ∥ kind:u8 ∥ payload_len:u32 ∥ checksum[4] ∥ payload`.

use std::collections::BTreeMap;
use std::net::SocketAddr;

use thiserror::Error;

use crate::chain::{double_sha256, Block};
use crate::codec::{DecodeError, Reader, Writer};
use crate::params::ModelUpdate;

use super::PeerRecord;

pub const MAGIC: [u8; 4] = *b"FCHN";
pub const WIRE_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 15;
/// Largest datagram any transport will send or accept.
pub const MAX_DATAGRAM: usize = 65_000;
/// Chain snapshot bytes carried per chunk.
pub const SNAPSHOT_CHUNK: usize = 60_000;
/// Upper bound on chunks per snapshot accepted for reassembly.
pub const MAX_SNAPSHOT_CHUNKS: u32 = 4096;
const MAX_PEERS_PER_LIST: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    GetChain = 1,
    ChainSnapshot = 2,
    GetPeers = 3,
    PeerList = 4,
    Announce = 5,
    UpdateGossip = 6,
    BlockGossip = 7,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match v {
            1 => GetChain,
            2 => ChainSnapshot,
            3 => GetPeers,
            4 => PeerList,
            5 => Announce,
            6 => UpdateGossip,
            7 => BlockGossip,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use MessageKind::*;
        match self {
            GetChain => "get-chain",
            ChainSnapshot => "chain-snapshot",
            GetPeers => "get-peers",
            PeerList => "peer-list",
            Announce => "announce",
            UpdateGossip => "update-gossip",
            BlockGossip => "block-gossip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotChunk {
    pub snapshot_id: u64,
    /// Height of the first block in the reassembled snapshot.
    pub start_height: u64,
    pub chunk_index: u32,
    pub chunk_count: u32,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    /// Ask for every block from `from_height` up to the responder's tip.
    GetChain {
        request_id: u64,
        from_height: u64,
    },
    ChainSnapshot(SnapshotChunk),
    GetPeers,
    PeerList(Vec<PeerRecord>),
    Announce {
        sync: SocketAddr,
        broadcast: SocketAddr,
    },
    UpdateGossip(ModelUpdate),
    BlockGossip(Block),
}

impl WireMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            WireMessage::GetChain { .. } => MessageKind::GetChain,
            WireMessage::ChainSnapshot(_) => MessageKind::ChainSnapshot,
            WireMessage::GetPeers => MessageKind::GetPeers,
            WireMessage::PeerList(_) => MessageKind::PeerList,
            WireMessage::Announce { .. } => MessageKind::Announce,
            WireMessage::UpdateGossip(_) => MessageKind::UpdateGossip,
            WireMessage::BlockGossip(_) => MessageKind::BlockGossip,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            WireMessage::GetChain {
                request_id,
                from_height,
            } => {
                w.u64(*request_id).u64(*from_height);
            }
            WireMessage::ChainSnapshot(c) => {
                w.u64(c.snapshot_id)
                    .u64(c.start_height)
                    .u32(c.chunk_index)
                    .u32(c.chunk_count)
                    .var_bytes(&c.data);
            }
            WireMessage::GetPeers => {}
            WireMessage::PeerList(peers) => {
                w.u32(peers.len() as u32);
                for p in peers {
                    w.string(&p.endpoint.to_string())
                        .string(&p.broadcast.to_string())
                        .u64(p.last_seen);
                }
            }
            WireMessage::Announce { sync, broadcast } => {
                w.string(&sync.to_string()).string(&broadcast.to_string());
            }
            WireMessage::UpdateGossip(u) => u.encode(&mut w),
            WireMessage::BlockGossip(b) => {
                w.u64(b.height);
                b.encode(&mut w);
            }
        }
        w.finish()
    }

    fn decode_payload(kind: MessageKind, payload: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(payload);
        let msg = match kind {
            MessageKind::GetChain => WireMessage::GetChain {
                request_id: r.u64()?,
                from_height: r.u64()?,
            },
            MessageKind::ChainSnapshot => {
                let snapshot_id = r.u64()?;
                let start_height = r.u64()?;
                let chunk_index = r.u32()?;
                let chunk_count = r.u32()?;
                if chunk_count == 0 || chunk_count > MAX_SNAPSHOT_CHUNKS || chunk_index >= chunk_count {
                    return Err(DecodeError::invalid("chunk_index", "out of range"));
                }
                let data = r.var_bytes()?.to_vec();
                WireMessage::ChainSnapshot(SnapshotChunk {
                    snapshot_id,
                    start_height,
                    chunk_index,
                    chunk_count,
                    data,
                })
            }
            MessageKind::GetPeers => WireMessage::GetPeers,
            MessageKind::PeerList => {
                let n = r.u32()? as usize;
                if n > MAX_PEERS_PER_LIST {
                    return Err(DecodeError::invalid("peer_count", "too many peers"));
                }
                let mut peers = Vec::with_capacity(n);
                for _ in 0..n {
                    peers.push(PeerRecord {
                        endpoint: endpoint(&mut r)?,
                        broadcast: endpoint(&mut r)?,
                        last_seen: r.u64()?,
                    });
                }
                WireMessage::PeerList(peers)
            }
            MessageKind::Announce => WireMessage::Announce {
                sync: endpoint(&mut r)?,
                broadcast: endpoint(&mut r)?,
            },
            MessageKind::UpdateGossip => WireMessage::UpdateGossip(ModelUpdate::decode(&mut r)?),
            MessageKind::BlockGossip => {
                let height = r.u64()?;
                WireMessage::BlockGossip(Block::decode(&mut r, height)?)
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

fn endpoint(r: &mut Reader<'_>) -> Result<SocketAddr, DecodeError> {
    let s = r.string()?;
    s.parse()
        .map_err(|_| DecodeError::invalid("endpoint", format!("unparseable {s:?}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("datagram too short: {have} bytes, need {need}")]
    Short { have: usize, need: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u16),
    #[error("declared payload length {declared} but {actual} bytes follow")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("checksum mismatch")]
    BadChecksum,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("message of {0} bytes exceeds the datagram limit")]
    Oversize(usize),
    #[error("malformed payload: {0}")]
    Payload(#[from] DecodeError),
}

pub fn checksum(payload: &[u8]) -> [u8; 4] {
    let h = double_sha256(payload);
    [h.0[0], h.0[1], h.0[2], h.0[3]]
}

/// Frames a raw payload under `kind`. No size limit is applied.
pub fn frame(kind: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&checksum(payload));
    out.extend_from_slice(payload);
    out
}

pub fn encode_message(m: &WireMessage) -> Result<Vec<u8>, WireError> {
    let out = frame(m.kind() as u8, &m.payload());
    if out.len() > MAX_DATAGRAM {
        return Err(WireError::Oversize(out.len()));
    }
    Ok(out)
}

pub fn decode_message(bytes: &[u8]) -> Result<WireMessage, WireError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(WireError::Short {
            have: bytes.len(),
            need: FRAME_HEADER_LEN,
        });
    }
    if bytes.len() > MAX_DATAGRAM {
        return Err(WireError::Oversize(bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WIRE_VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let kind = bytes[6];
    let declared = u32::from_le_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]) as usize;
    let payload = &bytes[FRAME_HEADER_LEN..];
    if declared != payload.len() {
        return Err(WireError::LengthMismatch {
            declared,
            actual: payload.len(),
        });
    }
    if bytes[11..15] != checksum(payload) {
        return Err(WireError::BadChecksum);
    }
    let kind = MessageKind::from_u8(kind).ok_or(WireError::UnknownKind(kind))?;
    Ok(WireMessage::decode_payload(kind, payload)?)
}

/// Splits serialized chain bytes into snapshot messages. An empty input still
/// produces one (empty) chunk so the requester learns there is nothing new.
pub fn chunk_snapshot(snapshot_id: u64, start_height: u64, data: &[u8]) -> Vec<WireMessage> {
    let pieces: Vec<&[u8]> = if data.is_empty() {
        vec![&[]]
    } else {
        data.chunks(SNAPSHOT_CHUNK).collect()
    };
    let count = pieces.len() as u32;
    pieces
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            WireMessage::ChainSnapshot(SnapshotChunk {
                snapshot_id,
                start_height,
                chunk_index: i as u32,
                chunk_count: count,
                data: p.to_vec(),
            })
        })
        .collect()
}

/// Collects the chunks of one snapshot in any arrival order.
#[derive(Debug, Clone)]
pub struct Reassembly {
    start_height: u64,
    chunk_count: u32,
    parts: BTreeMap<u32, Vec<u8>>,
}

impl Reassembly {
    pub fn new(first: &SnapshotChunk) -> Self {
        Reassembly {
            start_height: first.start_height,
            chunk_count: first.chunk_count,
            parts: BTreeMap::new(),
        }
    }

    pub fn start_height(&self) -> u64 {
        self.start_height
    }

    /// Adds a chunk; returns the full payload once every chunk has arrived.
    /// Chunks disagreeing with the first on count or start are ignored, as
    /// are repeats.
    pub fn add(&mut self, c: SnapshotChunk) -> Option<Vec<u8>> {
        if c.chunk_count != self.chunk_count || c.start_height != self.start_height || c.chunk_index >= c.chunk_count {
            return None;
        }
        self.parts.entry(c.chunk_index).or_insert(c.data);
        if self.parts.len() as u32 == self.chunk_count {
            Some(self.parts.values().flatten().copied().collect())
        } else {
            None
        }
    }
}
