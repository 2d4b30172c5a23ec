//! Two-channel peer messaging. The sync channel carries chain and peer-list
//! requests; the broadcast channel carries update and block gossip.

pub mod sim;
pub mod udp;
mod wire;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::net::SocketAddr;

use log::debug;

use crate::chain::Hash256;

pub use wire::{
    checksum, chunk_snapshot, decode_message, encode_message, frame, MessageKind, Reassembly, SnapshotChunk, WireError,
    WireMessage, FRAME_HEADER_LEN, MAGIC, MAX_DATAGRAM, MAX_SNAPSHOT_CHUNKS, SNAPSHOT_CHUNK, WIRE_VERSION,
};

pub const DEFAULT_SYNC_PORT: u16 = 9333;
pub const DEFAULT_BROADCAST_PORT: u16 = 9334;
/// Entries kept by the gossip dedup cache.
pub const SEEN_CAPACITY: usize = 4096;
/// Peers silent for this long are forgotten.
pub const PEER_EXPIRY_SECS: u64 = 600;
pub const MAX_PEERS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Sync,
    Broadcast,
}

impl Channel {
    pub fn for_kind(kind: MessageKind) -> Channel {
        match kind {
            MessageKind::UpdateGossip | MessageKind::BlockGossip => Channel::Broadcast,
            _ => Channel::Sync,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Sync => "sync",
            Channel::Broadcast => "broadcast",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A known peer. `endpoint` is its sync socket, `broadcast` its gossip socket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerRecord {
    pub endpoint: SocketAddr,
    pub broadcast: SocketAddr,
    pub last_seen: u64,
}

impl PeerRecord {
    pub fn address_for(&self, channel: Channel) -> SocketAddr {
        match channel {
            Channel::Sync => self.endpoint,
            Channel::Broadcast => self.broadcast,
        }
    }
}

/// Peers keyed by sync endpoint, iterated in endpoint order so that every
/// run visits them identically.
#[derive(Debug, Clone, Default)]
pub struct PeerTable {
    peers: HashMap<SocketAddr, PeerRecord>,
    bad: HashSet<SocketAddr>,
}

impl PeerTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    /// Inserts or refreshes a peer; `last_seen` never moves backwards.
    /// Returns true if the peer is new.
    pub fn upsert(&mut self, record: PeerRecord) -> bool {
        if self.bad.contains(&record.endpoint) {
            return false;
        }
        if let Some(p) = self.peers.get_mut(&record.endpoint) {
            p.broadcast = record.broadcast;
            p.last_seen = p.last_seen.max(record.last_seen);
            return false;
        }
        if self.peers.len() >= MAX_PEERS {
            return false;
        }
        self.peers.insert(record.endpoint, record);
        true
    }

    /// Refreshes whichever peer owns `addr` on either channel.
    pub fn touch(&mut self, addr: SocketAddr, now: u64) {
        if let Some(p) = self
            .peers
            .values_mut()
            .find(|p| p.endpoint == addr || p.broadcast == addr)
        {
            p.last_seen = p.last_seen.max(now);
        }
    }

    pub fn mark_bad(&mut self, endpoint: SocketAddr) {
        self.peers.remove(&endpoint);
        self.bad.insert(endpoint);
    }

    pub fn is_bad(&self, endpoint: &SocketAddr) -> bool {
        self.bad.contains(endpoint)
    }

    pub fn expire(&mut self, now: u64) -> usize {
        let before = self.peers.len();
        self.peers
            .retain(|_, p| now.saturating_sub(p.last_seen) < PEER_EXPIRY_SECS);
        before - self.peers.len()
    }

    pub fn sorted(&self) -> Vec<PeerRecord> {
        let mut v: Vec<_> = self.peers.values().cloned().collect();
        v.sort_by_key(|p| p.endpoint);
        v
    }
}

/// Bounded FIFO set of recently gossiped hashes.
#[derive(Debug, Clone)]
pub struct SeenCache {
    order: VecDeque<Hash256>,
    set: HashSet<Hash256>,
    capacity: usize,
}

impl Default for SeenCache {
    fn default() -> Self {
        SeenCache::with_capacity(SEEN_CAPACITY)
    }
}

impl SeenCache {
    pub fn with_capacity(capacity: usize) -> Self {
        SeenCache {
            order: VecDeque::with_capacity(capacity),
            set: HashSet::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn contains(&self, h: &Hash256) -> bool {
        self.set.contains(h)
    }

    /// Returns false if `h` was already present.
    pub fn insert(&mut self, h: Hash256) -> bool {
        if !self.set.insert(h) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.set.remove(&old);
            }
        }
        self.order.push_back(h);
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Anything that can push a datagram towards an address.
pub trait Transport {
    fn send(&mut self, channel: Channel, to: SocketAddr, datagram: Vec<u8>) -> std::io::Result<()>;
}

/// Datagrams queued for a caller to deliver later.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outbox(pub Vec<(Channel, SocketAddr, Vec<u8>)>);

impl Transport for Outbox {
    fn send(&mut self, channel: Channel, to: SocketAddr, datagram: Vec<u8>) -> std::io::Result<()> {
        self.0.push((channel, to, datagram));
        Ok(())
    }
}

/// Dedup key for a gossip message: block hash or hash of the serialized update.
pub fn gossip_key(m: &WireMessage) -> Option<Hash256> {
    match m {
        WireMessage::BlockGossip(b) => Some(b.hash()),
        WireMessage::UpdateGossip(u) => Some(crate::chain::double_sha256(&u.to_bytes())),
        _ => None,
    }
}

/// Sends a gossip message to every peer's broadcast socket unless its key was
/// already seen. Returns the number of sends attempted; failures are logged.
pub fn gossip(seen: &mut SeenCache, m: &WireMessage, peers: &[PeerRecord], transport: &mut dyn Transport) -> usize {
    let Some(key) = gossip_key(m) else {
        return 0;
    };
    if !seen.insert(key) {
        return 0;
    }
    let bytes = match encode_message(m) {
        Ok(b) => b,
        Err(e) => {
            debug!("not gossiping {}: {e}", m.kind().name());
            return 0;
        }
    };
    for p in peers {
        if let Err(e) = transport.send(Channel::Broadcast, p.broadcast, bytes.clone()) {
            debug!("gossip to {} failed: {e}", p.broadcast);
        }
    }
    peers.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Address, ModelUpdate, ParameterVector};

    fn peer(i: u16) -> PeerRecord {
        PeerRecord {
            endpoint: SocketAddr::from(([10, 0, 0, i as u8], 9333)),
            broadcast: SocketAddr::from(([10, 0, 0, i as u8], 9334)),
            last_seen: 0,
        }
    }

    fn gossip_msg(tag: u8) -> WireMessage {
        WireMessage::UpdateGossip(
            ModelUpdate::new(Address([tag; 20]), 1, ParameterVector::new(vec![1.0]).unwrap(), 0).unwrap(),
        )
    }

    struct Failing;
    impl Transport for Failing {
        fn send(&mut self, _: Channel, _: SocketAddr, _: Vec<u8>) -> std::io::Result<()> {
            Err(std::io::Error::other("down"))
        }
    }

    #[test]
    fn gossip_counts_and_dedups() {
        let mut seen = SeenCache::default();
        let mut out = Outbox::default();
        assert_eq!(gossip(&mut seen, &gossip_msg(1), &[], &mut out), 0);
        let peers: Vec<_> = (1..=5).map(peer).collect();
        assert_eq!(gossip(&mut seen, &gossip_msg(2), &peers, &mut out), 5);
        assert_eq!(out.0.len(), 5);
        assert!(out
            .0
            .iter()
            .all(|(c, a, _)| *c == Channel::Broadcast && a.port() == 9334));
        assert_eq!(gossip(&mut seen, &gossip_msg(2), &peers, &mut out), 0);
        assert_eq!(gossip(&mut seen, &gossip_msg(3), &peers, &mut Failing), 5);
        assert_eq!(gossip(&mut seen, &WireMessage::GetPeers, &peers, &mut out), 0);
    }

    #[test]
    fn seen_cache_evicts_oldest() {
        let mut c = SeenCache::with_capacity(2);
        let h = |i: u8| Hash256([i; 32]);
        assert!(c.insert(h(1)) && c.insert(h(2)) && c.insert(h(3)));
        assert!(!c.contains(&h(1)) && c.contains(&h(3)));
        assert_eq!(c.len(), 2);
        assert!(!c.insert(h(3)));
    }

    #[test]
    fn peer_table_rules() {
        let mut t = PeerTable::new();
        assert!(t.upsert(PeerRecord {
            last_seen: 50,
            ..peer(1)
        }));
        assert!(!t.upsert(PeerRecord {
            last_seen: 10,
            ..peer(1)
        }));
        assert_eq!(t.sorted()[0].last_seen, 50);
        t.touch(peer(1).broadcast, 70);
        assert_eq!(t.sorted()[0].last_seen, 70);
        t.upsert(PeerRecord {
            last_seen: 0,
            ..peer(2)
        });
        assert_eq!(t.expire(PEER_EXPIRY_SECS + 1), 1);
        t.mark_bad(peer(1).endpoint);
        assert!(t.is_empty());
        assert!(!t.upsert(peer(1)));
    }
}
