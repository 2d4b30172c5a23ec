//! One participant: roles, the train → submit → mine → adopt loop, bootstrap
//! and recovery.
//!
//! [`Node`] performs no I/O of its own apart from writing its chain file. It
//! is fed datagrams and clock ticks, hands out training and mining jobs, and
//! returns outgoing datagrams in a [`Step`]. The simulator runs jobs inline;
//! the runtime runs them on worker threads.

pub mod config;
pub mod offload;
mod pool;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bridge::{bridge_train, BridgeServer};
use crate::chain::{
    address_of, choose_chain, decode_frames, double_sha256, encode_frames, global_model, merkle_root, mine,
    recover_chain, Block, BlockHeader, Chain, ChainStore, Hash256, Recovery, BLOCK_VERSION,
};
use crate::dataset::{Dataset, DatasetError};
use crate::fedavg::aggregate;
use crate::net::{
    chunk_snapshot, decode_message, encode_message, gossip, Channel, Outbox, PeerRecord, PeerTable, Reassembly,
    SeenCache, SnapshotChunk, Transport, WireMessage,
};
use crate::params::{Address, ModelConfig, ModelUpdate, ParameterVector};
use crate::trainer::{train_local, TrainError, TrainSpec};

pub use config::{parse_roles, ConfigError, DataSource, NodeConfig, Role};
pub use offload::{
    execute_job, serve_offload, submit_offload, InProcessWorker, OffloadError, OffloadJob, OffloadOutcome,
    OffloadReply, OffloadWorker, TcpWorker, Transform,
};
pub use pool::{pending_pool_insert, PoolReject, UpdatePool, POOL_CAPACITY};

/// Per-attempt bootstrap timeouts; the third expiry gives up.
pub const BOOTSTRAP_TIMEOUTS_MS: [u64; 3] = [500, 1000, 2000];
/// How far below its own tip a node asks peers to resend blocks from.
pub const SYNC_DEPTH: u64 = 4;
/// A node left without peers after a failed bootstrap tries again this much later.
pub const BOOTSTRAP_RETRY_MS: u64 = 5000;
const REQUEST_TTL_MS: u64 = 5000;
const MAX_PENDING: usize = 64;

/// Node key material. No signature scheme is used, so the public key is a
/// commitment to the secret and serves only to derive the address.
#[derive(Clone)]
pub struct NodeKey {
    secret: [u8; 32],
}

impl NodeKey {
    pub fn from_seed(seed: u64) -> Self {
        let mut secret = [0u8; 32];
        ChaCha8Rng::seed_from_u64(seed).fill(&mut secret);
        NodeKey { secret }
    }

    pub fn random() -> Self {
        NodeKey { secret: rand::random() }
    }

    pub fn public(&self) -> [u8; 32] {
        double_sha256(&self.secret).0
    }

    pub fn address(&self) -> Address {
        address_of(&self.public()).expect("32-byte key")
    }
}

impl fmt::Debug for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeKey({})", self.address())
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot load dataset: {0}")]
    Data(#[from] DatasetError),
    #[error("dataset has {actual} features, model expects {expected}")]
    DataShape { expected: usize, actual: usize },
    #[error("cannot start bridge: {0}")]
    Bridge(#[from] crate::bridge::BridgeError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeEvent {
    Trained {
        round: u64,
        samples: u64,
        via: String,
    },
    NotParticipating {
        round: u64,
    },
    TrainingFailed {
        round: u64,
        reason: String,
    },
    UpdateAccepted {
        client: Address,
        round: u64,
    },
    UpdateRejected {
        client: Address,
        reason: PoolReject,
    },
    Mined {
        height: u64,
        hash: Hash256,
        updates: usize,
    },
    MiningFailed {
        round: u64,
    },
    Adopted {
        height: u64,
        hash: Hash256,
        via: &'static str,
    },
    BlockRejected {
        hash: Hash256,
        reason: String,
    },
    SnapshotRejected {
        from: SocketAddr,
        reason: String,
    },
    PeerAdded {
        endpoint: SocketAddr,
    },
    BootstrapDone {
        height: u64,
        peers: usize,
    },
    BootstrapFailed {
        reason: String,
    },
    Malformed {
        from: SocketAddr,
        reason: String,
    },
}

impl NodeEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            NodeEvent::Trained { .. } => "trained",
            NodeEvent::NotParticipating { .. } => "not-participating",
            NodeEvent::TrainingFailed { .. } => "training-failed",
            NodeEvent::UpdateAccepted { .. } => "update-accepted",
            NodeEvent::UpdateRejected { .. } => "update-rejected",
            NodeEvent::Mined { .. } => "mined",
            NodeEvent::MiningFailed { .. } => "mining-failed",
            NodeEvent::Adopted { .. } => "adopted",
            NodeEvent::BlockRejected { .. } => "block-rejected",
            NodeEvent::SnapshotRejected { .. } => "snapshot-rejected",
            NodeEvent::PeerAdded { .. } => "peer-added",
            NodeEvent::BootstrapDone { .. } => "bootstrap-done",
            NodeEvent::BootstrapFailed { .. } => "bootstrap-failed",
            NodeEvent::Malformed { .. } => "malformed",
        }
    }
}

impl fmt::Display for NodeEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeEvent::Trained { round, samples, via } => {
                write!(f, "trained round {round} on {samples} samples ({via})")
            }
            NodeEvent::NotParticipating { round } => write!(f, "sitting out round {round}"),
            NodeEvent::TrainingFailed { round, reason } => write!(f, "round {round} training skipped: {reason}"),
            NodeEvent::UpdateAccepted { client, round } => write!(f, "pooled update from {client} for round {round}"),
            NodeEvent::UpdateRejected { client, reason } => write!(f, "update from {client} rejected: {reason}"),
            NodeEvent::Mined { height, hash, updates } => {
                write!(f, "mined block {height} {hash} with {updates} updates")
            }
            NodeEvent::MiningFailed { round } => write!(f, "no nonce found for round {round}"),
            NodeEvent::Adopted { height, hash, via } => write!(f, "tip {height} {hash} ({via})"),
            NodeEvent::BlockRejected { hash, reason } => write!(f, "block {hash} rejected: {reason}"),
            NodeEvent::SnapshotRejected { from, reason } => write!(f, "chain from {from} rejected: {reason}"),
            NodeEvent::PeerAdded { endpoint } => write!(f, "new peer {endpoint}"),
            NodeEvent::BootstrapDone { height, peers } => {
                write!(f, "bootstrapped at height {height} with {peers} peers")
            }
            NodeEvent::BootstrapFailed { reason } => write!(f, "bootstrap failed: {reason}"),
            NodeEvent::Malformed { from, reason } => write!(f, "ignored datagram from {from}: {reason}"),
        }
    }
}

/// Output of one call into the node.
#[derive(Debug, Default)]
pub struct Step {
    pub out: Outbox,
    pub events: Vec<NodeEvent>,
}

impl Step {
    fn send(&mut self, channel: Channel, to: SocketAddr, m: &WireMessage) {
        match encode_message(m) {
            Ok(bytes) => {
                let _ = self.out.send(channel, to, bytes);
            }
            Err(e) => debug!("dropping {} to {to}: {e}", m.kind().name()),
        }
    }

    fn merge(&mut self, other: Step) {
        self.out.0.extend(other.out.0);
        self.events.extend(other.events);
    }
}

/// How a client's training step is executed.
#[derive(Debug, Clone)]
pub enum TrainerBackend {
    Local,
    Offload(SocketAddr),
    Bridge {
        server: Arc<Mutex<BridgeServer>>,
        data_ref: PathBuf,
    },
}

#[derive(Debug, Clone)]
pub struct TrainJob {
    pub job_id: [u8; 16],
    pub round: u64,
    pub model: ModelConfig,
    pub start: ParameterVector,
    pub spec: TrainSpec,
    pub data: Arc<Dataset>,
    pub client_id: Address,
    pub backend: TrainerBackend,
}

impl TrainJob {
    /// Trains and reports which path produced the update.
    pub fn run(&self) -> Result<(ModelUpdate, String), TrainError> {
        match &self.backend {
            TrainerBackend::Local => {
                let u = train_local(
                    &self.model,
                    &self.start,
                    &self.data,
                    &self.spec,
                    self.client_id,
                    self.round,
                )?;
                Ok((u, "local".into()))
            }
            TrainerBackend::Offload(addr) => {
                let job = OffloadJob::new(
                    self.job_id,
                    self.model.clone(),
                    self.start.clone(),
                    &self.data,
                    self.spec.clone(),
                    String::new(),
                    self.client_id,
                    self.round,
                );
                let worker = TcpWorker {
                    addr: *addr,
                    timeout: Duration::from_secs(10) * self.spec.epochs.max(1),
                };
                let (u, how) = submit_offload(&job, &worker, &self.data)?;
                let via = match how {
                    OffloadOutcome::Remote => "offload".to_string(),
                    OffloadOutcome::Fallback(r) => format!("local after offload failure: {r}"),
                };
                Ok((u, via))
            }
            TrainerBackend::Bridge { server, data_ref } => {
                let mut server = server.lock().unwrap_or_else(|p| p.into_inner());
                let (u, how) = bridge_train(
                    &mut server,
                    self.job_id,
                    &self.model,
                    &self.start,
                    &self.data,
                    data_ref,
                    &self.spec,
                    self.client_id,
                    self.round,
                )?;
                let via = match how {
                    crate::bridge::BridgeOutcome::External => "bridge".to_string(),
                    crate::bridge::BridgeOutcome::Fallback(r) => format!("local after bridge failure: {r}"),
                };
                Ok((u, via))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MineJob {
    pub template: BlockHeader,
    pub updates: Vec<ModelUpdate>,
    pub aggregate: ParameterVector,
    pub height: u64,
    pub max_attempts: u64,
}

impl MineJob {
    pub fn round(&self) -> u64 {
        self.height - 1
    }

    pub fn run(&self) -> Option<Block> {
        let header = mine(&self.template, self.max_attempts)?;
        Some(Block {
            header,
            updates: self.updates.clone(),
            aggregate: self.aggregate.clone(),
            height: self.height,
        })
    }
}

#[derive(Debug, Clone)]
struct Pending {
    peer: SocketAddr,
    expires: u64,
    bootstrap: bool,
}

#[derive(Debug, Clone)]
struct Bootstrap {
    peer: SocketAddr,
    attempt: usize,
    deadline: u64,
    chain_done: bool,
    peers_done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockOutcome {
    Extended,
    Reorg,
    Lighter,
    Orphan,
    Invalid,
    Known,
}

/// Per-round summary returned by [`Node::run_round`].
#[derive(Debug, Default)]
pub struct RoundReport {
    pub step: Step,
}

impl RoundReport {
    pub fn actions(&self) -> &[NodeEvent] {
        &self.step.events
    }
}

pub struct Node {
    config: NodeConfig,
    key: NodeKey,
    chain: Chain,
    recovery: Option<Recovery>,
    store: Option<ChainStore>,
    pool: UpdatePool,
    peers: PeerTable,
    seen: SeenCache,
    pending: BTreeMap<u64, Pending>,
    reassembly: BTreeMap<(SocketAddr, u64), Reassembly>,
    data: Option<Arc<Dataset>>,
    backend: TrainerBackend,
    participation: ChaCha8Rng,
    next_request: u64,
    bootstrap: Option<Bootstrap>,
    rebootstrap_at: Option<u64>,
    next_sync_at: u64,
    sync_cursor: usize,
    last_trained: Option<u64>,
    last_mined: Option<u64>,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("address", &self.address())
            .field("height", &self.chain.height())
            .field("peers", &self.peers.len())
            .finish()
    }
}

impl Node {
    /// Loads the configured dataset (for clients) and recovers the chain file.
    pub fn new(config: NodeConfig) -> Result<Self, NodeError> {
        let data = if config.has(Role::Client) {
            Some(config.data.load()?)
        } else {
            None
        };
        Self::with_data(config, data)
    }

    pub fn with_data(config: NodeConfig, data: Option<Dataset>) -> Result<Self, NodeError> {
        if let Some(d) = &data {
            if d.input_dim() != config.model.input_dim() {
                return Err(NodeError::DataShape {
                    expected: config.model.input_dim(),
                    actual: d.input_dim(),
                });
            }
        }
        let genesis = config.genesis();
        let (chain, recovery, store) = match &config.chain_path {
            Some(p) => {
                let r = recover_chain(p, genesis);
                (r.chain.clone(), Some(r), Some(ChainStore::new(p)))
            }
            None => (Chain::new(genesis), None, None),
        };
        let key = NodeKey::from_seed(config.seed);
        let mut participation = ChaCha8Rng::seed_from_u64(config.seed);
        participation.set_stream(1);
        let node = Node {
            pool: UpdatePool::new(config.model.param_count()),
            key,
            chain,
            recovery,
            store,
            peers: PeerTable::new(),
            seen: SeenCache::default(),
            pending: BTreeMap::new(),
            reassembly: BTreeMap::new(),
            data: data.map(Arc::new),
            backend: match config.offload_worker {
                Some(addr) => TrainerBackend::Offload(addr),
                None => TrainerBackend::Local,
            },
            participation,
            next_request: config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            bootstrap: None,
            rebootstrap_at: None,
            next_sync_at: 0,
            sync_cursor: 0,
            last_trained: None,
            last_mined: None,
            config,
        };
        if let Some(s) = &node.store {
            // Normalise the file to exactly the recovered chain.
            if let Err(e) = s.save(&node.chain) {
                warn!("cannot write chain file {}: {e}", s.path().display());
            }
        }
        Ok(node)
    }

    pub fn set_backend(&mut self, backend: TrainerBackend) {
        self.backend = backend;
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn recovery(&self) -> Option<&Recovery> {
        self.recovery.as_ref()
    }

    pub fn pool(&self) -> &UpdatePool {
        &self.pool
    }

    pub fn peers(&self) -> Vec<PeerRecord> {
        self.peers.sorted()
    }

    pub fn global_model(&self) -> &ParameterVector {
        global_model(&self.chain)
    }

    pub fn is_bootstrapping(&self) -> bool {
        self.bootstrap.is_some()
    }

    fn self_record(&self, now: u64) -> PeerRecord {
        PeerRecord {
            endpoint: self.config.sync,
            broadcast: self.config.broadcast,
            last_seen: now / 1000,
        }
    }

    fn fresh_request(&mut self, peer: SocketAddr, now: u64, bootstrap: bool) -> u64 {
        self.next_request = self.next_request.wrapping_add(1);
        if self.pending.len() >= MAX_PENDING {
            if let Some(&oldest) = self.pending.iter().min_by_key(|(_, p)| p.expires).map(|(k, _)| k) {
                self.pending.remove(&oldest);
            }
        }
        self.pending.insert(
            self.next_request,
            Pending {
                peer,
                expires: now + REQUEST_TTL_MS,
                bootstrap,
            },
        );
        self.next_request
    }

    fn request_chain(&mut self, step: &mut Step, peer: SocketAddr, from_height: u64, now: u64, bootstrap: bool) {
        let request_id = self.fresh_request(peer, now, bootstrap);
        step.send(
            Channel::Sync,
            peer,
            &WireMessage::GetChain {
                request_id,
                from_height,
            },
        );
    }

    /// Begins bootstrapping from the configured peer, if any.
    pub fn start(&mut self, now: u64) -> Step {
        let mut step = Step::default();
        self.rebootstrap_at = None;
        if let Some(peer) = self.config.bootstrap {
            self.bootstrap = Some(Bootstrap {
                peer,
                attempt: 0,
                deadline: now + BOOTSTRAP_TIMEOUTS_MS[0],
                chain_done: false,
                peers_done: false,
            });
            self.send_bootstrap(&mut step, now);
        }
        self.next_sync_at = now + self.sync_period();
        step
    }

    fn send_bootstrap(&mut self, step: &mut Step, now: u64) {
        let peer = self.bootstrap.as_ref().expect("bootstrapping").peer;
        self.request_chain(step, peer, 0, now, true);
        step.send(Channel::Sync, peer, &WireMessage::GetPeers);
    }

    fn sync_period(&self) -> u64 {
        (self.config.desired_block_interval * 500).max(1)
    }

    /// Timers: bootstrap retries, anti-entropy sync and expiry.
    pub fn tick(&mut self, now: u64) -> Step {
        let mut step = Step::default();
        if let Some(b) = &mut self.bootstrap {
            if now >= b.deadline {
                b.attempt += 1;
                if b.attempt >= BOOTSTRAP_TIMEOUTS_MS.len() {
                    let peer = b.peer;
                    self.bootstrap = None;
                    if self.peers.is_empty() {
                        self.rebootstrap_at = Some(now + BOOTSTRAP_RETRY_MS);
                    }
                    step.events.push(NodeEvent::BootstrapFailed {
                        reason: format!("no reply from {peer} after {} attempts", BOOTSTRAP_TIMEOUTS_MS.len()),
                    });
                } else {
                    b.deadline = now + BOOTSTRAP_TIMEOUTS_MS[b.attempt];
                    self.send_bootstrap(&mut step, now);
                }
            }
        }
        if self.rebootstrap_at.is_some_and(|t| now >= t) {
            let s = self.start(now);
            step.merge(s);
        }
        self.pending.retain(|_, p| p.expires > now);
        let pending = &self.pending;
        self.reassembly.retain(|(_, id), _| pending.contains_key(id));

        if now >= self.next_sync_at {
            self.next_sync_at = now + self.sync_period();
            self.peers.expire(now / 1000);
            let peers = self.peers.sorted();
            if !peers.is_empty() && self.bootstrap.is_none() {
                let p = &peers[self.sync_cursor % peers.len()];
                self.sync_cursor = self.sync_cursor.wrapping_add(1);
                let from = self.chain.height().saturating_sub(SYNC_DEPTH);
                self.request_chain(&mut step, p.endpoint, from, now, false);
                step.send(Channel::Sync, p.endpoint, &WireMessage::GetPeers);
            }
        }
        step
    }

    pub fn handle_datagram(&mut self, now: u64, channel: Channel, from: SocketAddr, bytes: &[u8]) -> Step {
        let mut step = Step::default();
        let msg = match decode_message(bytes) {
            Ok(m) => m,
            Err(e) => {
                step.events.push(NodeEvent::Malformed {
                    from,
                    reason: e.to_string(),
                });
                return step;
            }
        };
        if Channel::for_kind(msg.kind()) != channel {
            step.events.push(NodeEvent::Malformed {
                from,
                reason: format!("{} on the {channel} channel", msg.kind().name()),
            });
            return step;
        }
        self.peers.touch(from, now / 1000);
        match msg {
            WireMessage::GetChain {
                request_id,
                from_height,
            } => {
                let blocks = self.chain.blocks().skip(from_height as usize);
                let data = encode_frames(blocks);
                for m in chunk_snapshot(request_id, from_height, &data) {
                    step.send(Channel::Sync, from, &m);
                }
            }
            WireMessage::ChainSnapshot(c) => self.on_chunk(&mut step, now, from, c),
            WireMessage::GetPeers => {
                let mut list = self.peers.sorted();
                list.retain(|p| p.endpoint != from);
                list.push(self.self_record(now));
                step.send(Channel::Sync, from, &WireMessage::PeerList(list));
            }
            WireMessage::PeerList(list) => {
                for p in list {
                    self.add_peer(&mut step, p);
                }
                if let Some(b) = &mut self.bootstrap {
                    if b.peer == from {
                        b.peers_done = true;
                    }
                }
                self.finish_bootstrap(&mut step, now);
            }
            WireMessage::Announce { sync, broadcast } => {
                self.add_peer(
                    &mut step,
                    PeerRecord {
                        endpoint: sync,
                        broadcast,
                        last_seen: now / 1000,
                    },
                );
            }
            WireMessage::UpdateGossip(u) => self.on_update(&mut step, u, true),
            WireMessage::BlockGossip(b) => {
                let Some(key) = crate::net::gossip_key(&WireMessage::BlockGossip(b.clone())) else {
                    return step;
                };
                if self.seen.contains(&key) {
                    return step;
                }
                match self.consider_block(&mut step, b.clone(), "gossip") {
                    BlockOutcome::Extended | BlockOutcome::Reorg => self.gossip_block(&mut step, b),
                    BlockOutcome::Orphan => {
                        if let Some(p) = self.peers.sorted().into_iter().find(|p| p.broadcast == from) {
                            let from_height = self.chain.height().saturating_sub(SYNC_DEPTH);
                            self.request_chain(&mut step, p.endpoint, from_height, now, false);
                        }
                    }
                    _ => {
                        self.seen.insert(key);
                    }
                }
            }
        }
        step
    }

    fn add_peer(&mut self, step: &mut Step, p: PeerRecord) {
        if p.endpoint == self.config.sync || p.broadcast == self.config.broadcast {
            return;
        }
        let endpoint = p.endpoint;
        if self.peers.upsert(p) {
            step.events.push(NodeEvent::PeerAdded { endpoint });
        }
    }

    fn finish_bootstrap(&mut self, step: &mut Step, now: u64) {
        let Some(b) = &self.bootstrap else { return };
        if !(b.chain_done && b.peers_done) {
            return;
        }
        let peer = b.peer;
        self.bootstrap = None;
        let announce = WireMessage::Announce {
            sync: self.config.sync,
            broadcast: self.config.broadcast,
        };
        let mut targets: Vec<SocketAddr> = self.peers.sorted().iter().map(|p| p.endpoint).collect();
        if !targets.contains(&peer) {
            targets.push(peer);
        }
        for t in targets {
            step.send(Channel::Sync, t, &announce);
        }
        self.next_sync_at = now + self.sync_period();
        step.events.push(NodeEvent::BootstrapDone {
            height: self.chain.height(),
            peers: self.peers.len(),
        });
    }

    fn on_chunk(&mut self, step: &mut Step, now: u64, from: SocketAddr, c: SnapshotChunk) {
        let Some(pending) = self.pending.get(&c.snapshot_id).cloned() else {
            debug!("unsolicited snapshot {} from {from}", c.snapshot_id);
            return;
        };
        if pending.peer != from {
            return;
        }
        let key = (from, c.snapshot_id);
        let entry = self.reassembly.entry(key).or_insert_with(|| Reassembly::new(&c));
        let start = entry.start_height();
        let Some(data) = entry.add(c) else { return };
        self.reassembly.remove(&key);
        self.pending.remove(&key.1);
        let result = self.on_snapshot(step, now, from, start, &data);
        if pending.bootstrap {
            match result {
                Ok(()) => {
                    if let Some(b) = &mut self.bootstrap {
                        b.chain_done = true;
                    }
                    self.finish_bootstrap(step, now);
                }
                Err(reason) => {
                    self.peers.mark_bad(from);
                    self.bootstrap = None;
                    step.events.push(NodeEvent::BootstrapFailed {
                        reason: format!("invalid chain from {from}: {reason}"),
                    });
                }
            }
        }
    }

    /// Builds a candidate chain from a snapshot and adopts it if it wins.
    fn on_snapshot(
        &mut self,
        step: &mut Step,
        now: u64,
        from: SocketAddr,
        start: u64,
        data: &[u8],
    ) -> Result<(), String> {
        let (mut blocks, err) = decode_frames(data);
        let reject = |step: &mut Step, reason: String| {
            step.events.push(NodeEvent::SnapshotRejected {
                from,
                reason: reason.clone(),
            });
            Err(reason)
        };
        if let Some(e) = err {
            return reject(step, e.to_string());
        }
        for (i, b) in blocks.iter_mut().enumerate() {
            b.height = start + i as u64;
        }
        let Some(first) = blocks.first() else {
            return Ok(());
        };
        let candidate = if start == 0 {
            Chain::from_blocks(self.chain.genesis_config().clone(), blocks)
        } else {
            let parent = self.chain.block(start - 1).map(Block::hash);
            if parent != Some(first.header.prev_hash) {
                // The fork reaches below the window asked for; ask for everything.
                self.request_chain(step, from, 0, now, false);
                return Ok(());
            }
            let mut c = self.chain.truncated(start as usize);
            blocks.into_iter().try_for_each(|b| c.push(b)).map(|()| c)
        };
        let candidate = match candidate {
            Ok(c) => c,
            Err(e) => return reject(step, e.to_string()),
        };
        if choose_chain(&self.chain, &candidate).tip_hash() != self.chain.tip_hash() {
            let tip = candidate.tip().clone();
            self.adopt(step, candidate, "snapshot");
            self.gossip_block(step, tip);
        }
        Ok(())
    }

    fn on_update(&mut self, step: &mut Step, u: ModelUpdate, relay: bool) {
        let msg = WireMessage::UpdateGossip(u);
        let key = crate::net::gossip_key(&msg).expect("gossip message");
        if self.seen.contains(&key) {
            return;
        }
        let WireMessage::UpdateGossip(u) = &msg else {
            unreachable!()
        };
        match self.pool.insert(u.clone(), self.chain.height()) {
            Ok(()) => {
                step.events.push(NodeEvent::UpdateAccepted {
                    client: u.client_id,
                    round: u.round,
                });
                if relay {
                    let peers = self.peers.sorted();
                    gossip(&mut self.seen, &msg, &peers, &mut step.out);
                }
            }
            Err(reason) => {
                self.seen.insert(key);
                step.events.push(NodeEvent::UpdateRejected {
                    client: u.client_id,
                    reason,
                });
            }
        }
    }

    fn gossip_block(&mut self, step: &mut Step, b: Block) {
        let peers = self.peers.sorted();
        gossip(&mut self.seen, &WireMessage::BlockGossip(b), &peers, &mut step.out);
    }

    fn consider_block(&mut self, step: &mut Step, b: Block, via: &'static str) -> BlockOutcome {
        let hash = b.hash();
        if self.chain.height_of(&hash).is_some() {
            return BlockOutcome::Known;
        }
        let Some(parent) = self.chain.height_of(&b.header.prev_hash) else {
            return BlockOutcome::Orphan;
        };
        let result = if parent == self.chain.height() {
            let mut c = self.chain.clone();
            c.push(b).map(|()| c)
        } else {
            self.chain.fork_with(b)
        };
        match result {
            Err(e) => {
                step.events.push(NodeEvent::BlockRejected {
                    hash,
                    reason: e.to_string(),
                });
                BlockOutcome::Invalid
            }
            Ok(c) => {
                let extends = parent == self.chain.height();
                if choose_chain(&self.chain, &c).tip_hash() == self.chain.tip_hash() {
                    return BlockOutcome::Lighter;
                }
                self.adopt(step, c, via);
                if extends {
                    BlockOutcome::Extended
                } else {
                    BlockOutcome::Reorg
                }
            }
        }
    }

    fn adopt(&mut self, step: &mut Step, chain: Chain, via: &'static str) {
        let old_tip = self.chain.tip_hash();
        let extends = chain.block(self.chain.height()).map(Block::hash) == Some(old_tip);
        let old_len = self.chain.len();
        self.chain = chain;
        self.pool.prune(self.chain.height());
        if let Some(s) = &self.store {
            let r = if extends {
                self.chain.blocks().skip(old_len).try_for_each(|b| s.append(b))
            } else {
                s.save(&self.chain)
            };
            if let Err(e) = r {
                warn!("cannot persist chain to {}: {e}", s.path().display());
            }
        }
        info!(
            "adopted tip {} at height {} via {via}",
            self.chain.tip_hash(),
            self.chain.height()
        );
        step.events.push(NodeEvent::Adopted {
            height: self.chain.height(),
            hash: self.chain.tip_hash(),
            via,
        });
    }

    fn round_seed(&self, round: u64) -> u64 {
        self.config.train.seed ^ round.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    /// Client phase: decides whether to take part in the current round and,
    /// if so, returns a job that trains from the chain's global model.
    pub fn begin_training(&mut self) -> (Option<TrainJob>, Vec<NodeEvent>) {
        let round = self.chain.height();
        if !self.config.has(Role::Client) || self.last_trained == Some(round) {
            return (None, vec![]);
        }
        let Some(data) = self.data.clone() else {
            return (None, vec![]);
        };
        self.last_trained = Some(round);
        if !self.participation.random_bool(self.config.participation_probability) {
            return (None, vec![NodeEvent::NotParticipating { round }]);
        }
        let mut id = [0u8; 16];
        let h = double_sha256(&[&self.address().0[..], &round.to_le_bytes()].concat());
        id.copy_from_slice(&h.0[..16]);
        let mut spec = self.config.train.clone();
        spec.seed = self.round_seed(round);
        spec.batch_size = spec.batch_size.min(data.n_samples()).max(1);
        let job = TrainJob {
            job_id: id,
            round,
            model: self.config.model.clone(),
            start: self.global_model().clone(),
            spec,
            data,
            client_id: self.address(),
            backend: self.backend.clone(),
        };
        (Some(job), vec![])
    }

    pub fn training_done(&mut self, round: u64, result: Result<(ModelUpdate, String), TrainError>) -> Step {
        let mut step = Step::default();
        match result {
            Ok((u, via)) => {
                step.events.push(NodeEvent::Trained {
                    round,
                    samples: u.sample_count,
                    via,
                });
                self.on_update(&mut step, u, true);
            }
            Err(e) => step.events.push(NodeEvent::TrainingFailed {
                round,
                reason: e.to_string(),
            }),
        }
        step
    }

    /// Miner phase: assembles a block from pooled updates for the current
    /// round. Returns nothing if the pool holds none (empty blocks are invalid).
    pub fn begin_mining(&mut self, now: u64) -> Option<MineJob> {
        let round = self.chain.height();
        if !self.config.has(Role::Miner) || self.last_mined == Some(round) {
            return None;
        }
        let updates = self.pool.for_round(round);
        if updates.is_empty() {
            return None;
        }
        self.last_mined = Some(round);
        let agg = aggregate(&updates).ok()?;
        let tip = self.chain.tip();
        let template = BlockHeader {
            version: BLOCK_VERSION,
            prev_hash: tip.hash(),
            merkle_root: merkle_root(&updates),
            timestamp: (now / 1000).max(tip.header.timestamp),
            target: self.chain.next_target(),
            nonce: self.config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d),
        };
        Some(MineJob {
            template,
            updates,
            aggregate: agg.params,
            height: round + 1,
            max_attempts: self.config.mine_attempts,
        })
    }

    pub fn mining_done(&mut self, job: &MineJob, result: Option<Block>) -> Step {
        let mut step = Step::default();
        let Some(b) = result else {
            self.last_mined = None;
            step.events.push(NodeEvent::MiningFailed { round: job.round() });
            return step;
        };
        step.events.push(NodeEvent::Mined {
            height: b.height,
            hash: b.hash(),
            updates: b.updates.len(),
        });
        match self.consider_block(&mut step, b.clone(), "mined") {
            BlockOutcome::Extended | BlockOutcome::Reorg => self.gossip_block(&mut step, b),
            _ => {}
        }
        step
    }

    /// Runs the client and miner phases back to back with jobs executed
    /// inline.
    pub fn run_round(&mut self, now: u64) -> RoundReport {
        let mut step = Step::default();
        let (job, events) = self.begin_training();
        step.events.extend(events);
        if let Some(job) = job {
            let r = job.run();
            step.merge(self.training_done(job.round, r));
        }
        if let Some(job) = self.begin_mining(now) {
            let r = job.run();
            step.merge(self.mining_done(&job, r));
        }
        RoundReport { step }
    }
}

/// Restores a node from its chain file: reload, revalidate, truncate any
/// invalid suffix, resume from the recovered tip.
pub fn recover(config: NodeConfig, data: Option<Dataset>) -> Result<Node, NodeError> {
    Node::with_data(config, data)
}

/// True if any row of `data`, serialized as consecutive little-endian f64
/// features, occurs in `payload`.
pub fn leaks_dataset(payload: &[u8], data: &Dataset) -> bool {
    let row_bytes = data.input_dim() * 8;
    if row_bytes == 0 || payload.len() < row_bytes {
        return false;
    }
    let mut by_first: HashMap<u64, Vec<usize>> = HashMap::new();
    for i in 0..data.n_samples() {
        by_first.entry(data.row(i)[0].to_bits()).or_default().push(i);
    }
    for start in 0..=payload.len() - row_bytes {
        let first = u64::from_le_bytes(payload[start..start + 8].try_into().expect("8 bytes"));
        if let Some(rows) = by_first.get(&first) {
            for &i in rows {
                let window = &payload[start..start + row_bytes];
                if window.chunks(8).zip(data.row(i)).all(|(c, v)| c == v.to_le_bytes()) {
                    return true;
                }
            }
        }
    }
    false
}

#[cfg(test)]
mod tests;
