use std::collections::BTreeSet;
use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::chain::{CompactTarget, GenesisConfig};
use crate::dataset::{BlobSpec, Dataset, DatasetError};
use crate::kv::{parse_u32_radix, KvError, KvFile};
use crate::net::{DEFAULT_BROADCAST_PORT, DEFAULT_SYNC_PORT};
use crate::params::{Activation, ModelConfig};
use crate::trainer::TrainSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Client,
    Miner,
    Relay,
    Worker,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "client" => Ok(Role::Client),
            "miner" => Ok(Role::Miner),
            "relay" => Ok(Role::Relay),
            "worker" => Ok(Role::Worker),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Client => "client",
            Role::Miner => "miner",
            Role::Relay => "relay",
            Role::Worker => "worker",
        })
    }
}

pub fn parse_roles(s: &str) -> Result<BTreeSet<Role>, String> {
    let roles: BTreeSet<Role> = s.split(',').map(str::parse).collect::<Result<_, _>>()?;
    if roles.is_empty() {
        return Err("at least one role is required".into());
    }
    Ok(roles)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    /// Shard `shard` of `shards` contiguous equal slices of a blob dataset.
    Synthetic {
        blobs: BlobSpec,
        shard: usize,
        shards: usize,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, DatasetError> {
        match self {
            DataSource::Csv(path) => Dataset::from_csv_path(path),
            DataSource::Synthetic { blobs, shard, shards } => {
                let mut parts = blobs.generate().partition(*shards)?;
                Ok(parts.swap_remove(*shard))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{0}")]
    Invalid(String),
}

/// Default initial target: roughly one hash in 256 succeeds.
pub const DEFAULT_INITIAL_TARGET: u32 = 0x2000_ffff;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub roles: BTreeSet<Role>,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub data: DataSource,
    pub chain_path: Option<PathBuf>,
    pub sync: SocketAddr,
    pub broadcast: SocketAddr,
    /// Sync endpoint of a peer to bootstrap from; none starts a new network.
    pub bootstrap: Option<SocketAddr>,
    pub desired_block_interval: u64,
    pub initial_target: CompactTarget,
    pub participation_probability: f64,
    /// Derives the node key and its participation draws.
    pub seed: u64,
    /// Offload the training step to this worker instead of training locally.
    pub offload_worker: Option<SocketAddr>,
    /// Where a `worker` node listens for offload jobs.
    pub worker_listen: SocketAddr,
    /// Loopback port on which an external trainer may serve this node.
    pub bridge_port: Option<u16>,
    pub mine_attempts: u64,
}

const KEYS: &[&str] = &[
    "roles",
    "seed",
    "participation",
    "model.layers",
    "model.activation",
    "model.seed",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.seed",
    "data.path",
    "data.classes",
    "data.features",
    "data.samples",
    "data.center_box",
    "data.std_dev",
    "data.seed",
    "data.shard",
    "data.shards",
    "chain.path",
    "chain.initial_target",
    "chain.block_interval",
    "chain.mine_attempts",
    "net.sync",
    "net.broadcast",
    "net.bootstrap",
    "offload.worker",
    "offload.listen",
    "bridge.enabled",
    "bridge.port",
];

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl NodeConfig {
    /// A single-host configuration on the default ports.
    pub fn defaults() -> Self {
        let blobs = BlobSpec::default();
        NodeConfig {
            roles: [Role::Client, Role::Miner].into(),
            model: ModelConfig::new(vec![blobs.features, 16, blobs.classes], Activation::Relu, 1)
                .expect("valid default model"),
            train: TrainSpec {
                epochs: 2,
                batch_size: 32,
                learning_rate: 0.05,
                seed: 1,
            },
            data: DataSource::Synthetic {
                blobs,
                shard: 0,
                shards: 1,
            },
            chain_path: None,
            sync: SocketAddr::from(([127, 0, 0, 1], DEFAULT_SYNC_PORT)),
            broadcast: SocketAddr::from(([127, 0, 0, 1], DEFAULT_BROADCAST_PORT)),
            bootstrap: None,
            desired_block_interval: 2,
            initial_target: CompactTarget::new(DEFAULT_INITIAL_TARGET).expect("valid"),
            participation_probability: 1.0,
            seed: 0,
            offload_worker: None,
            worker_listen: SocketAddr::from(([127, 0, 0, 1], 9500)),
            bridge_port: None,
            mine_attempts: 1 << 24,
        }
    }

    pub fn from_kv(f: &KvFile) -> Result<Self, ConfigError> {
        f.reject_unknown(KEYS)?;
        let d = Self::defaults();

        let roles = match f.get("roles") {
            Some(s) => parse_roles(s).map_err(invalid)?,
            None => d.roles.clone(),
        };
        let layers = f
            .list::<usize>("model.layers")?
            .unwrap_or_else(|| d.model.layer_sizes().to_vec());
        let activation = f.or("model.activation", d.model.activation())?;
        let model = ModelConfig::new(layers, activation, f.or("model.seed", d.model.seed())?)
            .map_err(|e| invalid(format!("model: {e}")))?;
        let train = TrainSpec {
            epochs: f.or("train.epochs", d.train.epochs)?,
            batch_size: f.or("train.batch_size", d.train.batch_size)?,
            learning_rate: f.or("train.learning_rate", d.train.learning_rate)?,
            seed: f.or("train.seed", d.train.seed)?,
        };

        let data = match f.get("data.path") {
            Some(p) => DataSource::Csv(PathBuf::from(p)),
            None => {
                let b = BlobSpec::default();
                let blobs = BlobSpec {
                    classes: f.or("data.classes", b.classes)?,
                    features: f.or("data.features", b.features)?,
                    samples: f.or("data.samples", b.samples)?,
                    center_box: f.or("data.center_box", b.center_box)?,
                    std_dev: f.or("data.std_dev", b.std_dev)?,
                    seed: f.or("data.seed", b.seed)?,
                };
                let shards: usize = f.or("data.shards", 1)?;
                let shard: usize = f.or("data.shard", 0)?;
                if shards == 0 || shard >= shards {
                    return Err(invalid(format!(
                        "data.shard {shard} must be below data.shards {shards}"
                    )));
                }
                if blobs.classes == 0 || blobs.features == 0 || blobs.samples < shards {
                    return Err(invalid("synthetic data needs classes, features and a sample per shard"));
                }
                if !(blobs.std_dev.is_finite() && blobs.std_dev >= 0.0) {
                    return Err(invalid("data.std_dev must be finite and non-negative"));
                }
                DataSource::Synthetic { blobs, shard, shards }
            }
        };

        let target_bits = match f.get("chain.initial_target") {
            Some(s) => parse_u32_radix(s).map_err(|e| invalid(format!("chain.initial_target: {e}")))?,
            None => d.initial_target.bits(),
        };
        let initial_target =
            CompactTarget::new(target_bits).map_err(|e| invalid(format!("chain.initial_target: {e}")))?;

        let participation: f64 = f.or("participation", d.participation_probability)?;
        if !(0.0..=1.0).contains(&participation) {
            return Err(invalid(format!("participation {participation} must lie in [0, 1]")));
        }
        let interval: u64 = f.or("chain.block_interval", d.desired_block_interval)?;
        if interval == 0 {
            return Err(invalid("chain.block_interval must be at least 1 second"));
        }
        let bridge_port = if f.or("bridge.enabled", false)? {
            Some(f.or("bridge.port", crate::bridge::DEFAULT_BRIDGE_PORT)?)
        } else {
            None
        };

        let cfg = NodeConfig {
            roles,
            model,
            train,
            data,
            chain_path: f.parse_value::<PathBuf>("chain.path")?,
            sync: f.or("net.sync", d.sync)?,
            broadcast: f.or("net.broadcast", d.broadcast)?,
            bootstrap: f.parse_value("net.bootstrap")?,
            desired_block_interval: interval,
            initial_target,
            participation_probability: participation,
            seed: f.or("seed", d.seed)?,
            offload_worker: f.parse_value("offload.worker")?,
            worker_listen: f.or("offload.listen", d.worker_listen)?,
            bridge_port,
            mine_attempts: f.or("chain.mine_attempts", d.mine_attempts)?,
        };
        if cfg.sync == cfg.broadcast {
            return Err(invalid("net.sync and net.broadcast must differ"));
        }
        Ok(cfg)
    }

    pub fn has(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    pub fn genesis(&self) -> GenesisConfig {
        GenesisConfig::new(self.model.clone(), self.initial_target, self.desired_block_interval)
    }
}
