use std::collections::BTreeMap;
use std::fmt;

use crate::params::{Address, ModelUpdate};

pub const POOL_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolReject {
    Dimension { expected: usize, actual: usize },
    Stale { round: u64, height: u64 },
    Duplicate,
    Full,
}

impl fmt::Display for PoolReject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolReject::Dimension { expected, actual } => write!(f, "dimension {actual}, expected {expected}"),
            PoolReject::Stale { round, height } => write!(f, "stale round {round} at height {height}"),
            PoolReject::Duplicate => f.write_str("client already submitted this round"),
            PoolReject::Full => f.write_str("pool full"),
        }
    }
}

/// Pending updates keyed by `(round, client)`. The first update from a
/// client for a round wins.
#[derive(Debug, Clone)]
pub struct UpdatePool {
    dim: usize,
    capacity: usize,
    entries: BTreeMap<(u64, Address), ModelUpdate>,
}

impl UpdatePool {
    pub fn new(dim: usize) -> Self {
        Self::with_capacity(dim, POOL_CAPACITY)
    }

    pub fn with_capacity(dim: usize, capacity: usize) -> Self {
        UpdatePool {
            dim,
            capacity,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, u: ModelUpdate, height: u64) -> Result<(), PoolReject> {
        if u.params.dim() != self.dim {
            return Err(PoolReject::Dimension {
                expected: self.dim,
                actual: u.params.dim(),
            });
        }
        if u.round < height {
            return Err(PoolReject::Stale { round: u.round, height });
        }
        let key = (u.round, u.client_id);
        if self.entries.contains_key(&key) {
            return Err(PoolReject::Duplicate);
        }
        if self.entries.len() >= self.capacity {
            return Err(PoolReject::Full);
        }
        self.entries.insert(key, u);
        Ok(())
    }

    /// Updates for `round`, ordered by client address.
    pub fn for_round(&self, round: u64) -> Vec<ModelUpdate> {
        self.entries
            .range((round, Address([0; 20]))..=(round, Address([0xff; 20])))
            .map(|(_, u)| u.clone())
            .collect()
    }

    /// Drops every update for rounds below `height`.
    pub fn prune(&mut self, height: u64) {
        self.entries = self.entries.split_off(&(height, Address([0; 20])));
    }
}

/// Spec-facing name for [`UpdatePool::insert`].
pub fn pending_pool_insert(pool: &mut UpdatePool, u: ModelUpdate, height: u64) -> Result<(), PoolReject> {
    pool.insert(u, height)
}
