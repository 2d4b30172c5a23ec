use std::collections::HashSet;
use std::fmt;

use crate::fedavg::{aggregate_matches, AGGREGATE_TOLERANCE};

use super::block::{merkle_root, Block, BLOCK_VERSION};
use super::target::CompactTarget;

/// Blocks may not be timestamped more than this far before their parent.
pub const MAX_TIMESTAMP_REGRESSION: u64 = 600;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Version(u32),
    PrevHash,
    Height {
        expected: u64,
        actual: u64,
    },
    Pow,
    Target {
        expected: CompactTarget,
        actual: CompactTarget,
    },
    MerkleRoot,
    NoUpdates,
    ZeroSamples {
        index: usize,
    },
    UpdateDimension {
        index: usize,
        expected: usize,
        actual: usize,
    },
    UpdateRound {
        index: usize,
        expected: u64,
        actual: u64,
    },
    DuplicateClient {
        index: usize,
    },
    AggregateMismatch,
    Timestamp {
        parent: u64,
        actual: u64,
    },
}

impl Violation {
    /// Short stable identifier, used in logs and tests.
    pub fn code(&self) -> &'static str {
        match self {
            Violation::Version(_) => "version",
            Violation::PrevHash => "prev-hash",
            Violation::Height { .. } => "height",
            Violation::Pow => "pow",
            Violation::Target { .. } => "target",
            Violation::MerkleRoot => "merkle-root",
            Violation::NoUpdates => "no-updates",
            Violation::ZeroSamples { .. } => "zero-samples",
            Violation::UpdateDimension { .. } => "update-dimension",
            Violation::UpdateRound { .. } => "update-round",
            Violation::DuplicateClient { .. } => "duplicate-client",
            Violation::AggregateMismatch => "aggregate-mismatch",
            Violation::Timestamp { .. } => "timestamp",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Height { expected, actual } => write!(f, "height: expected {expected}, got {actual}"),
            Violation::Target { expected, actual } => write!(f, "target: expected {expected}, got {actual}"),
            Violation::UpdateDimension {
                index,
                expected,
                actual,
            } => {
                write!(f, "update-dimension: update {index} has {actual}, expected {expected}")
            }
            Violation::UpdateRound {
                index,
                expected,
                actual,
            } => {
                write!(
                    f,
                    "update-round: update {index} targets round {actual}, expected {expected}"
                )
            }
            Violation::Timestamp { parent, actual } => write!(f, "timestamp: {actual} vs parent {parent}"),
            other => f.write_str(other.code()),
        }
    }
}

/// Checks `block` as the successor of `parent`, collecting every violation.
pub fn validate_block(block: &Block, parent: &Block, expected_target: CompactTarget) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let h = &block.header;

    if h.version != BLOCK_VERSION {
        v.push(Violation::Version(h.version));
    }
    if h.prev_hash != parent.hash() {
        v.push(Violation::PrevHash);
    }
    if block.height != parent.height + 1 {
        v.push(Violation::Height {
            expected: parent.height + 1,
            actual: block.height,
        });
    }
    if !h.meets_target() {
        v.push(Violation::Pow);
    }
    if h.target != expected_target {
        v.push(Violation::Target {
            expected: expected_target,
            actual: h.target,
        });
    }
    if h.merkle_root != merkle_root(&block.updates) {
        v.push(Violation::MerkleRoot);
    }
    if h.timestamp.saturating_add(MAX_TIMESTAMP_REGRESSION) <= parent.header.timestamp {
        v.push(Violation::Timestamp {
            parent: parent.header.timestamp,
            actual: h.timestamp,
        });
    }

    if block.updates.is_empty() {
        v.push(Violation::NoUpdates);
    }
    let dim = parent.aggregate.dim();
    let mut well_formed = true;
    let mut clients = HashSet::new();
    for (index, u) in block.updates.iter().enumerate() {
        if u.sample_count == 0 {
            v.push(Violation::ZeroSamples { index });
            well_formed = false;
        }
        if u.params.dim() != dim {
            v.push(Violation::UpdateDimension {
                index,
                expected: dim,
                actual: u.params.dim(),
            });
            well_formed = false;
        }
        if u.round != parent.height {
            v.push(Violation::UpdateRound {
                index,
                expected: parent.height,
                actual: u.round,
            });
        }
        if !clients.insert(u.client_id) {
            v.push(Violation::DuplicateClient { index });
        }
    }
    if well_formed && !block.updates.is_empty() {
        let matches =
            aggregate_matches(&block.updates, block.aggregate.as_slice(), AGGREGATE_TOLERANCE).unwrap_or(false);
        if !matches {
            v.push(Violation::AggregateMismatch);
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
