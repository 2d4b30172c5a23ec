//! Blockchain kernel: hashing, compact targets, blocks, mining, validation,
//! fork choice and persistence.

mod block;
mod hash;
mod store;
mod target;
mod validate;

use std::sync::Arc;

use num_bigint::BigUint;
use num_traits::Zero;
use thiserror::Error;

use crate::codec::DecodeError;
use crate::params::{ModelConfig, ParameterVector};
use crate::trainer::init_params;

pub use block::{merkle_root, mine, Block, BlockHeader, BLOCK_VERSION, HEADER_LEN};
pub use hash::{address_of, double_sha256, EmptyKey, Hash256};
pub use store::{decode_frames, encode_frames, recover_chain, ChainStore, Recovery};
pub use target::{compress_target, expand_target, CompactTarget, TargetError, EXPONENT_BIAS, U256};
pub use validate::{validate_block, Violation, MAX_TIMESTAMP_REGRESSION};

/// Headers per difficulty window.
pub const RETARGET_WINDOW: usize = 16;
/// Maximum factor the target may move by in one retarget.
pub const RETARGET_CLAMP: u64 = 4;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("block {height} rejected: {}", join(.violations))]
    Invalid { height: u64, violations: Vec<Violation> },
    #[error("genesis block does not match the shared configuration")]
    GenesisMismatch,
    #[error("no block with hash {0} in this chain")]
    UnknownParent(Hash256),
    #[error("retarget needs at least one header")]
    EmptyWindow,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Parameters every node must share to agree on genesis.
#[derive(Debug, Clone, PartialEq)]
pub struct GenesisConfig {
    pub model: ModelConfig,
    pub initial_target: CompactTarget,
    pub desired_interval: u64,
}

impl GenesisConfig {
    pub fn new(model: ModelConfig, initial_target: CompactTarget, desired_interval: u64) -> Self {
        GenesisConfig {
            model,
            initial_target,
            desired_interval: desired_interval.max(1),
        }
    }

    pub fn genesis_block(&self) -> Block {
        Block {
            header: BlockHeader {
                version: BLOCK_VERSION,
                prev_hash: Hash256::ZERO,
                merkle_root: Hash256::ZERO,
                timestamp: 0,
                target: self.initial_target,
                nonce: 0,
            },
            updates: Vec::new(),
            aggregate: init_params(&self.model),
            height: 0,
        }
    }
}

/// New target from a window of headers: `old × actual_span / expected_span`,
/// the ratio clamped to `[1/4, 4]`. Windows shorter than [`RETARGET_WINDOW`]
/// keep the last header's target.
pub fn retarget(recent: &[BlockHeader], desired_interval: u64) -> Result<CompactTarget, ChainError> {
    let last = recent.last().ok_or(ChainError::EmptyWindow)?;
    if recent.len() < RETARGET_WINDOW {
        return Ok(last.target);
    }
    let window = &recent[recent.len() - RETARGET_WINDOW..];
    let intervals = (RETARGET_WINDOW - 1) as u64;
    let expected = desired_interval.max(1) * intervals;
    let actual = window[RETARGET_WINDOW - 1]
        .timestamp
        .saturating_sub(window[0].timestamp);
    let (num, den) = if actual.saturating_mul(RETARGET_CLAMP) < expected {
        (1, RETARGET_CLAMP)
    } else if actual > expected.saturating_mul(RETARGET_CLAMP) {
        (RETARGET_CLAMP, 1)
    } else {
        (actual, expected)
    };
    Ok(target::scale_target(
        last.target,
        &BigUint::from(num),
        &BigUint::from(den),
    ))
}

/// An immutable-by-sharing sequence of blocks from genesis. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct Chain {
    genesis: Arc<GenesisConfig>,
    blocks: Vec<Arc<Block>>,
    work: Vec<BigUint>,
}

impl Chain {
    pub fn new(genesis: GenesisConfig) -> Self {
        let g = genesis.genesis_block();
        let w = g.header.target.work();
        Chain {
            genesis: Arc::new(genesis),
            blocks: vec![Arc::new(g)],
            work: vec![w],
        }
    }

    /// Validates `blocks` (genesis first) against the shared configuration.
    pub fn from_blocks(genesis: GenesisConfig, blocks: Vec<Block>) -> Result<Self, ChainError> {
        let mut iter = blocks.into_iter();
        let mut chain = Chain::new(genesis);
        match iter.next() {
            Some(g) if g == *chain.blocks[0] => {}
            _ => return Err(ChainError::GenesisMismatch),
        }
        for b in iter {
            chain.push(b)?;
        }
        Ok(chain)
    }

    pub fn genesis_config(&self) -> &GenesisConfig {
        &self.genesis
    }

    pub fn genesis(&self) -> &Block {
        &self.blocks[0]
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain holds genesis")
    }

    pub fn tip_hash(&self) -> Hash256 {
        self.tip().hash()
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    /// Always false: a chain holds at least genesis.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn block(&self, height: u64) -> Option<&Block> {
        self.blocks.get(height as usize).map(|b| &**b)
    }

    pub fn blocks(&self) -> impl DoubleEndedIterator<Item = &Block> + ExactSizeIterator {
        self.blocks.iter().map(|b| &**b)
    }

    pub fn height_of(&self, hash: &Hash256) -> Option<u64> {
        self.blocks.iter().position(|b| b.hash() == *hash).map(|i| i as u64)
    }

    pub fn cumulative_work(&self) -> &BigUint {
        self.work.last().expect("chain holds genesis")
    }

    /// Target the block at `height` must carry, given this chain's first
    /// `height` blocks. Retargets only when a full window of non-genesis
    /// headers has accumulated since the last adjustment.
    fn target_at(&self, height: usize) -> CompactTarget {
        let parent = &self.blocks[height - 1];
        if height > RETARGET_WINDOW && height.is_multiple_of(RETARGET_WINDOW) {
            let headers: Vec<BlockHeader> = self.blocks[height - RETARGET_WINDOW..height]
                .iter()
                .map(|b| b.header)
                .collect();
            retarget(&headers, self.genesis.desired_interval).expect("non-empty window")
        } else {
            parent.header.target
        }
    }

    pub fn next_target(&self) -> CompactTarget {
        self.target_at(self.blocks.len())
    }

    /// Checks `block` as the next tip without taking it.
    pub fn check_next(&self, block: &Block) -> Result<(), Vec<Violation>> {
        validate_block(block, self.tip(), self.next_target())
    }

    /// Validates and appends `block` as the new tip.
    pub fn push(&mut self, block: Block) -> Result<(), ChainError> {
        self.check_next(&block).map_err(|violations| ChainError::Invalid {
            height: block.height,
            violations,
        })?;
        let w = self.cumulative_work() + block.header.target.work();
        self.blocks.push(Arc::new(block));
        self.work.push(w);
        Ok(())
    }

    /// The first `len` blocks; `len` is clamped to `1..=self.len()`.
    pub fn truncated(&self, len: usize) -> Chain {
        let len = len.clamp(1, self.blocks.len());
        Chain {
            genesis: Arc::clone(&self.genesis),
            blocks: self.blocks[..len].to_vec(),
            work: self.work[..len].to_vec(),
        }
    }

    /// Builds the chain that ends in `block`, whose parent must be in this
    /// chain. Used to evaluate competing forks.
    pub fn fork_with(&self, block: Block) -> Result<Chain, ChainError> {
        let parent = self
            .height_of(&block.header.prev_hash)
            .ok_or(ChainError::UnknownParent(block.header.prev_hash))?;
        let mut fork = self.truncated(parent as usize + 1);
        fork.push(block)?;
        Ok(fork)
    }

    /// Length-prefixed serialized blocks, genesis first.
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_frames(self.blocks())
    }

    pub fn from_bytes(genesis: GenesisConfig, bytes: &[u8]) -> Result<Self, ChainError> {
        let (blocks, err) = decode_frames(bytes);
        if let Some(e) = err {
            return Err(e.into());
        }
        Chain::from_blocks(genesis, blocks)
    }
}

/// More cumulative work wins; equal work goes to the numerically lower tip
/// hash. Symmetric in its arguments.
pub fn choose_chain<'a>(a: &'a Chain, b: &'a Chain) -> &'a Chain {
    match a.cumulative_work().cmp(b.cumulative_work()) {
        std::cmp::Ordering::Greater => a,
        std::cmp::Ordering::Less => b,
        std::cmp::Ordering::Equal => {
            if b.tip_hash() < a.tip_hash() {
                b
            } else {
                a
            }
        }
    }
}

/// Aggregate of the highest block that carries updates, else genesis.
pub fn global_model(chain: &Chain) -> &ParameterVector {
    chain
        .blocks()
        .rev()
        .find(|b| !b.updates.is_empty())
        .map_or(&chain.genesis().aggregate, |b| &b.aggregate)
}

/// Total work of a list of targets, as [`Chain::cumulative_work`] computes it.
pub fn total_work<'a>(targets: impl IntoIterator<Item = &'a CompactTarget>) -> BigUint {
    targets.into_iter().fold(BigUint::zero(), |acc, t| acc + t.work())
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::fedavg::aggregate;
    use crate::params::{Activation, Address, ModelUpdate};

    pub const EASY: u32 = 0x2100_ffff;

    pub fn genesis() -> GenesisConfig {
        let model = ModelConfig::new(vec![3, 4, 2], Activation::Relu, 5).unwrap();
        GenesisConfig::new(model, CompactTarget::new(EASY).unwrap(), 2)
    }

    pub fn update(chain: &Chain, client: u8, shift: f64) -> ModelUpdate {
        let base = global_model(chain);
        let v: Vec<f64> = base.as_slice().iter().map(|x| x + shift).collect();
        ModelUpdate::new(
            Address([client; 20]),
            u64::from(client) + 1,
            ParameterVector::new(v).unwrap(),
            chain.height(),
        )
        .unwrap()
    }

    /// Honestly assembled and mined successor of `chain`'s tip.
    pub fn next_block(chain: &Chain, clients: &[u8], timestamp: u64) -> Block {
        let mut updates: Vec<_> = clients.iter().map(|&c| update(chain, c, f64::from(c) * 0.01)).collect();
        updates.sort_by_key(|u| u.client_id);
        let agg = aggregate(&updates).unwrap().params;
        let template = BlockHeader {
            version: BLOCK_VERSION,
            prev_hash: chain.tip_hash(),
            merkle_root: merkle_root(&updates),
            timestamp,
            target: chain.next_target(),
            nonce: 0,
        };
        Block {
            header: mine(&template, 1 << 20).unwrap(),
            updates,
            aggregate: agg,
            height: chain.height() + 1,
        }
    }

    pub fn grow(chain: &mut Chain, n: usize) {
        for _ in 0..n {
            let ts = chain.tip().header.timestamp + 2;
            let b = next_block(chain, &[1, 2], ts);
            chain.push(b).unwrap();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    fn header_at(ts: u64, bits: u32) -> BlockHeader {
        BlockHeader {
            version: BLOCK_VERSION,
            prev_hash: Hash256::ZERO,
            merkle_root: Hash256::ZERO,
            timestamp: ts,
            target: CompactTarget::new(bits).unwrap(),
            nonce: 0,
        }
    }

    fn window(spacing: u64, bits: u32) -> Vec<BlockHeader> {
        (0..RETARGET_WINDOW as u64)
            .map(|i| header_at(i * spacing, bits))
            .collect()
    }

    const MID: u32 = 0x1d00_ffff;

    #[test]
    fn retarget_ratio_one() {
        let same = retarget(&window(10, MID), 10).unwrap();
        assert_eq!(same.expand(), CompactTarget::new(MID).unwrap().expand());
    }

    #[test]
    fn retarget_doubles_when_twice_as_slow() {
        let old = CompactTarget::new(MID).unwrap().expand().to_biguint();
        let new = retarget(&window(20, MID), 10).unwrap().expand().to_biguint();
        assert_eq!(new, old * 2u32);
    }

    #[test]
    fn retarget_clamps() {
        let old = CompactTarget::new(MID).unwrap().expand().to_biguint();
        let slow = retarget(&window(1000, MID), 10).unwrap().expand().to_biguint();
        assert_eq!(slow, &old * 4u32);
        let fast = retarget(&window(0, MID), 10).unwrap().expand().to_biguint();
        assert_eq!(fast, &old / 4u32);
    }

    #[test]
    fn retarget_short_and_empty() {
        let short = window(1000, MID)[..5].to_vec();
        assert_eq!(retarget(&short, 10).unwrap().bits(), MID);
        assert!(matches!(retarget(&[], 10), Err(ChainError::EmptyWindow)));
    }

    #[test]
    fn honest_block_validates() {
        let chain = Chain::new(genesis());
        let b = next_block(&chain, &[1, 2, 3], 2);
        assert_eq!(chain.check_next(&b), Ok(()));
    }

    fn codes(r: Result<(), Vec<Violation>>) -> Vec<&'static str> {
        r.unwrap_err().iter().map(Violation::code).collect()
    }

    #[test]
    fn tampering_is_detected() {
        // A hard target so that a zeroed nonce fails with overwhelming odds.
        let mut g = genesis();
        g.initial_target = CompactTarget::new(0x2000_ffff).unwrap();
        let chain = Chain::new(g);
        let b = next_block(&chain, &[1, 2], 2);

        let mut bad = b.clone();
        bad.header.nonce = if b.header.nonce == 0 { 1 } else { 0 };
        if !bad.header.meets_target() {
            assert!(codes(chain.check_next(&bad)).contains(&"pow"));
        }

        let mut bad = b.clone();
        let mut v = bad.aggregate.clone().into_inner();
        v[0] += 1e-3;
        bad.aggregate = ParameterVector::new(v).unwrap();
        assert_eq!(codes(chain.check_next(&bad)), vec!["aggregate-mismatch"]);

        let mut bad = b.clone();
        bad.height = 5;
        assert_eq!(codes(chain.check_next(&bad)), vec!["height"]);

        let mut bad = b.clone();
        bad.updates.pop();
        let c = codes(chain.check_next(&bad));
        assert!(c.contains(&"merkle-root") && c.contains(&"aggregate-mismatch"));

        let mut bad = b.clone();
        bad.updates.clear();
        let c = codes(chain.check_next(&bad));
        assert!(c.contains(&"no-updates"));
    }

    #[test]
    fn collects_every_violation() {
        let chain = Chain::new(genesis());
        let mut b = next_block(&chain, &[1], 2);
        b.header.prev_hash = Hash256([1; 32]);
        b.header.target = CompactTarget::MAX;
        b.updates[0].round = 9;
        let c = codes(chain.check_next(&b));
        for code in ["prev-hash", "target", "merkle-root", "update-round"] {
            assert!(c.contains(&code), "{code} missing from {c:?}");
        }
    }

    #[test]
    fn duplicate_clients_rejected() {
        let chain = Chain::new(genesis());
        let b = next_block(&chain, &[1, 1], 2);
        assert_eq!(codes(chain.check_next(&b)), vec!["duplicate-client"]);
    }

    #[test]
    fn timestamp_window() {
        let mut chain = Chain::new(genesis());
        let b = next_block(&chain, &[1], 1000);
        chain.push(b).unwrap();
        assert!(chain.check_next(&next_block(&chain, &[1], 401)).is_ok());
        assert_eq!(
            codes(chain.check_next(&next_block(&chain, &[1], 400))),
            vec!["timestamp"]
        );
    }

    #[test]
    fn work_grows_with_blocks() {
        let mut chain = Chain::new(genesis());
        let mut last = chain.cumulative_work().clone();
        for _ in 0..4 {
            grow(&mut chain, 1);
            assert!(*chain.cumulative_work() > last);
            last = chain.cumulative_work().clone();
        }
        let targets: Vec<_> = chain.blocks().map(|b| b.header.target).collect();
        assert_eq!(total_work(&targets), last);
    }

    #[test]
    fn choose_by_work_then_hash() {
        let mut a = Chain::new(genesis());
        assert!(std::ptr::eq(choose_chain(&a, &a), &a));
        let b = a.clone();
        grow(&mut a, 1);
        assert!(std::ptr::eq(choose_chain(&a, &b), &a));
        assert!(std::ptr::eq(choose_chain(&b, &a), &a));

        let base = Chain::new(genesis());
        let x = base.fork_with(next_block(&base, &[1], 2)).unwrap();
        let y = base.fork_with(next_block(&base, &[2], 2)).unwrap();
        assert_eq!(x.cumulative_work(), y.cumulative_work());
        let lower = if x.tip_hash() < y.tip_hash() { &x } else { &y };
        assert_eq!(choose_chain(&x, &y).tip_hash(), lower.tip_hash());
        assert_eq!(choose_chain(&y, &x).tip_hash(), lower.tip_hash());
    }

    #[test]
    fn global_model_follows_tip() {
        let mut chain = Chain::new(genesis());
        assert_eq!(global_model(&chain), &chain.genesis().aggregate);
        let b = next_block(&chain, &[3], 2);
        let only = b.updates[0].params.clone();
        chain.push(b).unwrap();
        assert_eq!(global_model(&chain), &only);
        grow(&mut chain, 1);
        assert_eq!(global_model(&chain), &chain.tip().aggregate);
    }

    #[test]
    fn difficulty_holds_until_window_fills() {
        let mut chain = Chain::new(genesis());
        grow(&mut chain, RETARGET_WINDOW);
        assert_eq!(chain.next_target(), chain.genesis().header.target);
        grow(&mut chain, RETARGET_WINDOW - 1);
        // Blocks 16..31 came exactly on schedule.
        assert_eq!(chain.len(), 2 * RETARGET_WINDOW);
        assert_eq!(chain.next_target().expand(), chain.genesis().header.target.expand());
        grow(&mut chain, 1);
    }

    #[test]
    fn byte_round_trip_and_genesis_check() {
        let mut chain = Chain::new(genesis());
        grow(&mut chain, 3);
        let bytes = chain.to_bytes();
        let back = Chain::from_bytes(genesis(), &bytes).unwrap();
        assert_eq!(back.tip_hash(), chain.tip_hash());
        assert_eq!(back.to_bytes(), bytes);

        let mut other = genesis();
        other.initial_target = CompactTarget::MAX;
        assert!(matches!(
            Chain::from_bytes(other, &bytes),
            Err(ChainError::GenesisMismatch)
        ));
    }
}
