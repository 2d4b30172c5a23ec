use crate::codec::{DecodeError, Reader, Writer};
use crate::params::{ModelUpdate, ParameterVector};

use super::hash::{double_sha256, Hash256};
use super::target::CompactTarget;

pub const HEADER_LEN: usize = 88;
const NONCE_OFFSET: usize = 80;
pub const BLOCK_VERSION: u32 = 1;

/// `version ∥ prev_hash ∥ merkle_root ∥ timestamp ∥ target ∥ nonce`, 88 bytes,
/// integers little-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub version: u32,
    pub prev_hash: Hash256,
    pub merkle_root: Hash256,
    pub timestamp: u64,
    pub target: CompactTarget,
    pub nonce: u64,
}

impl BlockHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.version.to_le_bytes());
        out[4..36].copy_from_slice(&self.prev_hash.0);
        out[36..68].copy_from_slice(&self.merkle_root.0);
        out[68..76].copy_from_slice(&self.timestamp.to_le_bytes());
        out[76..80].copy_from_slice(&self.target.bits().to_le_bytes());
        out[NONCE_OFFSET..].copy_from_slice(&self.nonce.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let h = Self::decode(&mut r)?;
        r.finish()?;
        Ok(h)
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let version = r.u32()?;
        let prev_hash = Hash256(r.array()?);
        let merkle_root = Hash256(r.array()?);
        let timestamp = r.u64()?;
        let bits = r.u32()?;
        let target = CompactTarget::new(bits).map_err(|e| DecodeError::invalid("target", e.to_string()))?;
        let nonce = r.u64()?;
        Ok(BlockHeader {
            version,
            prev_hash,
            merkle_root,
            timestamp,
            target,
            nonce,
        })
    }

    pub fn hash(&self) -> Hash256 {
        double_sha256(&self.to_bytes())
    }

    pub fn meets_target(&self) -> bool {
        self.target.is_met_by(&self.hash())
    }
}

/// Binary merkle tree of double-SHA-256 leaves over serialized updates. Odd
/// levels duplicate their last node; no updates gives the zero hash.
pub fn merkle_root(updates: &[ModelUpdate]) -> Hash256 {
    let mut level: Vec<Hash256> = updates.iter().map(|u| double_sha256(&u.to_bytes())).collect();
    if level.is_empty() {
        return Hash256::ZERO;
    }
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let right = pair.get(1).unwrap_or(&pair[0]);
                let mut buf = [0u8; 64];
                buf[..32].copy_from_slice(&pair[0].0);
                buf[32..].copy_from_slice(&right.0);
                double_sha256(&buf)
            })
            .collect();
    }
    level[0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub header: BlockHeader,
    pub updates: Vec<ModelUpdate>,
    /// Global parameters after this block; for genesis, the shared initial model.
    pub aggregate: ParameterVector,
    /// Position in the chain. Not part of the serialized form.
    pub height: u64,
}

impl Block {
    pub fn hash(&self) -> Hash256 {
        self.header.hash()
    }

    /// `header ∥ update_count:u32 ∥ updates ∥ aggregate`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(HEADER_LEN + 4 + 8 * self.aggregate.dim() * (self.updates.len() + 1));
        self.encode(&mut w);
        w.finish()
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.bytes(&self.header.to_bytes());
        w.u32(self.updates.len() as u32);
        for u in &self.updates {
            u.encode(w);
        }
        self.aggregate.encode(w);
    }

    pub fn from_bytes(bytes: &[u8], height: u64) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let b = Self::decode(&mut r, height)?;
        r.finish()?;
        Ok(b)
    }

    pub(crate) fn decode(r: &mut Reader<'_>, height: u64) -> Result<Self, DecodeError> {
        let header = BlockHeader::decode(r)?;
        let count = r.u32()? as usize;
        // Each update is at least 40 bytes; reject counts the buffer cannot hold.
        if count > r.remaining() / 40 {
            return Err(DecodeError::invalid("update_count", "exceeds buffer"));
        }
        let mut updates = Vec::with_capacity(count);
        for _ in 0..count {
            updates.push(ModelUpdate::decode(r)?);
        }
        let aggregate = ParameterVector::decode(r)?;
        Ok(Block {
            header,
            updates,
            aggregate,
            height,
        })
    }
}

/// Searches nonces upward (wrapping) from the template's nonce; `None` after
/// `max_attempts` hashes without a hit.
pub fn mine(template: &BlockHeader, max_attempts: u64) -> Option<BlockHeader> {
    let threshold = template.target.expand();
    let mut bytes = template.to_bytes();
    let mut nonce = template.nonce;
    for _ in 0..max_attempts {
        bytes[NONCE_OFFSET..].copy_from_slice(&nonce.to_le_bytes());
        let h = double_sha256(&bytes);
        if super::target::U256::from(h) < threshold {
            return Some(BlockHeader { nonce, ..*template });
        }
        nonce = nonce.wrapping_add(1);
    }
    None
}
