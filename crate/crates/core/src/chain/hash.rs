use std::fmt;

use ripemd::Ripemd160;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::Address;

/// 32-byte digest, ordered as a big-endian integer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash256(pub [u8; 32]);

impl Hash256 {
    pub const ZERO: Hash256 = Hash256([0; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Hash256(bytes.try_into().ok()?))
    }
}

impl fmt::Display for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash256({})", self.to_hex())
    }
}

/// SHA-256 applied twice.
pub fn double_sha256(data: &[u8]) -> Hash256 {
    let first = Sha256::digest(data);
    Hash256(Sha256::digest(first).into())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot derive an address from an empty identifier")]
pub struct EmptyKey;

/// RIPEMD-160 of SHA-256 of a public identifier.
pub fn address_of(pubkey: &[u8]) -> Result<Address, EmptyKey> {
    if pubkey.is_empty() {
        return Err(EmptyKey);
    }
    let sha = Sha256::digest(pubkey);
    Ok(Address(Ripemd160::digest(sha).into()))
}
