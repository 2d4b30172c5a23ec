//! Compact 4-byte difficulty targets.
//!
//! `bits = Φ << 24 | Θ` encodes `Θ · 2^(8·(Φ − 4))`: the high byte is a base-256
//! exponent offset by 4 and the low three bytes are an unsigned mantissa. For
//! `Φ < 4` the mantissa is shifted right and truncated.

use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use thiserror::Error;

use super::hash::Hash256;

/// Exponent offset: `Φ = 4` means the mantissa is used unscaled.
pub const EXPONENT_BIAS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TargetError {
    #[error("compact target {0:#010x} has a zero mantissa")]
    ZeroMantissa(u32),
    #[error("compact target {0:#010x} expands beyond 256 bits")]
    Overflow(u32),
    #[error("compact target {0:#010x} expands to zero")]
    Underflow(u32),
    #[error("cannot compress a zero target")]
    ZeroTarget,
}

/// Unsigned 256-bit integer held as big-endian bytes, so the derived byte
/// ordering is numeric ordering.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct U256(pub [u8; 32]);

impl U256 {
    pub const ZERO: U256 = U256([0; 32]);
    pub const MAX: U256 = U256([0xff; 32]);

    pub fn from_u64(v: u64) -> Self {
        let mut out = [0u8; 32];
        out[24..].copy_from_slice(&v.to_be_bytes());
        U256(out)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    /// Number of bytes after stripping leading zero bytes.
    pub fn significant_bytes(&self) -> usize {
        32 - self.0.iter().take_while(|&&b| b == 0).count()
    }

    pub fn to_biguint(&self) -> BigUint {
        BigUint::from_bytes_be(&self.0)
    }

    /// `None` if `v` needs more than 256 bits.
    pub fn from_biguint(v: &BigUint) -> Option<Self> {
        let bytes = v.to_bytes_be();
        if bytes.len() > 32 {
            return None;
        }
        let mut out = [0u8; 32];
        out[32 - bytes.len()..].copy_from_slice(&bytes);
        Some(U256(out))
    }
}

impl From<Hash256> for U256 {
    fn from(h: Hash256) -> Self {
        U256(h.0)
    }
}

impl fmt::Debug for U256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U256(0x{})", hex::encode(self.0))
    }
}

impl fmt::LowerHex for U256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = hex::encode(self.0);
        let trimmed = s.trim_start_matches('0');
        f.write_str(if trimmed.is_empty() { "0" } else { trimmed })
    }
}

/// Expands raw bits without validating; `None` on overflow.
fn expand_bits(bits: u32) -> Option<U256> {
    let exponent = bits >> 24;
    let mantissa = bits & 0x00ff_ffff;
    let mut out = [0u8; 32];
    if exponent < EXPONENT_BIAS {
        let shift = 8 * (EXPONENT_BIAS - exponent);
        let v = mantissa.checked_shr(shift).unwrap_or(0);
        out[28..].copy_from_slice(&v.to_be_bytes());
        return Some(U256(out));
    }
    // Byte i of the mantissa (0 = least significant) lands `k + i` bytes from
    // the right end of the 32-byte buffer.
    let k = (exponent - EXPONENT_BIAS) as usize;
    let m = mantissa.to_be_bytes(); // m[1..4] are the three mantissa bytes
    for i in 0..3 {
        let byte = m[3 - i];
        let pos_from_right = k + i;
        if pos_from_right >= 32 {
            if byte != 0 {
                return None;
            }
        } else {
            out[31 - pos_from_right] = byte;
        }
    }
    Some(U256(out))
}

/// A validated compact target: non-zero mantissa, expansion fits in 256 bits
/// and is non-zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompactTarget(u32);

impl CompactTarget {
    /// `Φ = 0x21, Θ = 0xFFFFFF`: the largest canonical target, `2^256 − 2^232`.
    pub const MAX: CompactTarget = CompactTarget(0x21ff_ffff);

    pub fn new(bits: u32) -> Result<Self, TargetError> {
        if bits & 0x00ff_ffff == 0 {
            return Err(TargetError::ZeroMantissa(bits));
        }
        match expand_bits(bits) {
            None => Err(TargetError::Overflow(bits)),
            Some(t) if t.is_zero() => Err(TargetError::Underflow(bits)),
            Some(_) => Ok(CompactTarget(bits)),
        }
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn exponent(self) -> u8 {
        (self.0 >> 24) as u8
    }

    pub fn mantissa(self) -> u32 {
        self.0 & 0x00ff_ffff
    }

    pub fn expand(self) -> U256 {
        expand_bits(self.0).expect("validated on construction")
    }

    /// Canonical encoding of `t`: the top three significant bytes become the
    /// mantissa, lower bytes are truncated.
    pub fn compress(t: &U256) -> Result<Self, TargetError> {
        let n = t.significant_bytes();
        if n == 0 {
            return Err(TargetError::ZeroTarget);
        }
        let bits = if n <= 3 {
            let v = u32::from_be_bytes([0, t.0[29], t.0[30], t.0[31]]);
            (EXPONENT_BIAS << 24) | v
        } else {
            let top = 32 - n;
            let v = u32::from_be_bytes([0, t.0[top], t.0[top + 1], t.0[top + 2]]);
            ((n as u32 + 1) << 24) | v
        };
        Ok(CompactTarget(bits))
    }

    /// Expected hashes to find a block: `⌊2^256 / (target + 1)⌋`.
    pub fn work(self) -> BigUint {
        let two_256 = BigUint::one() << 256u32;
        two_256 / (self.expand().to_biguint() + BigUint::one())
    }

    /// True iff `hash`, read as a big-endian integer, is strictly below the target.
    pub fn is_met_by(self, hash: &Hash256) -> bool {
        U256::from(*hash) < self.expand()
    }
}

impl TryFrom<u32> for CompactTarget {
    type Error = TargetError;

    fn try_from(bits: u32) -> Result<Self, Self::Error> {
        CompactTarget::new(bits)
    }
}

impl fmt::Debug for CompactTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CompactTarget({:#010x})", self.0)
    }
}

impl fmt::Display for CompactTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

pub fn expand_target(c: CompactTarget) -> U256 {
    c.expand()
}

pub fn compress_target(t: &U256) -> Result<CompactTarget, TargetError> {
    CompactTarget::compress(t)
}

/// Scales `old` by `num / den`, saturating at the 256-bit maximum and never
/// returning a zero target.
pub(crate) fn scale_target(old: CompactTarget, num: &BigUint, den: &BigUint) -> CompactTarget {
    let scaled = old.expand().to_biguint() * num / den;
    let capped = if scaled.is_zero() {
        U256::from_u64(1)
    } else {
        U256::from_biguint(&scaled).unwrap_or(U256::MAX)
    };
    CompactTarget::compress(&capped).expect("non-zero by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(v: u64) -> U256 {
        U256::from_u64(v)
    }

    #[test]
    fn worked_expansions() {
        assert_eq!(CompactTarget::new(0x0412_3456).unwrap().expand(), u(0x12_3456));
        assert_eq!(CompactTarget::new(0x0512_3456).unwrap().expand(), u(0x1234_5600));
        // Φ − 4 = −1: ⌊0x123456 / 256⌋
        assert_eq!(CompactTarget::new(0x0312_3456).unwrap().expand(), u(0x1234));
    }

    #[test]
    fn worked_compressions() {
        assert_eq!(CompactTarget::compress(&u(0x12_3456)).unwrap().bits(), 0x0412_3456);
        let c = CompactTarget::compress(&u(0x1234_5678)).unwrap();
        assert_eq!(c.bits(), 0x0512_3456);
        assert!(c.expand() <= u(0x1234_5678));
        assert_eq!(CompactTarget::compress(&U256::ZERO), Err(TargetError::ZeroTarget));
        // Values below 2^24 keep Φ = 4 and are exact.
        assert_eq!(CompactTarget::compress(&u(0x12)).unwrap().bits(), 0x0400_0012);
    }

    #[test]
    fn validity_bounds() {
        assert_eq!(
            CompactTarget::new(0x0500_0000),
            Err(TargetError::ZeroMantissa(0x0500_0000))
        );
        assert_eq!(
            CompactTarget::new(0x0300_00ff),
            Err(TargetError::Underflow(0x0300_00ff))
        );
        assert!(CompactTarget::new(0x21ff_ffff).is_ok());
        assert_eq!(CompactTarget::new(0x22ff_ffff), Err(TargetError::Overflow(0x22ff_ffff)));
        // A three-byte mantissa at Φ = 0x23 would need 272 bits; one byte fits.
        assert_eq!(CompactTarget::new(0x23ff_ffff), Err(TargetError::Overflow(0x23ff_ffff)));
        assert!(CompactTarget::new(0x2300_00ff).is_ok());
        assert!(CompactTarget::new(0x2400_0001).is_err());
    }

    #[test]
    fn max_target_value() {
        let t = CompactTarget::MAX.expand();
        assert_eq!(&t.0[..3], &[0xff, 0xff, 0xff]);
        assert!(t.0[3..].iter().all(|&b| b == 0));
        assert_eq!(CompactTarget::compress(&U256::MAX).unwrap(), CompactTarget::MAX);
    }

    #[test]
    fn compress_agrees_in_top_24_bits() {
        let mut t = [0u8; 32];
        t[5..]
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = (i * 37 + 11) as u8);
        let t = U256(t);
        let c = CompactTarget::compress(&t).unwrap();
        let e = c.expand();
        assert!(e <= t);
        assert_eq!(e.significant_bytes(), t.significant_bytes());
        let top = 32 - t.significant_bytes();
        assert_eq!(&e.0[top..top + 3], &t.0[top..top + 3]);
    }

    #[test]
    fn harder_targets_carry_more_work() {
        let easy = CompactTarget::new(0x2100_ffff).unwrap();
        let hard = CompactTarget::new(0x1e00_ffff).unwrap();
        assert!(hard.work() > easy.work());
        assert_eq!(CompactTarget::MAX.work(), BigUint::one());
    }

    #[test]
    fn hash_comparison_is_strict() {
        let c = CompactTarget::new(0x0401_0000).unwrap();
        let mut at = [0u8; 32];
        at[29] = 1;
        assert!(!c.is_met_by(&Hash256(at)));
        at[29] = 0;
        at[30] = 0xff;
        assert!(c.is_met_by(&Hash256(at)));
    }

    #[test]
    fn scaling_saturates() {
        let c = CompactTarget::MAX;
        let four = BigUint::from(4u32);
        assert_eq!(scale_target(c, &four, &BigUint::one()), CompactTarget::MAX);
        let tiny = CompactTarget::new(0x0400_0001).unwrap();
        assert_eq!(scale_target(tiny, &BigUint::one(), &four).expand(), u(1));
    }

    proptest::proptest! {
        #[test]
        fn expand_compress_fixpoint(bits in proptest::num::u32::ANY) {
            if let Ok(c) = CompactTarget::new(bits) {
                let e = c.expand();
                let back = CompactTarget::compress(&e).unwrap();
                proptest::prop_assert_eq!(back.expand(), e);
            }
        }
    }
}
