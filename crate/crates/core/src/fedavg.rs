//! Sample-weighted federated averaging.
//!
//! `global[i] = Σ_m n_m · ω_m[i] / Σ_m n_m`, accumulated in input order with
//! a single division at the end. Counts are first reduced by their gcd so the
//! floating-point weights depend only on the count ratios: multiplying every
//! count by a common factor yields a bit-identical aggregate, and a single
//! update comes back unchanged.

use num_integer::Integer;
use thiserror::Error;

use crate::params::{ModelUpdate, ParameterVector};

/// Componentwise tolerance used when a node re-derives a block's aggregate.
pub const AGGREGATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("update {index} has dimension {actual}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("update {index} has a zero sample count")]
    ZeroSamples { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub params: ParameterVector,
    pub total_samples: u64,
    pub contributor_count: usize,
}

fn check(updates: &[ModelUpdate]) -> Result<usize, AggregateError> {
    let first = updates.first().ok_or(AggregateError::Empty)?;
    let dim = first.params.dim();
    for (index, u) in updates.iter().enumerate() {
        if u.sample_count == 0 {
            return Err(AggregateError::ZeroSamples { index });
        }
        if u.params.dim() != dim {
            return Err(AggregateError::DimensionMismatch {
                index,
                expected: dim,
                actual: u.params.dim(),
            });
        }
    }
    Ok(dim)
}

pub fn aggregate(updates: &[ModelUpdate]) -> Result<AggregateResult, AggregateError> {
    let dim = check(updates)?;
    let divisor = updates.iter().fold(0u64, |g, u| g.gcd(&u.sample_count));
    let weights: Vec<f64> = updates.iter().map(|u| (u.sample_count / divisor) as f64).collect();
    let reduced_total: u128 = updates.iter().map(|u| u128::from(u.sample_count / divisor)).sum();
    let reduced_total = reduced_total as f64;

    let mut out = vec![0.0; dim];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (u, &w) in updates.iter().zip(&weights) {
            let v = u.params.as_slice()[i];
            acc += w * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        // Rounding can push the mean a few ulps outside the inputs' range.
        *slot = (acc / reduced_total).clamp(lo, hi);
    }

    let total_samples = updates.iter().map(|u| u.sample_count).sum();
    Ok(AggregateResult {
        params: ParameterVector::new(out).expect("convex combination of finite values"),
        total_samples,
        contributor_count: updates.len(),
    })
}

/// True iff `claimed` is within `tol` of the recomputed aggregate in every
/// component. NaN anywhere in `claimed` is always a mismatch.
pub fn aggregate_matches(updates: &[ModelUpdate], claimed: &[f64], tol: f64) -> Result<bool, AggregateError> {
    let result = aggregate(updates)?;
    if claimed.len() != result.params.dim() {
        return Ok(false);
    }
    Ok(result
        .params
        .as_slice()
        .iter()
        .zip(claimed)
        .all(|(a, b)| (a - b).abs() <= tol))
}
