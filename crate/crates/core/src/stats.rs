//! Deterministic reductions.
//!
//! Every sum in the crate goes through these helpers so that results do not
//! depend on how many threads rayon happens to use.

use rayon::prelude::*;

const PAIRWISE_BLOCK: usize = 64;
const PARALLEL_CHUNK: usize = 4096;

/// Pairwise (cascade) summation with a fixed split pattern.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sum of `f(i)` over `0..n`, chunked independently of the thread count.
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(PARALLEL_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * PARALLEL_CHUNK;
            let hi = (lo + PARALLEL_CHUNK).min(n);
            let block: Vec<f64> = (lo..hi).map(&f).collect();
            pairwise_sum(&block)
        })
        .collect();
    pairwise_sum(&partials)
}

/// Dot product with a thread-count independent reduction order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    chunked_sum(a.len(), |i| a[i] * b[i])
}

/// Arithmetic mean computed around a pivot (the first value).
///
/// A constant input returns that constant bit-exactly, and the result is
/// clamped into `[min, max]` of the inputs.
pub fn shifted_mean(values: &[f64]) -> Option<f64> {
    let pivot = *values.first()?;
    let deltas: Vec<f64> = values.iter().map(|v| v - pivot).collect();
    let mean = pivot + pairwise_sum(&deltas) / values.len() as f64;
    let (lo, hi) = min_max(values)?;
    Some(mean.clamp(lo, hi))
}

/// Weighted arithmetic mean `Σ wᵢvᵢ / Σ wᵢ`, pivoted like [`shifted_mean`].
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Option<f64> {
    debug_assert_eq!(values.len(), weights.len());
    let pivot = *values.first()?;
    let num: Vec<f64> = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - pivot))
        .collect();
    let den = pairwise_sum(weights);
    if den <= 0.0 {
        return None;
    }
    let (lo, hi) = min_max(values)?;
    Some((pivot + pairwise_sum(&num) / den).clamp(lo, hi))
}

/// Weighted harmonic mean `Σ wᵢ / Σ (wᵢ/vᵢ)` for strictly positive values.
///
/// Evaluated relative to the first value so that a constant input is
/// returned exactly. Returns `Some(0.0)` when any value is zero.
pub fn weighted_harmonic_mean(values: &[f64], weights: &[f64]) -> Option<f64> {
    debug_assert_eq!(values.len(), weights.len());
    let pivot = *values.first()?;
    if values.contains(&0.0) {
        return Some(0.0);
    }
    let ratios: Vec<f64> = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (pivot / v))
        .collect();
    let den = pairwise_sum(&ratios);
    let num = pairwise_sum(weights);
    if num <= 0.0 {
        return None;
    }
    let (lo, hi) = min_max(values)?;
    Some((pivot * (num / den)).clamp(lo, hi))
}

pub fn min_max(values: &[f64]) -> Option<(f64, f64)> {
    let first = *values.first()?;
    Some(
        values
            .iter()
            .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    )
}
