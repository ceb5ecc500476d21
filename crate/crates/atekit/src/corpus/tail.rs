//! Heavy-tail diagnostics: Hill exponent estimate and Gini share curve.

use super::{CorpusError, TailReport};

const MIN_POSITIVE_SAMPLES: usize = 10;

/// Hill estimate of the tail exponent using the top `cutoff_fraction` of the
/// strictly positive samples.
///
/// With k = ⌊cutoff · n⌋ and descending order statistics y₍₁₎ ≥ … ≥ y₍ₙ₎ the
/// raw Hill estimate is α̂ = k / Σ_{j≤k} ln(y₍ⱼ₎ / y₍ₖ₊₁₎); the reported
/// density exponent is η̂ = α̂ + 1.
pub fn hill_estimate(samples: &[f64], cutoff_fraction: f64) -> Result<TailReport, CorpusError> {
    if !(cutoff_fraction > 0.0 && cutoff_fraction <= 0.5) {
        return Err(CorpusError::InvalidCutoff(cutoff_fraction));
    }
    let positive = positive_descending(samples, MIN_POSITIVE_SAMPLES)?;
    let k = (cutoff_fraction * positive.len() as f64).floor() as usize;
    hill_from_sorted(&positive, k)
}

/// Hill estimate with an explicit order-statistic count `k`; needs at least
/// `k + 1` strictly positive samples.
pub fn hill_estimate_with_k(samples: &[f64], k: usize) -> Result<TailReport, CorpusError> {
    let positive = positive_descending(samples, k + 1)?;
    hill_from_sorted(&positive, k)
}

fn positive_descending(samples: &[f64], min_required: usize) -> Result<Vec<f64>, CorpusError> {
    let mut positive: Vec<f64> = samples.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.len() < min_required {
        return Err(CorpusError::TooFewPositive {
            needed: min_required,
            got: positive.len(),
        });
    }
    positive.sort_by(|a, b| b.partial_cmp(a).expect("positive finite values"));
    Ok(positive)
}

fn hill_from_sorted(descending: &[f64], k: usize) -> Result<TailReport, CorpusError> {
    if k < 2 {
        return Err(CorpusError::TailTooShort(k));
    }
    let reference = descending[k];
    let log_sum: f64 = descending[..k].iter().map(|v| (v / reference).ln()).sum();
    if log_sum <= 0.0 {
        return Err(CorpusError::DegenerateTail);
    }
    let alpha_hat = k as f64 / log_sum;
    Ok(TailReport {
        cutoff_fraction: k as f64 / descending.len() as f64,
        eta_hat: alpha_hat + 1.0,
        alpha_hat,
        n_tail: k,
    })
}

/// Cumulative value-share curve over a uniform population-share grid.
///
/// Samples are sorted descending; the point at population share q is the sum
/// of the top ⌈q·n⌉ samples over the total. The curve is nondecreasing and
/// runs from (0, 0) to (1, 1).
pub fn gini_curve(samples: &[f64], n_points: usize) -> Result<Vec<(f64, f64)>, CorpusError> {
    if n_points < 2 {
        return Err(CorpusError::TooFewGridPoints(n_points));
    }
    if let Some(&bad) = samples.iter().find(|&&v| v < 0.0) {
        return Err(CorpusError::NegativeSample(bad));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) {
        return Err(CorpusError::AllZeroSamples);
    }

    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in &sorted {
        acc += v;
        prefix.push(acc);
    }

    let n = sorted.len() as f64;
    let curve = (0..n_points)
        .map(|j| {
            let q = j as f64 / (n_points - 1) as f64;
            let top = ((q * n).ceil() as usize).min(sorted.len());
            (q, prefix[top] / total)
        })
        .collect();
    Ok(curve)
}
