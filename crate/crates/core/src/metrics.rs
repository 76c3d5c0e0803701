//! Sample-quality metrics computed exactly against a toy world.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{Condition, LocationSet, TokenGrid};
use crate::sampling::Trajectory;
use crate::toyworld::ToyWorld;

/// Mean posterior probability of `c` over the samples.
pub fn alignment_rate(samples: &[TokenGrid], world: &ToyWorld, c: &Condition) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("alignment_rate needs samples".into()));
    }
    let total: f64 = samples.iter().map(|s| world.alignment_score(c, s)).sum::<Result<f64>>()?;
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSummary {
    /// Mean `-ln p_c(x)` in nats per grid; infinite if any sample has zero probability.
    pub mean: f64,
    pub zero_probability: usize,
}

pub fn exact_nll(samples: &[TokenGrid], world: &ToyWorld, c: &Condition) -> Result<NllSummary> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("exact_nll needs samples".into()));
    }
    let mut total = 0.0;
    let mut zero_probability = 0;
    for s in samples {
        let lp = world.log_prob(c, s)?;
        if lp == f64::NEG_INFINITY {
            zero_probability += 1;
        } else {
            total -= lp;
        }
    }
    let mean = if zero_probability > 0 { f64::INFINITY } else { (total / samples.len() as f64).max(0.0) };
    Ok(NllSummary { mean, zero_probability })
}

/// Entropy in nats of the token histogram pooled over `region` and samples.
pub fn diversity_entropy(samples: &[TokenGrid], region: &LocationSet) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::EmptyInput("diversity_entropy needs a non-empty region".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("diversity_entropy needs samples".into()));
    }
    let mut hist: HashMap<u32, usize> = HashMap::new();
    for s in samples {
        for &i in region.iter() {
            *hist.entry(s.get(i)).or_default() += 1;
        }
    }
    let total = (samples.len() * region.len()) as f64;
    let mut counts: Vec<usize> = hist.into_values().collect();
    counts.sort_unstable();
    Ok(counts
        .iter()
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Per location, how many steps dropped a previously kept token.
pub fn resample_count_stats(traj: &Trajectory) -> Vec<usize> {
    traj.drop_counts()
}

/// Mean drop count over the locations of `region`.
pub fn mean_drops(counts: &[usize], region: &LocationSet) -> f64 {
    if region.is_empty() {
        return 0.0;
    }
    region.iter().map(|&i| counts[i] as f64).sum::<f64>() / region.len() as f64
}
