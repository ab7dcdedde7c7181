//! User profiling by greedy coreset selection over preference-weighted CLIP
//! similarities.
//!
//! The sampler follows the iterative greedy scheme literally: it initializes
//! a score vector `D` with the mean similarity of every record to a seeded
//! random subset of size `k`, then repeatedly takes `argmax D`, folds the
//! chosen record's similarity row in with an elementwise minimum and masks
//! the chosen entry with `-inf`.
//!
//! Note that the initial score is an *average similarity* while the update
//! is an elementwise *minimum of similarities*. Because similarities (not
//! distances) are minimized, records close to an already selected one keep
//! their score, so the procedure is mode-seeking: it favours dense,
//! high-preference regions of the history rather than spreading out like a
//! k-center cover. This is implemented exactly as stated, not "fixed".

pub mod oracle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrumError, Result};
use crate::rng::DrumRng;
use crate::store::EmbeddingCorpus;

/// Below this many records the score rows are computed sequentially.
const PAR_THRESHOLD: usize = 2048;

/// Preference-weighted cosine similarity `(e . r) / (|e| |r|) * p`.
pub fn sim_clip(e: &[f64], r: &[f64], p: f64) -> Result<f64> {
    if e.len() != r.len() {
        return Err(DrumError::Dimension(format!(
            "similarity between vectors of length {} and {}",
            e.len(),
            r.len()
        )));
    }
    if !(p >= 0.0 && p.is_finite()) {
        return Err(DrumError::Range(format!("preference {p} must be finite and >= 0")));
    }
    let ne = norm(e);
    let nr = norm(r);
    if ne == 0.0 || nr == 0.0 {
        return Err(DrumError::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok(dot(e, r) / (ne * nr) * p)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoresetConfig {
    /// Number of records to select (`n`).
    pub sample_size: usize,
    /// Size of the random subset used to approximate the mean similarity (`k`).
    pub approx_size: usize,
    pub seed: u64,
    /// When false every preference is treated as 1.
    pub use_preferences: bool,
}

impl CoresetConfig {
    /// Config for a sampling ratio: `n = ceil(ratio * N)`, `k = N`.
    pub fn from_ratio(ratio: f64, n_records: usize, seed: u64) -> Result<Self> {
        let n = sample_count(ratio, n_records)?;
        Ok(Self {
            sample_size: n,
            approx_size: n_records,
            seed,
            use_preferences: true,
        })
    }

    pub fn validate(&self, n_records: usize) -> Result<()> {
        if n_records == 0 {
            return Err(DrumError::Range("cannot sample from an empty corpus".into()));
        }
        if self.sample_size == 0 || self.sample_size > n_records {
            return Err(DrumError::Range(format!(
                "sample size {} outside 1..={n_records}",
                self.sample_size
            )));
        }
        if self.approx_size == 0 || self.approx_size > n_records {
            return Err(DrumError::Range(format!(
                "approximate size {} outside 1..={n_records}",
                self.approx_size
            )));
        }
        Ok(())
    }
}

/// `ceil(ratio * n)`, with a small guard against products like `0.1 * 30`
/// landing just above an integer.
pub fn sample_count(ratio: f64, n_records: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DrumError::Range(format!("sampling ratio {ratio} outside (0, 1]")));
    }
    let n = (ratio * n_records as f64 - 1e-9).ceil().max(0.0) as usize;
    if n == 0 {
        return Err(DrumError::Range(format!(
            "ratio {ratio} selects no records out of {n_records}"
        )));
    }
    Ok(n.min(n_records))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub indices: Vec<usize>,
    pub source_ids: Vec<String>,
}

/// Greedy coreset selection over every record of `corpus`.
pub fn coreset_sample(corpus: &EmbeddingCorpus, cfg: &CoresetConfig) -> Result<UserProfile> {
    let n_records = corpus.len();
    cfg.validate(n_records)?;

    let embeddings: Vec<Vec<f64>> = corpus.records.iter().map(|r| r.sim_f64()).collect();
    let norms: Vec<f64> = embeddings.iter().map(|e| norm(e)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(DrumError::Degenerate(format!(
            "record {:?} has a zero-norm similarity embedding",
            corpus.records[i].id
        )));
    }
    let prefs: Vec<f64> = if cfg.use_preferences {
        corpus.preferences()
    } else {
        vec![1.0; n_records]
    };

    let sim = |a: usize, i: usize| dot(&embeddings[a], &embeddings[i]) / (norms[a] * norms[i]) * prefs[i];

    let subset = DrumRng::new(cfg.seed).subset(n_records, cfg.approx_size);
    let k = cfg.approx_size as f64;
    let init = |i: usize| subset.iter().map(|&a| sim(a, i)).sum::<f64>() / k;
    let mut scores: Vec<f64> = if n_records >= PAR_THRESHOLD {
        (0..n_records).into_par_iter().map(init).collect()
    } else {
        (0..n_records).map(init).collect()
    };

    let mut indices = Vec::with_capacity(cfg.sample_size);
    for _ in 0..cfg.sample_size {
        let s = argmax_lowest(&scores);
        indices.push(s);
        let fold = |(i, d): (usize, &mut f64)| {
            let v = sim(s, i);
            if v < *d {
                *d = v;
            }
        };
        if n_records >= PAR_THRESHOLD {
            scores.par_iter_mut().enumerate().for_each(fold);
        } else {
            scores.iter_mut().enumerate().for_each(fold);
        }
        scores[s] = f64::NEG_INFINITY;
    }

    let source_ids = indices.iter().map(|&i| corpus.records[i].id.clone()).collect();
    Ok(UserProfile { indices, source_ids })
}

/// Index of the maximum; the lowest index wins ties.
fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
