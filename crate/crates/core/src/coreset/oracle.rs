//! Reference re-implementation of the greedy coreset sampler.
//!
//! Deliberately naive: every similarity is recomputed from raw components
//! with explicit loops, and nothing is shared with the production path
//! except the seeded random stream itself. Arithmetic is written in the same
//! operation order as the production path so the two agree bit for bit.

use crate::coreset::{CoresetConfig, UserProfile};
use crate::error::{DrumError, Result};
use crate::rng::DrumRng;
use crate::store::EmbeddingCorpus;

pub fn oracle_coreset(corpus: &EmbeddingCorpus, cfg: &CoresetConfig) -> Result<UserProfile> {
    let n_records = corpus.records.len();
    if n_records == 0 || cfg.sample_size < 1 || cfg.sample_size > n_records {
        return Err(DrumError::Range(format!(
            "sample size {} outside 1..={n_records}",
            cfg.sample_size
        )));
    }
    if cfg.approx_size < 1 || cfg.approx_size > n_records {
        return Err(DrumError::Range(format!(
            "approximate size {} outside 1..={n_records}",
            cfg.approx_size
        )));
    }

    let mut e: Vec<Vec<f64>> = Vec::new();
    for r in &corpus.records {
        let mut v = Vec::new();
        for x in &r.sim_embedding {
            v.push(*x as f64);
        }
        e.push(v);
    }
    let mut p: Vec<f64> = Vec::new();
    for r in &corpus.records {
        p.push(if cfg.use_preferences { r.preference as f64 } else { 1.0 });
    }

    let length = |v: &Vec<f64>| {
        let mut s = 0.0;
        for x in v {
            s += x * x;
        }
        s.sqrt()
    };
    for (i, v) in e.iter().enumerate() {
        if length(v) == 0.0 {
            return Err(DrumError::Degenerate(format!("record {i} has zero norm")));
        }
    }
    let similarity = |a: usize, b: usize| {
        let mut d = 0.0;
        for j in 0..e[a].len() {
            d += e[a][j] * e[b][j];
        }
        d / (length(&e[a]) * length(&e[b])) * p[b]
    };

    // Fisher-Yates from the back, j = u64 mod (i + 1); keep the first k.
    let mut rng = DrumRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..n_records).collect();
    let mut i = n_records;
    while i > 1 {
        i -= 1;
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let chosen = &order[..cfg.approx_size];

    let mut distances = vec![0.0; n_records];
    for (b, slot) in distances.iter_mut().enumerate() {
        let mut total = 0.0;
        for &a in chosen {
            total += similarity(a, b);
        }
        *slot = total / cfg.approx_size as f64;
    }

    let mut picked: Vec<usize> = Vec::new();
    while picked.len() < cfg.sample_size {
        let mut s = 0;
        for b in 1..n_records {
            if distances[b] > distances[s] {
                s = b;
            }
        }
        picked.push(s);
        for b in 0..n_records {
            let v = similarity(s, b);
            distances[b] = if v < distances[b] { v } else { distances[b] };
        }
        distances[s] = f64::NEG_INFINITY;
    }

    let mut ids = Vec::new();
    for &s in &picked {
        ids.push(corpus.records[s].id.clone());
    }
    Ok(UserProfile {
        indices: picked,
        source_ids: ids,
    })
}
