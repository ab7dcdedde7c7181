//! Seeded synthetic corpora.
//!
//! Generation procedure, all draws from one [`DrumRng`] in this order:
//!
//! 1. `archetypes` similarity directions, standard normal in `d_sim`, then
//!    Gram–Schmidt orthonormalized (plain normalization once `archetypes`
//!    exceeds `d_sim`).
//! 2. `archetypes` condition directions and `max_tokens` positional vectors,
//!    standard normal in `d_cond`, and one shared "empty prompt" vector at
//!    half scale. `uncond[t] = pos[t] + empty`.
//! 3. Per user `u`: dominant archetype `u % archetypes`. Each of the
//!    `history_len` records picks the dominant archetype with probability
//!    `dominant_share`, otherwise a uniformly chosen other archetype, and a
//!    preference from `{1..5}/5`. One target record follows, drawn from the
//!    next archetype `(dominant + 1) % archetypes` with preference 1.
//! 4. A record of archetype `a` gets
//!    `sim = normalize(A[a] + noise * z)` with `z ~ N(0, I/d_sim)` and
//!    `condition[t] = pos[t] + B[a] + noise * (g + e_t)` with per-record `g`
//!    and per-token `e_t` standard normal. Every record has `max_tokens`
//!    tokens. When `d_sim == d_cond` the class embedding equals `sim`.
//!
//! All values are rounded to `f32` at generation, so a save/load cycle is
//! lossless.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EmbeddingCorpus, PromptRecord, Provenance};
use crate::error::{DrumError, Result};
use crate::rng::DrumRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub history_len: usize,
    pub d_sim: usize,
    pub d_cond: usize,
    pub max_tokens: usize,
    pub archetypes: usize,
    pub seed: u64,
    pub noise: f64,
    pub dominant_share: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 8,
            history_len: 50,
            d_sim: 64,
            d_cond: 64,
            max_tokens: 8,
            archetypes: 2,
            seed: 0,
            noise: 0.3,
            dominant_share: 0.75,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut DrumRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingCorpus> {
    let sizes = [
        ("n_users", spec.n_users),
        ("history_len", spec.history_len),
        ("d_sim", spec.d_sim),
        ("d_cond", spec.d_cond),
        ("max_tokens", spec.max_tokens),
        ("archetypes", spec.archetypes),
    ];
    if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
        return Err(DrumError::Range(format!("{name} must be at least 1")));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(DrumError::Range(format!("noise {} must be finite and >= 0", spec.noise)));
    }
    if !(0.0..=1.0).contains(&spec.dominant_share) {
        return Err(DrumError::Range(format!(
            "dominant_share {} must lie in [0, 1]",
            spec.dominant_share
        )));
    }

    let mut rng = DrumRng::new(spec.seed);
    let (d_sim, d_cond, tmax) = (spec.d_sim, spec.d_cond, spec.max_tokens);

    let mut sim_dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.archetypes);
    for _ in 0..spec.archetypes {
        let mut v = gaussian(&mut rng, d_sim, 1.0);
        if sim_dirs.len() < d_sim {
            for u in &sim_dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        normalize(&mut v);
        sim_dirs.push(v);
    }
    let cond_dirs: Vec<Vec<f64>> = (0..spec.archetypes)
        .map(|_| gaussian(&mut rng, d_cond, 1.0))
        .collect();
    let pos: Vec<Vec<f64>> = (0..tmax).map(|_| gaussian(&mut rng, d_cond, 1.0)).collect();
    let empty = gaussian(&mut rng, d_cond, 0.5);
    let uncond = Array2::from_shape_fn((tmax, d_cond), |(t, j)| (pos[t][j] + empty[j]) as f32);

    let sim_noise = spec.noise / (d_sim as f64).sqrt();
    let make_record = |rng: &mut DrumRng, id: String, arch: usize, preference: f32| {
        let z = gaussian(rng, d_sim, sim_noise);
        let mut sim: Vec<f64> = sim_dirs[arch].iter().zip(&z).map(|(a, b)| a + b).collect();
        normalize(&mut sim);
        let g = gaussian(rng, d_cond, spec.noise);
        let mut condition = Array2::<f32>::zeros((tmax, d_cond));
        for t in 0..tmax {
            for j in 0..d_cond {
                let e = spec.noise * rng.normal();
                condition[[t, j]] = (pos[t][j] + cond_dirs[arch][j] + g[j] + e) as f32;
            }
        }
        let sim = to_f32(&sim);
        PromptRecord {
            id,
            text: None,
            class_embedding: (d_sim == d_cond).then(|| sim.clone()),
            sim_embedding: sim,
            condition,
            preference,
        }
    };

    let mut records = Vec::with_capacity(spec.n_users * (spec.history_len + 1));
    for u in 0..spec.n_users {
        let dominant = u % spec.archetypes;
        for h in 0..spec.history_len {
            let arch = if spec.archetypes == 1 || rng.uniform() < spec.dominant_share {
                dominant
            } else {
                let other = rng.below(spec.archetypes - 1);
                if other >= dominant {
                    other + 1
                } else {
                    other
                }
            };
            let preference = (1 + rng.below(5)) as f32 / 5.0;
            records.push(make_record(&mut rng, format!("u{u:04}/h{h:04}"), arch, preference));
        }
        let arch = (dominant + 1) % spec.archetypes;
        records.push(make_record(&mut rng, format!("u{u:04}/t0000"), arch, 1.0));
    }

    let mut extras = BTreeMap::new();
    extras.insert("tool".to_string(), "drum gen-synthetic".to_string());
    extras.insert("version".to_string(), env!("CARGO_PKG_VERSION").to_string());
    extras.insert("rng".to_string(), "chacha8".to_string());
    extras.insert("synthetic_spec".to_string(), serde_json::to_string(spec)?);

    let corpus = EmbeddingCorpus {
        records,
        d_sim,
        d_cond,
        max_tokens: tmax,
        uncond,
        manifest: Provenance {
            encoder: "synthetic".to_string(),
            extras,
        },
    };
    corpus.validate()?;
    Ok(corpus)
}
