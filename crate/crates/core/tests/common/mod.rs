#![allow(dead_code)]

use std::collections::BTreeMap;

use drum_core::guidance::{Segment, SegmentLabel, SegmentedScores};
use drum_core::rng::DrumRng;
use drum_core::store::{EmbeddingCorpus, PromptRecord, Provenance};
use ndarray::Array2;

pub fn gaussian_matrix(rng: &mut DrumRng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.normal())
}

pub fn gaussian_vec(rng: &mut DrumRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

pub fn record(id: &str, sim: Vec<f32>, condition: Array2<f32>, class: Option<Vec<f32>>, p: f32) -> PromptRecord {
    PromptRecord {
        id: id.to_string(),
        text: None,
        sim_embedding: sim,
        condition,
        class_embedding: class,
        preference: p,
    }
}

/// Corpus with the given similarity embeddings and preferences; conditions
/// are a single zero-free token.
pub fn sim_corpus(embs: &[Vec<f32>], prefs: &[f32]) -> EmbeddingCorpus {
    let d_sim = embs.first().map_or(1, |e| e.len());
    EmbeddingCorpus {
        records: embs
            .iter()
            .zip(prefs)
            .enumerate()
            .map(|(i, (e, &p))| record(&format!("r{i}"), e.clone(), Array2::ones((1, 2)), None, p))
            .collect(),
        d_sim,
        d_cond: 2,
        max_tokens: 1,
        uncond: Array2::ones((1, 2)),
        manifest: Provenance {
            encoder: "test".into(),
            extras: BTreeMap::new(),
        },
    }
}

/// `n` random embeddings in `d` dimensions with preferences in `(0, 1]`.
pub fn random_sim_corpus(rng: &mut DrumRng, n: usize, d: usize) -> EmbeddingCorpus {
    let embs: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.normal() as f32).collect()).collect();
    let prefs: Vec<f32> = (0..n).map(|_| (1 + rng.below(5)) as f32 / 5.0).collect();
    sim_corpus(&embs, &prefs)
}

/// Random scores with one target segment at position `target_pos` among
/// `n_refs` references.
pub fn random_scores(rng: &mut DrumRng, q: usize, n_refs: usize, max_tokens: usize) -> SegmentedScores {
    let target_pos = rng.below(n_refs + 1);
    let mut segments = Vec::with_capacity(n_refs + 1);
    for g in 0..=n_refs {
        let t = 1 + rng.below(max_tokens);
        let label = if g == target_pos { SegmentLabel::Target } else { SegmentLabel::Reference };
        segments.push(Segment {
            label,
            preference: if label == SegmentLabel::Target { 1.0 } else { 0.05 + rng.uniform() * 3.0 },
            scores: gaussian_matrix(rng, q, t, 3.0),
        });
    }
    SegmentedScores { segments }
}

/// Column ranges of each segment in the concatenated axis.
pub fn segment_ranges(scores: &SegmentedScores) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    scores
        .segments
        .iter()
        .map(|s| {
            let r = start..start + s.scores.ncols();
            start = r.end;
            r
        })
        .collect()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
