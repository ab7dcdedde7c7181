mod common;

use common::{max_abs_diff, random_scores, segment_ranges};
use drum_core::guidance::{
    fused_weights, guide_class_embeddings, guided_weights, GuidanceConfig, SegmentLabel, SegmentedScores,
};
use drum_core::rng::DrumRng;
use ndarray::s;
use proptest::prelude::*;

fn masses(w: &ndarray::Array2<f64>, scores: &SegmentedScores) -> Vec<(SegmentLabel, Vec<f64>)> {
    segment_ranges(scores)
        .into_iter()
        .zip(&scores.segments)
        .map(|(r, seg)| (seg.label, w.slice(s![.., r]).rows().into_iter().map(|row| row.sum()).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rows_split_mass_between_target_and_references(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut rng = DrumRng::new(seed);
        let q = 1 + rng.below(5);
        let n_refs = 1 + rng.below(4);
        let scores = random_scores(&mut rng, q, n_refs, 5);
        let w = guided_weights(&scores, &GuidanceConfig::new(alpha)).unwrap();
        for row in w.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let mut ref_mass = vec![0.0; q];
        for (label, m) in masses(&w, &scores) {
            if label == SegmentLabel::Target {
                for x in m { prop_assert!((x - (1.0 - alpha)).abs() < 1e-6); }
            } else {
                for (acc, x) in ref_mass.iter_mut().zip(m) { *acc += x; }
            }
        }
        for x in ref_mass { prop_assert!((x - alpha).abs() < 1e-6); }
    }

    #[test]
    fn reference_mass_is_proportional_to_preference(seed in any::<u64>(), alpha in 0.01f64..=1.0) {
        let mut rng = DrumRng::new(seed);
        let scores = random_scores(&mut rng, 3, 3, 4);
        let w = guided_weights(&scores, &GuidanceConfig::new(alpha)).unwrap();
        let total_p: f64 = scores.segments.iter().filter(|s| s.label == SegmentLabel::Reference).map(|s| s.preference).sum();
        for ((label, m), seg) in masses(&w, &scores).into_iter().zip(&scores.segments) {
            if label == SegmentLabel::Reference {
                for x in m { prop_assert!((x - alpha * seg.preference / total_p).abs() < 1e-9); }
            }
        }
    }

    #[test]
    fn preference_scaling_leaves_weights_unchanged(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = DrumRng::new(seed);
        let scores = random_scores(&mut rng, 4, 3, 4);
        let cfg = GuidanceConfig::new(rng.uniform());
        let w = guided_weights(&scores, &cfg).unwrap();
        let mut scaled = scores.clone();
        for seg in &mut scaled.segments { seg.preference *= c; }
        prop_assert!(max_abs_diff(&w, &guided_weights(&scaled, &cfg).unwrap()) < 1e-7);
    }

    #[test]
    fn permuting_segments_permutes_weight_blocks(seed in any::<u64>()) {
        let mut rng = DrumRng::new(seed);
        let scores = random_scores(&mut rng, 3, 4, 3);
        let cfg = GuidanceConfig::new(rng.uniform());
        let w = guided_weights(&scores, &cfg).unwrap();
        let mut order: Vec<usize> = (0..scores.segments.len()).collect();
        rng.shuffle(&mut order);
        let permuted = SegmentedScores { segments: order.iter().map(|&g| scores.segments[g].clone()).collect() };
        let wp = guided_weights(&permuted, &cfg).unwrap();
        let ranges = segment_ranges(&scores);
        let pranges = segment_ranges(&permuted);
        for (new_pos, &g) in order.iter().enumerate() {
            let a = w.slice(s![.., ranges[g].clone()]).to_owned();
            let b = wp.slice(s![.., pranges[new_pos].clone()]).to_owned();
            prop_assert!(max_abs_diff(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn weights_are_affine_in_alpha(seed in any::<u64>()) {
        let mut rng = DrumRng::new(seed);
        let scores = random_scores(&mut rng, 3, 3, 4);
        let w0 = guided_weights(&scores, &GuidanceConfig::new(0.0)).unwrap();
        let w1 = guided_weights(&scores, &GuidanceConfig::new(1.0)).unwrap();
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let wa = guided_weights(&scores, &GuidanceConfig::new(alpha)).unwrap();
            let interp = &w0 * (1.0 - alpha) + &w1 * alpha;
            prop_assert!(max_abs_diff(&wa, &interp) < 1e-12);
        }
    }

    #[test]
    fn fused_rows_sum_to_one(seed in any::<u64>()) {
        let mut rng = DrumRng::new(seed);
        let scores = random_scores(&mut rng, 4, 3, 5);
        for row in fused_weights(&scores).unwrap().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn fused_weights_ignore_alpha_and_preferences() {
    let mut rng = DrumRng::new(4);
    let scores = random_scores(&mut rng, 3, 2, 3);
    let mut other = scores.clone();
    for seg in &mut other.segments {
        seg.preference = 7.0;
    }
    assert_eq!(fused_weights(&scores).unwrap(), fused_weights(&other).unwrap());
}

#[test]
fn identical_reference_segments_get_identical_blocks() {
    let mut rng = DrumRng::new(8);
    let mut scores = random_scores(&mut rng, 3, 2, 3);
    let refs: Vec<usize> = (0..3).filter(|&g| scores.segments[g].label == SegmentLabel::Reference).collect();
    scores.segments[refs[1]] = scores.segments[refs[0]].clone();
    let w = guided_weights(&scores, &GuidanceConfig::new(0.4)).unwrap();
    let r = segment_ranges(&scores);
    let a = w.slice(s![.., r[refs[0]].clone()]).to_owned();
    let b = w.slice(s![.., r[refs[1]].clone()]).to_owned();
    assert_eq!(a, b);
}

#[test]
fn class_blend_matches_formula() {
    let mut rng = DrumRng::new(11);
    let t: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let refs: Vec<(Vec<f64>, f64)> = (0..3).map(|_| ((0..6).map(|_| rng.normal()).collect(), rng.uniform() + 0.1)).collect();
    let mut tagged = vec![(SegmentLabel::Target, 1.0, t.clone())];
    tagged.extend(refs.iter().map(|(v, p)| (SegmentLabel::Reference, *p, v.clone())));
    let alpha = 0.35;
    let got = guide_class_embeddings(&tagged, &GuidanceConfig::new(alpha)).unwrap();
    let total: f64 = refs.iter().map(|(_, p)| p).sum();
    for j in 0..6 {
        let want = (1.0 - alpha) * t[j] + alpha * refs.iter().map(|(v, p)| p / total * v[j]).sum::<f64>();
        assert!((got[j] - want).abs() < 1e-12);
    }
}
