mod common;

use common::{gaussian_matrix, max_abs_diff, record};
use drum_core::adapter::{
    attention_layer, forward, forward_with_cache, load_checkpoint, save_checkpoint, AdapterConfig, AdapterInput,
    AdapterParams, ConditionSegment, PersonalizationRequest,
};
use drum_core::guidance::{GuidanceConfig, SegmentLabel, SegmentLayout, SegmentSpec};
use drum_core::rng::DrumRng;
use drum_core::store::PromptRecord;
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn random_record(rng: &mut DrumRng, id: &str, max_tokens: usize, d: usize) -> PromptRecord {
    let tokens = 1 + rng.below(max_tokens);
    let cond = gaussian_matrix(rng, tokens, d, 1.0).mapv(|x| x as f32);
    let class: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
    record(id, class.clone(), cond, Some(class), (1 + rng.below(5)) as f32 / 5.0)
}

fn request(rng: &mut DrumRng, d: usize, n_refs: usize, alpha: f64) -> PersonalizationRequest {
    let t_u = 1 + rng.below(5);
    let target = random_record(rng, "u/t0", 5, d);
    let references = (0..n_refs).map(|i| random_record(rng, &format!("u/h{i}"), 5, d)).collect();
    PersonalizationRequest {
        target,
        references,
        guidance: GuidanceConfig::new(alpha),
        uncond: gaussian_matrix(rng, t_u, d, 1.0).mapv(|x| x as f32),
    }
}

fn small_config(rng: &mut DrumRng) -> AdapterConfig {
    let heads = 1 + rng.below(3);
    let head_dim = 1 + rng.below(3);
    let d_model = heads * head_dim;
    let projection = rng.uniform() < 0.5;
    AdapterConfig {
        d_cond: if projection { d_model + 1 + rng.below(4) } else { d_model },
        d_model,
        n_heads: heads,
        n_layers: 1 + rng.below(3),
        projection,
        ln_eps: 1e-5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_shape_follows_uncond(seed in any::<u64>()) {
        let mut rng = DrumRng::new(seed);
        let cfg = small_config(&mut rng);
        let params = AdapterParams::init(cfg, seed).unwrap();
        let n_refs = rng.below(4);
        let alpha = if n_refs == 0 { 0.0 } else { rng.uniform() };
        let req = request(&mut rng, cfg.d_cond, n_refs, alpha);
        let out = forward(&params, &req).unwrap();
        prop_assert_eq!(out.condition.dim(), (req.uncond.nrows(), cfg.d_cond));
        prop_assert_eq!(out.class_embedding.unwrap().len(), cfg.d_cond);
    }

    #[test]
    fn alpha_zero_ignores_references(seed in any::<u64>()) {
        let mut rng = DrumRng::new(seed);
        let cfg = small_config(&mut rng);
        let params = AdapterParams::init(cfg, seed).unwrap();
        let mut req = request(&mut rng, cfg.d_cond, 3, 0.0);
        let with = forward(&params, &req).unwrap().condition;
        req.references.reverse();
        let permuted = forward(&params, &req).unwrap().condition;
        req.references.truncate(1);
        let fewer = forward(&params, &req).unwrap().condition;
        req.references.clear();
        let without = forward(&params, &req).unwrap().condition;
        prop_assert!(max_abs_diff(&with, &without) <= 1e-6);
        prop_assert!(max_abs_diff(&permuted, &without) <= 1e-6);
        prop_assert!(max_abs_diff(&fewer, &without) <= 1e-6);
    }

    #[test]
    fn reference_order_does_not_matter(seed in any::<u64>()) {
        let mut rng = DrumRng::new(seed);
        let cfg = small_config(&mut rng);
        let params = AdapterParams::init(cfg, seed).unwrap();
        let alpha = 0.05 + 0.95 * rng.uniform();
        let mut req = request(&mut rng, cfg.d_cond, 4, alpha);
        let a = forward(&params, &req).unwrap();
        rng.shuffle(&mut req.references);
        let b = forward(&params, &req).unwrap();
        prop_assert!(max_abs_diff(&a.condition, &b.condition) < 1e-10);
        let (ca, cb) = (a.class_embedding.unwrap(), b.class_embedding.unwrap());
        prop_assert!(ca.iter().zip(&cb).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn token_order_within_a_segment_does_not_matter(seed in any::<u64>(), guided in any::<bool>()) {
        let mut rng = DrumRng::new(seed);
        let cfg = small_config(&mut rng);
        let params = AdapterParams::init(cfg, seed).unwrap();
        let mut req = request(&mut rng, cfg.d_cond, 2, 0.5);
        req.guidance.enabled = guided;
        let a = forward(&params, &req).unwrap().condition;
        let seg = &mut req.references[rng.below(2)];
        let mut order: Vec<usize> = (0..seg.condition.nrows()).collect();
        rng.shuffle(&mut order);
        seg.condition = seg.condition.select(Axis(0), &order);
        let b = forward(&params, &req).unwrap().condition;
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = DrumRng::new(3);
    let cfg = AdapterConfig::toy(16);
    let params = AdapterParams::init(cfg, 3).unwrap();
    let req = request(&mut rng, 16, 3, 0.3);
    assert_eq!(forward(&params, &req).unwrap(), forward(&params, &req).unwrap());
}

#[test]
fn single_token_layer_with_identity_projections_adds_value_to_query() {
    let d = 4;
    let cfg = AdapterConfig { d_cond: d, d_model: d, n_heads: 2, n_layers: 1, projection: false, ln_eps: 1e-5 };
    let mut params = AdapterParams::zeros(cfg).unwrap();
    let layout = params.layout().clone();
    let l = &layout.layers[0];
    let eye = Array2::<f64>::eye(d);
    {
        let data = params.as_mut_slice();
        for slot in [&l.query.weight, &l.key.weight, &l.value.weight, &l.output.weight] {
            data[slot.range()].copy_from_slice(eye.as_slice().unwrap());
        }
        for x in &mut data[l.ln_gamma.range()] {
            *x = 1.0;
        }
    }
    let queries = Array2::from_shape_vec((2, d), vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -3.0, 0.25]).unwrap();
    let value = Array2::from_shape_vec((1, d), vec![3.0, 1.0, -2.0, 0.5]).unwrap();
    let layout = SegmentLayout::new(vec![SegmentSpec { label: SegmentLabel::Target, preference: 1.0, tokens: 1 }]).unwrap();
    let out = attention_layer(&params, 0, queries.view(), value.view(), &layout, &GuidanceConfig::new(0.0)).unwrap();
    let want = &queries + &value;
    assert!(max_abs_diff(&out, &want) < 1e-12);
}

#[test]
fn per_head_weights_are_guided() {
    let mut rng = DrumRng::new(21);
    let cfg = AdapterConfig::toy(8);
    let params = AdapterParams::init(cfg, 1).unwrap();
    let input = AdapterInput {
        queries: gaussian_matrix(&mut rng, 3, 8, 1.0),
        segments: vec![
            ConditionSegment { label: SegmentLabel::Reference, preference: 1.0, condition: gaussian_matrix(&mut rng, 2, 8, 1.0) },
            ConditionSegment { label: SegmentLabel::Reference, preference: 3.0, condition: gaussian_matrix(&mut rng, 3, 8, 1.0) },
            ConditionSegment { label: SegmentLabel::Target, preference: 1.0, condition: gaussian_matrix(&mut rng, 4, 8, 1.0) },
        ],
        guidance: GuidanceConfig::new(0.4),
    };
    for layer in 0..cfg.n_layers {
        for w in drum_core::adapter::attention_weights(&params, &input, layer).unwrap() {
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!((row.slice(ndarray::s![0..2]).sum() - 0.1).abs() < 1e-12);
                assert!((row.slice(ndarray::s![2..5]).sum() - 0.3).abs() < 1e-12);
                assert!((row.slice(ndarray::s![5..9]).sum() - 0.6).abs() < 1e-12);
            }
        }
    }
    let (_, cache) = forward_with_cache(&params, &input).unwrap();
    let mass = cache.last_layer_segment_mass();
    assert!((mass[0] - 0.1).abs() < 1e-12 && (mass[2] - 0.6).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_preserves_outputs_to_f32_precision() {
    let mut rng = DrumRng::new(5);
    let cfg = AdapterConfig::full(16, 2, 4);
    let params = AdapterParams::init(cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &params, 12, 5).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!((ck.step, ck.seed), (12, 5));
    assert_eq!(*ck.params.config(), cfg);
    let req = request(&mut rng, 16, 2, 0.3);
    let a = forward(&params, &req).unwrap().condition;
    let b = forward(&ck.params, &req).unwrap().condition;
    assert!(max_abs_diff(&a, &b) < 1e-4);
    save_checkpoint(dir.path(), &ck.params, 12, 5).unwrap();
    assert_eq!(load_checkpoint(dir.path()).unwrap().params, ck.params);
}

#[test]
fn mismatched_widths_are_rejected() {
    let mut rng = DrumRng::new(6);
    let params = AdapterParams::init(AdapterConfig::toy(8), 0).unwrap();
    let req = request(&mut rng, 6, 1, 0.3);
    assert_eq!(forward(&params, &req).unwrap_err().category(), "dimension");
}
