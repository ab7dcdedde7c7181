mod common;

use drum_core::adapter::{forward, token_cosine, AdapterConfig, AdapterParams, PersonalizationRequest};
use drum_core::eval::{
    evaluate, improvement, run_ablation, run_alpha_sweep, run_sampling_sweep, text_align, EvalConfig, SamplingMethod,
};
use drum_core::guidance::GuidanceConfig;
use drum_core::rng::DrumRng;
use drum_core::store::{gen_synthetic, EmbeddingCorpus, SyntheticSpec};
use drum_core::trainer::{train, TrainConfig};
use proptest::prelude::*;

fn naive_text_align(e: &[f64], refs: &[(Vec<f64>, f64)]) -> f64 {
    let mut total = 0.0;
    for (r, p) in refs {
        let (mut dot, mut ee, mut rr) = (0.0, 0.0, 0.0);
        for (x, y) in e.iter().zip(r) {
            dot += x * y;
            ee += x * x;
            rr += y * y;
        }
        total += p * dot / (ee.sqrt() * rr.sqrt());
    }
    total / refs.len() as f64
}

proptest! {
    #[test]
    fn text_align_matches_naive_loop(seed in any::<u64>()) {
        let mut rng = DrumRng::new(seed);
        let d = 1 + rng.below(10);
        let e: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = 1 + rng.below(8);
        let refs: Vec<(Vec<f64>, f64)> = (0..n).map(|_| ((0..d).map(|_| rng.normal()).collect(), rng.uniform())).collect();
        prop_assert!((text_align(&e, &refs).unwrap() - naive_text_align(&e, &refs)).abs() < 1e-12);
    }
}

fn corpus(seed: u64) -> EmbeddingCorpus {
    gen_synthetic(&SyntheticSpec {
        n_users: 4,
        history_len: 20,
        d_sim: 16,
        d_cond: 16,
        max_tokens: 4,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn params() -> AdapterParams {
    AdapterParams::init(AdapterConfig { n_layers: 2, ..AdapterConfig::toy(16) }, 3).unwrap()
}

#[test]
fn improvement_of_baseline_over_itself_is_zero() {
    for b in [0.3, -0.2, 1e-9] {
        assert_eq!(improvement(b, b), Some(0.0));
    }
}

#[test]
fn sampling_sweep_has_one_row_per_method_and_ratio() {
    let (c, p) = (corpus(1), params());
    let base = EvalConfig::new("s", 0.3, SamplingMethod::Coreset, 0.1, 2);
    let methods = [SamplingMethod::Coreset, SamplingMethod::Random, SamplingMethod::Uniform];
    let reports = run_sampling_sweep(&c, &p, &base, &methods, &[0.1, 0.5, 1.0]).unwrap();
    assert_eq!(reports.len(), 9);
    let full: Vec<_> = reports.iter().filter(|r| r.config.ratio == 1.0).collect();
    for r in &full[1..] {
        assert_eq!(r.users, full[0].users);
    }
    assert!(run_sampling_sweep(&c, &p, &base, &methods, &[0.0]).is_err());
}

#[test]
fn reports_are_deterministic_per_seed() {
    let (c, p) = (corpus(2), params());
    let cfg = EvalConfig::new("d", 0.3, SamplingMethod::Random, 0.2, 5);
    let a = serde_json::to_string(&evaluate(&c, &p, &cfg, None).unwrap()).unwrap();
    let b = serde_json::to_string(&evaluate(&c, &p, &cfg, None).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablation_rows_and_their_identities() {
    let (c, p) = (corpus(3), params());
    let rows = run_ablation(&c, &p, &EvalConfig::new("a", 0.3, SamplingMethod::Coreset, 1.0, 0)).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.config.label.as_str()).collect();
    assert_eq!(labels, ["full", "w/o S", "w/o G", "w/o S&G"]);
    // At ratio 1 the coreset is the whole history.
    assert_eq!(rows[0].users, rows[1].users);
    assert_eq!(rows[2].users, rows[3].users);

    // Without guidance alpha has no effect.
    let other = run_ablation(&c, &p, &EvalConfig::new("a", 0.9, SamplingMethod::Coreset, 1.0, 0)).unwrap();
    assert_eq!(rows[2].users, other[2].users);
    assert_ne!(rows[0].users, other[0].users);
}

#[test]
fn alpha_sweep_rows_and_monotone_aligns() {
    let c = corpus(4);
    let p = params();
    let g = &c.users()[0];
    let target = c.records[g.targets[0]].clone();
    let refs: Vec<_> = g.history[..3].iter().map(|&i| c.records[i].clone()).collect();
    let rows = run_alpha_sweep(&target, &refs, &c.uncond, &p, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    assert_eq!(rows.len(), 5);
    let ta: Vec<f64> = rows.iter().map(|r| r.target_align.unwrap()).collect();
    let ra: Vec<f64> = rows.iter().map(|r| r.reference_align.unwrap()).collect();
    assert!(ta.iter().all(|&x| x <= ta[0]));
    assert!(ra.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{ra:?}");
}

/// With an adapter trained on reconstruction, moving alpha towards one pulls
/// the personalized condition towards the reference condition.
#[test]
fn trained_adapter_moves_towards_the_reference_as_alpha_grows() {
    let c = corpus(5);
    let init = AdapterParams::init(AdapterConfig { n_layers: 2, ..AdapterConfig::toy(16) }, 1).unwrap();
    let cfg = TrainConfig { total_steps: 400, batch_size: 8, seed: 1, ..TrainConfig::toy() };
    let (p, report) = train(&c, &init, &cfg).unwrap();
    assert!(report.final_train_cosine > 0.95, "{}", report.final_train_cosine);

    let g = &c.users()[1];
    let a = c.records[g.targets[0]].clone();
    let b = c.records[g.history[0]].clone();
    let b_cond = b.condition_f64();
    let mut last = f64::NEG_INFINITY;
    for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let req = PersonalizationRequest {
            target: a.clone(),
            references: vec![b.clone()],
            guidance: GuidanceConfig::new(alpha),
            uncond: c.uncond.clone(),
        };
        let cos = token_cosine(&forward(&p, &req).unwrap().condition, &b_cond).unwrap();
        assert!(cos >= last, "alpha {alpha}: {cos} < {last}");
        last = cos;
    }
}
