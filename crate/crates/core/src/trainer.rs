//! Reconstruction training of the adapter.
//!
//! Each training record is fed as the only key/value segment, with the
//! corpus' unconditional embedding (truncated or tiled to the record's token
//! count) as queries. The loss is one minus the token-mean cosine between
//! the adapter output and the record's condition. Guidance is off and no
//! references are present during training.
//!
//! Per-sample gradients may be evaluated in parallel; they are always summed
//! in sample order, so results do not depend on the worker count.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{backward, forward_with_cache, AdapterInput, AdapterParams, ConditionSegment};
use crate::error::{DrumError, Result};
use crate::guidance::{GuidanceConfig, SegmentLabel};
use crate::rng::DrumRng;
use crate::store::EmbeddingCorpus;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    /// Floor of the cosine schedule; `lr_init / 100` when unset.
    pub lr_floor: Option<f64>,
    pub total_steps: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Run a sampled finite-difference gradient check before training.
    pub grad_check: bool,
    /// Records held out of training (seeded choice) for the held-out score.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Full-scale recipe: batch 256, lr 5e-4, 23K steps.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 256,
            lr_init: 5e-4,
            total_steps: 23_000,
            ..Self::toy()
        }
    }

    /// Desk-scale defaults.
    pub fn toy() -> Self {
        Self {
            batch_size: 16,
            lr_init: 2e-3,
            lr_floor: None,
            total_steps: 2000,
            optimizer: AdamWConfig::default(),
            seed: 0,
            grad_check: false,
            holdout: 0,
        }
    }

    pub fn floor(&self) -> f64 {
        self.lr_floor.unwrap_or(self.lr_init / 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(DrumError::Range("batch_size and total_steps must be positive".into()));
        }
        if !(self.lr_init >= 0.0 && self.lr_init.is_finite()) || !(self.floor() >= 0.0) {
            return Err(DrumError::Range(format!(
                "learning rates must be finite and >= 0 (init {}, floor {})",
                self.lr_init,
                self.floor()
            )));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(DrumError::Range(format!("invalid AdamW moments {o:?}")));
        }
        if !(0.0..1.0).contains(&o.weight_decay) {
            return Err(DrumError::Range(format!("weight decay {} outside [0, 1)", o.weight_decay)));
        }
        Ok(())
    }

    /// Cosine annealing from `lr_init` at step 0 towards the floor at
    /// `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let floor = self.floor();
        let progress = step as f64 / self.total_steps as f64;
        floor + 0.5 * (self.lr_init - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss at every step, recorded before that step's update.
    pub losses: Vec<f64>,
    pub final_train_cosine: f64,
    pub final_holdout_cosine: Option<f64>,
    pub grad_check_error: Option<f64>,
    pub train_records: usize,
    pub steps: usize,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

/// `1 - mean_t cos(output_t, target_t)`.
pub fn recon_loss(output: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    recon_loss_with_grad(output, target).map(|(l, _)| l)
}

/// Loss and its gradient with respect to `output`.
pub fn recon_loss_with_grad(output: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if output.dim() != target.dim() {
        return Err(DrumError::Dimension(format!(
            "output {:?} vs target {:?}",
            output.dim(),
            target.dim()
        )));
    }
    let t = output.nrows();
    if t == 0 {
        return Err(DrumError::Degenerate("no tokens".into()));
    }
    let mut grad = Array2::zeros(output.raw_dim());
    let mut total = 0.0;
    for ((y, z), mut g) in output.rows().into_iter().zip(target.rows()).zip(grad.rows_mut()) {
        let (ny, nz) = (y.dot(&y).sqrt(), z.dot(&z).sqrt());
        if ny == 0.0 || nz == 0.0 {
            return Err(DrumError::Degenerate("zero-norm token in reconstruction loss".into()));
        }
        let c = y.dot(&z) / (ny * nz);
        total += c;
        let scale = -1.0 / t as f64;
        for ((gj, &yj), &zj) in g.iter_mut().zip(y).zip(z) {
            *gj = scale * (zj / (ny * nz) - c * yj / (ny * ny));
        }
    }
    Ok((1.0 - total / t as f64, grad))
}

/// First `t` rows of `uncond`, repeating it when it is shorter.
pub fn tile_rows(uncond: &Array2<f64>, t: usize) -> Array2<f64> {
    let tu = uncond.nrows();
    Array2::from_shape_fn((t, uncond.ncols()), |(i, j)| uncond[[i % tu, j]])
}

/// One reconstruction example: the adapter input and the condition it
/// should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: AdapterInput,
    pub target: Array2<f64>,
}

impl TrainSample {
    pub fn reconstruction(uncond: &Array2<f64>, condition: Array2<f64>) -> Self {
        Self {
            input: AdapterInput {
                queries: tile_rows(uncond, condition.nrows()),
                segments: vec![ConditionSegment {
                    label: SegmentLabel::Target,
                    preference: 1.0,
                    condition: condition.clone(),
                }],
                guidance: GuidanceConfig::disabled(),
            },
            target: condition,
        }
    }
}

pub fn samples_from_corpus(corpus: &EmbeddingCorpus, indices: &[usize]) -> Vec<TrainSample> {
    let uncond = corpus.uncond_f64();
    indices
        .iter()
        .map(|&i| TrainSample::reconstruction(&uncond, corpus.records[i].condition_f64()))
        .collect()
}

fn sample_loss(params: &AdapterParams, s: &TrainSample) -> Result<f64> {
    let (y, _) = forward_with_cache(params, &s.input)?;
    recon_loss(&y, &s.target)
}

fn sample_loss_and_grad(params: &AdapterParams, s: &TrainSample) -> Result<(f64, AdapterParams)> {
    let (y, cache) = forward_with_cache(params, &s.input)?;
    let (loss, dy) = recon_loss_with_grad(&y, &s.target)?;
    Ok((loss, backward(params, &cache, &dy)))
}

/// Mean loss over `batch`.
pub fn batch_loss(params: &AdapterParams, batch: &[TrainSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        total += sample_loss(params, s)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and mean gradient over `batch`; per-sample work runs in
/// parallel, reduction is in sample order.
pub fn batch_loss_and_grad(params: &AdapterParams, batch: &[TrainSample]) -> Result<(f64, AdapterParams)> {
    if batch.is_empty() {
        return Err(DrumError::Range("empty batch".into()));
    }
    let parts: Vec<Result<(f64, AdapterParams)>> =
        batch.par_iter().map(|s| sample_loss_and_grad(params, s)).collect();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Mean over samples of the token-mean cosine, i.e. `1 - loss`.
pub fn mean_cosine(params: &AdapterParams, samples: &[TrainSample]) -> Result<f64> {
    let losses: Vec<Result<f64>> = samples.par_iter().map(|s| sample_loss(params, s)).collect();
    let mut total = 0.0;
    for l in losses {
        total += 1.0 - l?;
    }
    Ok(total / samples.len() as f64)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n: usize) -> Self {
        Self { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p *= 1.0 - lr * weight_decay;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
}

pub fn train(corpus: &EmbeddingCorpus, params_init: &AdapterParams, cfg: &TrainConfig) -> Result<(AdapterParams, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(DrumError::Range("cannot train on an empty corpus".into()));
    }
    if corpus.d_cond != params_init.config().d_cond {
        return Err(DrumError::Dimension(format!(
            "corpus d_cond {} vs adapter d_cond {}",
            corpus.d_cond,
            params_init.config().d_cond
        )));
    }
    if cfg.holdout >= corpus.len() {
        return Err(DrumError::Range(format!(
            "holdout {} leaves no training records out of {}",
            cfg.holdout,
            corpus.len()
        )));
    }
    let started = Instant::now();
    let mut rng = DrumRng::new(cfg.seed);

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if cfg.holdout > 0 {
        rng.shuffle(&mut order);
    }
    let (held, train_idx) = order.split_at(cfg.holdout);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut held = held.to_vec();
    held.sort_unstable();
    if cfg.batch_size > train_idx.len() {
        return Err(DrumError::Range(format!(
            "batch size {} exceeds the {} training records",
            cfg.batch_size,
            train_idx.len()
        )));
    }
    let samples = samples_from_corpus(corpus, &train_idx);
    let held_samples = samples_from_corpus(corpus, &held);

    let mut params = params_init.clone();
    let grad_check_error = if cfg.grad_check {
        let probe = &samples[..samples.len().min(2)];
        Some(grad_check_sampled(&params, probe, 1e-4, 256, cfg.seed)?)
    } else {
        None
    };

    let mut opt = AdamW::new(cfg.optimizer, params.len());
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let batches_per_epoch = samples.len() / cfg.batch_size;
    let mut epoch_order: Vec<usize> = Vec::new();
    let mut cursor = batches_per_epoch;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.total_steps {
        if cursor == batches_per_epoch {
            epoch_order = (0..samples.len()).collect();
            rng.shuffle(&mut epoch_order);
            cursor = 0;
        }
        let ids = &epoch_order[cursor * cfg.batch_size..(cursor + 1) * cfg.batch_size];
        cursor += 1;
        batch.clear();
        batch.extend(ids.iter().map(|&i| samples[i].clone()));
        let (loss, grads) = batch_loss_and_grad(&params, &batch)?;
        if !loss.is_finite() || grads.as_slice().iter().any(|g| !g.is_finite()) {
            let record_ids: Vec<&str> = ids.iter().map(|&i| corpus.records[train_idx[i]].id.as_str()).collect();
            return Err(DrumError::NonFinite(format!(
                "loss {loss} at step {step}, batch {record_ids:?}"
            )));
        }
        losses.push(loss);
        opt.step(params.as_mut_slice(), grads.as_slice(), cfg.lr_at(step));
    }

    let final_train_cosine = mean_cosine(&params, &samples)?;
    let final_holdout_cosine = if held_samples.is_empty() {
        None
    } else {
        Some(mean_cosine(&params, &held_samples)?)
    };
    Ok((
        params,
        TrainReport {
            losses,
            final_train_cosine,
            final_holdout_cosine,
            grad_check_error,
            train_records: samples.len(),
            steps: cfg.total_steps,
            seed: cfg.seed,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `grad` and central differences of `f`
/// over the listed coordinates of `x`.
pub fn finite_difference_check(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    coords: impl IntoIterator<Item = usize>,
    epsilon: f64,
) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = f(&probe);
        probe[i] = orig - epsilon;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    worst
}

fn loss_at(params: &AdapterParams, flat: &[f64], batch: &[TrainSample]) -> f64 {
    let p = AdapterParams::from_flat(*params.config(), flat.to_vec()).expect("same architecture");
    batch_loss(&p, batch).unwrap_or(f64::NAN)
}

/// Max relative error of the analytic gradient of the mean reconstruction
/// loss over `batch`, against central finite differences, across every
/// parameter.
pub fn grad_check(params: &AdapterParams, batch: &[TrainSample], epsilon: f64) -> Result<f64> {
    let (_, grads) = batch_loss_and_grad(params, batch)?;
    Ok(finite_difference_check(
        |flat| loss_at(params, flat, batch),
        params.as_slice(),
        grads.as_slice(),
        0..params.len(),
        epsilon,
    ))
}

/// [`grad_check`] over at most `max_coords` seeded coordinates.
pub fn grad_check_sampled(
    params: &AdapterParams,
    batch: &[TrainSample],
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    if params.len() <= max_coords {
        return grad_check(params, batch, epsilon);
    }
    let (_, grads) = batch_loss_and_grad(params, batch)?;
    let coords = DrumRng::new(seed).subset(params.len(), max_coords);
    Ok(finite_difference_check(
        |flat| loss_at(params, flat, batch),
        params.as_slice(),
        grads.as_slice(),
        coords,
        epsilon,
    ))
}

/// Exponential moving average of a trace.
pub fn ema(trace: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = None;
    for &x in trace {
        let v = match acc {
            None => x,
            Some(a) => decay * a + (1.0 - decay) * x,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}
