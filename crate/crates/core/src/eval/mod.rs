//! Evaluation harness: the Text-align metric and the sweeps built on it.
//!
//! Text align is the mean preference-weighted CLIP similarity between the
//! personalized class embedding and a set of prompt embeddings. It is
//! reported twice per user: against the target prompt alone, and against the
//! user's history (all of it by default, not only the sampled profile).
//!
//! Reports carry raw scores; when a baseline report (the unpersonalized
//! target condition) is available they also carry the improvement rate
//! `(score - baseline) / |baseline| * 100`.

mod plot;

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{forward, token_cosine, AdapterParams, PersonalizationRequest};
use crate::coreset::{coreset_sample, sample_count, sim_clip, CoresetConfig};
use crate::error::{DrumError, Result};
use crate::guidance::GuidanceConfig;
use crate::rng::DrumRng;
use crate::store::{EmbeddingCorpus, PromptRecord, UserGroup};

pub use plot::{line_chart_svg, Series};

/// Mean of `sim_clip(class, r_i, p_i)` over `refs`.
pub fn text_align(personalized_class: &[f64], refs: &[(Vec<f64>, f64)]) -> Result<f64> {
    if refs.is_empty() {
        return Err(DrumError::Invalid("text align needs at least one reference".into()));
    }
    let mut total = 0.0;
    for (r, p) in refs {
        total += sim_clip(personalized_class, r, *p)?;
    }
    Ok(total / refs.len() as f64)
}

/// `(score - baseline) / |baseline| * 100`; undefined for a zero baseline.
pub fn improvement(score: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (score - baseline) / baseline.abs() * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    /// Greedy coreset selection.
    Coreset,
    /// Seeded draw without replacement.
    Random,
    /// Every `floor(1 / ratio)`-th history entry in chronological order.
    Uniform,
    /// The whole history (sampling removed).
    Full,
    /// No references at all; only meaningful with `alpha = 0`.
    None,
}

impl SamplingMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingMethod::Coreset => "coreset",
            SamplingMethod::Random => "random",
            SamplingMethod::Uniform => "uniform",
            SamplingMethod::Full => "full",
            SamplingMethod::None => "none",
        }
    }
}

impl std::str::FromStr for SamplingMethod {
    type Err = DrumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coreset" => Ok(SamplingMethod::Coreset),
            "random" => Ok(SamplingMethod::Random),
            "uniform" => Ok(SamplingMethod::Uniform),
            "full" => Ok(SamplingMethod::Full),
            "none" => Ok(SamplingMethod::None),
            other => Err(DrumError::Invalid(format!("unknown sampling method {other:?}"))),
        }
    }
}

/// Which history entries the history metric averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryScope {
    Full,
    /// The most recent `n` entries.
    Recent(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub label: String,
    pub alpha: f64,
    /// Guidance mechanism on; off routes through a single joint softmax.
    pub guidance: bool,
    pub sampling: SamplingMethod,
    pub ratio: f64,
    /// Coreset approximate size; the user's history length when unset.
    pub approx_size: Option<usize>,
    pub use_preferences: bool,
    pub seed: u64,
    pub history_scope: HistoryScope,
}

impl EvalConfig {
    pub fn new(label: impl Into<String>, alpha: f64, sampling: SamplingMethod, ratio: f64, seed: u64) -> Self {
        Self {
            label: label.into(),
            alpha,
            guidance: true,
            sampling,
            ratio,
            approx_size: None,
            use_preferences: true,
            seed,
            history_scope: HistoryScope::Full,
        }
    }

    /// The unpersonalized reference point: target condition only.
    pub fn baseline(seed: u64) -> Self {
        Self::new("baseline", 0.0, SamplingMethod::None, 1.0, seed)
    }

    /// Baseline sharing this config's seed and history scope.
    pub fn baseline_of(&self) -> Self {
        Self {
            history_scope: self.history_scope,
            ..Self::baseline(self.seed)
        }
    }

    fn guidance_config(&self) -> GuidanceConfig {
        if self.guidance {
            GuidanceConfig::new(self.alpha)
        } else {
            GuidanceConfig { alpha: self.alpha, enabled: false }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    pub user: String,
    pub target_align: f64,
    pub history_align: f64,
    pub n_references: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub users: Vec<UserEval>,
    pub target_align: f64,
    pub history_align: f64,
    pub target_improvement: Option<f64>,
    pub history_improvement: Option<f64>,
}

/// Per-user seed, so users with equal history lengths draw different subsets.
fn user_seed(seed: u64, user_index: usize) -> u64 {
    seed.wrapping_add((user_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Indices into `history` chosen by `cfg.sampling`, sorted chronologically.
pub fn select_references(
    corpus: &EmbeddingCorpus,
    history: &[usize],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let n_hist = history.len();
    let mut picked: Vec<usize> = match cfg.sampling {
        SamplingMethod::None => Vec::new(),
        SamplingMethod::Full => (0..n_hist).collect(),
        SamplingMethod::Coreset => {
            let n = sample_count(cfg.ratio, n_hist)?;
            let sub = corpus.subset(history);
            let ccfg = CoresetConfig {
                sample_size: n,
                approx_size: cfg.approx_size.unwrap_or(n_hist).min(n_hist),
                seed,
                use_preferences: cfg.use_preferences,
            };
            coreset_sample(&sub, &ccfg)?.indices
        }
        SamplingMethod::Random => {
            let n = sample_count(cfg.ratio, n_hist)?;
            DrumRng::new(seed).subset(n_hist, n)
        }
        SamplingMethod::Uniform => {
            let n = sample_count(cfg.ratio, n_hist)?;
            let step = ((1.0 / cfg.ratio + 1e-9).floor() as usize).max(1);
            (0..n_hist).step_by(step).take(n).collect()
        }
    };
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| history[i]).collect())
}

fn sim_refs<'a>(records: impl Iterator<Item = &'a PromptRecord>) -> Vec<(Vec<f64>, f64)> {
    records.map(|r| (r.sim_f64(), r.preference as f64)).collect()
}

fn evaluate_user(
    corpus: &EmbeddingCorpus,
    params: &AdapterParams,
    group: &UserGroup,
    user_index: usize,
    cfg: &EvalConfig,
) -> Result<UserEval> {
    let refs = select_references(corpus, &group.history, cfg, user_seed(cfg.seed, user_index))?;
    let references: Vec<PromptRecord> = refs.iter().map(|&i| corpus.records[i].clone()).collect();
    let scoped: &[usize] = match cfg.history_scope {
        HistoryScope::Full => &group.history,
        HistoryScope::Recent(n) => &group.history[group.history.len().saturating_sub(n)..],
    };
    let history_refs = sim_refs(scoped.iter().map(|&i| &corpus.records[i]));

    let (mut target_total, mut history_total) = (0.0, 0.0);
    for &t in &group.targets {
        let target = &corpus.records[t];
        let req = PersonalizationRequest {
            target: target.clone(),
            references: references.clone(),
            guidance: cfg.guidance_config(),
            uncond: corpus.uncond.clone(),
        };
        let out = forward(params, &req)?;
        let class = out.class_embedding.ok_or_else(|| {
            DrumError::Invalid(format!("missing class embedding for user {:?}", group.user))
        })?;
        target_total += text_align(&class, &sim_refs(std::iter::once(target)))?;
        history_total += text_align(&class, &history_refs)?;
    }
    let n = group.targets.len() as f64;
    Ok(UserEval {
        user: group.user.clone(),
        target_align: target_total / n,
        history_align: history_total / n,
        n_references: references.len(),
    })
}

/// Evaluates every user that has both history and at least one target.
pub fn evaluate(
    corpus: &EmbeddingCorpus,
    params: &AdapterParams,
    cfg: &EvalConfig,
    baseline: Option<&EvalReport>,
) -> Result<EvalReport> {
    let groups: Vec<UserGroup> = corpus
        .users()
        .into_iter()
        .filter(|g| !g.targets.is_empty() && !g.history.is_empty())
        .collect();
    if groups.is_empty() {
        return Err(DrumError::Invalid(
            "corpus has no user with both history and a target (ids \"<user>/h..\" and \"<user>/t..\")".into(),
        ));
    }
    let users: Vec<UserEval> = groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| evaluate_user(corpus, params, g, i, cfg))
        .collect::<Result<_>>()?;
    let n = users.len() as f64;
    let target_align = users.iter().map(|u| u.target_align).sum::<f64>() / n;
    let history_align = users.iter().map(|u| u.history_align).sum::<f64>() / n;
    Ok(EvalReport {
        config: cfg.clone(),
        target_improvement: baseline.and_then(|b| improvement(target_align, b.target_align)),
        history_improvement: baseline.and_then(|b| improvement(history_align, b.history_align)),
        users,
        target_align,
        history_align,
    })
}

/// One report per `(method, ratio)`, methods outermost. Every other setting
/// (alpha, seed, preferences, history scope) comes from `base`.
pub fn run_sampling_sweep(
    corpus: &EmbeddingCorpus,
    params: &AdapterParams,
    base: &EvalConfig,
    methods: &[SamplingMethod],
    ratios: &[f64],
) -> Result<Vec<EvalReport>> {
    for &r in ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(DrumError::Range(format!("sampling ratio {r} outside (0, 1]")));
        }
    }
    let baseline = evaluate(corpus, params, &base.baseline_of(), None)?;
    let mut out = Vec::with_capacity(methods.len() * ratios.len());
    for &m in methods {
        for &r in ratios {
            let cfg = EvalConfig {
                label: format!("{}@{r}", m.name()),
                sampling: m,
                ratio: r,
                ..base.clone()
            };
            out.push(evaluate(corpus, params, &cfg, Some(&baseline))?);
        }
    }
    Ok(out)
}

/// Rows: full, without sampling, without guidance, without both. The full
/// row uses coreset sampling at `base.ratio`.
pub fn run_ablation(corpus: &EmbeddingCorpus, params: &AdapterParams, base: &EvalConfig) -> Result<Vec<EvalReport>> {
    let baseline = evaluate(corpus, params, &base.baseline_of(), None)?;
    let rows = [
        ("full", SamplingMethod::Coreset, true),
        ("w/o S", SamplingMethod::Full, true),
        ("w/o G", SamplingMethod::Coreset, false),
        ("w/o S&G", SamplingMethod::Full, false),
    ];
    rows.iter()
        .map(|&(label, sampling, guidance)| {
            let cfg = EvalConfig {
                label: label.to_string(),
                sampling,
                guidance,
                ..base.clone()
            };
            evaluate(corpus, params, &cfg, Some(&baseline))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    #[serde(skip)]
    pub condition: Array2<f64>,
    #[serde(skip)]
    pub class_embedding: Option<Vec<f64>>,
    /// Text align against the target; needs class embeddings.
    pub target_align: Option<f64>,
    /// Text align against the references; needs class embeddings.
    pub reference_align: Option<f64>,
    /// Token-mean cosine of the personalized condition to the target condition.
    pub condition_target_cosine: f64,
    /// Same, averaged over the reference conditions.
    pub condition_reference_cosine: f64,
}

pub fn run_alpha_sweep(
    target: &PromptRecord,
    references: &[PromptRecord],
    uncond: &Array2<f32>,
    params: &AdapterParams,
    alphas: &[f64],
) -> Result<Vec<AlphaRow>> {
    if references.is_empty() {
        return Err(DrumError::Invalid("alpha sweep needs at least one reference".into()));
    }
    let target_cond = target.condition_f64();
    let ref_conds: Vec<Array2<f64>> = references.iter().map(|r| r.condition_f64()).collect();
    alphas
        .iter()
        .map(|&alpha| {
            let req = PersonalizationRequest {
                target: target.clone(),
                references: references.to_vec(),
                guidance: GuidanceConfig::new(alpha),
                uncond: uncond.clone(),
            };
            let out = forward(params, &req)?;
            let (target_align, reference_align) = match &out.class_embedding {
                Some(c) => (
                    Some(text_align(c, &sim_refs(std::iter::once(target)))?),
                    Some(text_align(c, &sim_refs(references.iter()))?),
                ),
                None => (None, None),
            };
            let mut ref_cos = 0.0;
            for rc in &ref_conds {
                ref_cos += token_cosine(&out.condition, rc)?;
            }
            Ok(AlphaRow {
                alpha,
                condition_target_cosine: token_cosine(&out.condition, &target_cond)?,
                condition_reference_cosine: ref_cos / ref_conds.len() as f64,
                condition: out.condition,
                class_embedding: out.class_embedding,
                target_align,
                reference_align,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    sampling: &'a str,
    ratio: f64,
    alpha: f64,
    guidance: bool,
    use_preferences: bool,
    users: usize,
    target_align: f64,
    history_align: f64,
    target_imp: Option<f64>,
    history_imp: Option<f64>,
}

/// One CSV row per report.
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(CsvRow {
            label: &r.config.label,
            sampling: r.config.sampling.name(),
            ratio: r.config.ratio,
            alpha: r.config.alpha,
            guidance: r.config.guidance,
            use_preferences: r.config.use_preferences,
            users: r.users.len(),
            target_align: r.target_align,
            history_align: r.history_align,
            target_imp: r.target_improvement,
            history_imp: r.history_improvement,
        })?;
    }
    w.flush().map_err(|e| DrumError::io("<csv>", e))?;
    Ok(())
}

pub fn write_alpha_csv<W: Write>(rows: &[AlphaRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| DrumError::io("<csv>", e))?;
    Ok(())
}
