//! Decoupled per-condition attention weighting.
//!
//! Attention scores over the concatenated condition tokens are grouped into
//! segments, one per condition. With guidance enabled each segment is
//! softmax-normalized on its own; the target segment then receives mass
//! `1 - alpha` and reference segment `g` receives `alpha * p_g / sum_h p_h`.
//! Every query row therefore sums to one, with exactly `1 - alpha` on the
//! target and `alpha` on the references.
//!
//! Preference intensities attach at segment granularity: the normalizer
//! `sum_j softmax(s_j) p_j` is read as a sum over reference conditions, each
//! of whose token softmax sums to one.
//!
//! Without guidance ([`fused_weights`]) the whole row goes through a single
//! joint softmax and `alpha` and the preferences play no role.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{DrumError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentLabel {
    Target,
    Reference,
}

/// Raw scaled dot-product scores of one condition, `Q x T_seg`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub label: SegmentLabel,
    pub preference: f64,
    pub scores: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentedScores {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Personalization degree in `[0, 1]`.
    pub alpha: f64,
    pub enabled: bool,
}

impl GuidanceConfig {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, enabled: true }
    }

    pub fn disabled() -> Self {
        Self { alpha: 0.0, enabled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DrumError::Range(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Shape-only description of one segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpec {
    pub label: SegmentLabel,
    pub preference: f64,
    pub tokens: usize,
}

/// Token layout of a concatenated condition axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLayout {
    specs: Vec<SegmentSpec>,
    offsets: Vec<usize>,
    total: usize,
}

impl SegmentLayout {
    pub fn new(specs: Vec<SegmentSpec>) -> Result<Self> {
        let targets = specs.iter().filter(|s| s.label == SegmentLabel::Target).count();
        if targets != 1 {
            return Err(DrumError::Invalid(format!(
                "expected exactly one target segment, found {targets}"
            )));
        }
        for s in &specs {
            if s.tokens == 0 {
                return Err(DrumError::Invalid("segment with no tokens".into()));
            }
            if !(s.preference >= 0.0 && s.preference.is_finite()) {
                return Err(DrumError::Range(format!(
                    "preference {} must be finite and >= 0",
                    s.preference
                )));
            }
        }
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.tokens;
        }
        Ok(Self { specs, offsets, total })
    }

    pub fn specs(&self) -> &[SegmentSpec] {
        &self.specs
    }

    pub fn total_tokens(&self) -> usize {
        self.total
    }

    /// Token range of segment `g`.
    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g] + self.specs[g].tokens
    }

    /// Row mass assigned to each segment under guidance.
    pub fn masses(&self, cfg: &GuidanceConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        let total_pref: f64 = self
            .specs
            .iter()
            .filter(|s| s.label == SegmentLabel::Reference)
            .map(|s| s.preference)
            .sum();
        if cfg.alpha > 0.0 && total_pref <= 0.0 {
            return Err(DrumError::Degenerate(format!(
                "alpha = {} needs at least one reference with positive preference",
                cfg.alpha
            )));
        }
        Ok(self
            .specs
            .iter()
            .map(|s| match s.label {
                SegmentLabel::Target => 1.0 - cfg.alpha,
                SegmentLabel::Reference if cfg.alpha == 0.0 => 0.0,
                SegmentLabel::Reference => cfg.alpha * s.preference / total_pref,
            })
            .collect())
    }
}

/// How a score row turns into attention weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// Per-segment softmax scaled by the given segment masses.
    Guided(Vec<f64>),
    /// One joint softmax across all tokens.
    Fused,
}

impl Weighting {
    pub fn for_config(layout: &SegmentLayout, cfg: &GuidanceConfig) -> Result<Self> {
        if cfg.enabled {
            Ok(Weighting::Guided(layout.masses(cfg)?))
        } else {
            Ok(Weighting::Fused)
        }
    }
}

fn softmax_in_place(mut row: ArrayViewMut1<f64>, mass: f64) {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    row.mapv_inplace(|x| (x - max).exp());
    let z = row.sum();
    row.mapv_inplace(|x| mass * x / z);
}

/// Attention weights for a `Q x T_total` score matrix laid out by `layout`.
pub fn weights(scores: ArrayView2<f64>, layout: &SegmentLayout, weighting: &Weighting) -> Array2<f64> {
    debug_assert_eq!(scores.ncols(), layout.total_tokens());
    let mut w = scores.to_owned();
    match weighting {
        Weighting::Fused => {
            for row in w.rows_mut() {
                softmax_in_place(row, 1.0);
            }
        }
        Weighting::Guided(masses) => {
            for mut row in w.rows_mut() {
                for (g, &mass) in masses.iter().enumerate() {
                    let mut seg = row.slice_mut(s![layout.range(g)]);
                    if mass == 0.0 {
                        seg.fill(0.0);
                    } else {
                        softmax_in_place(seg, mass);
                    }
                }
            }
        }
    }
    w
}

/// Reverse pass of [`weights`]: maps `dL/dW` to `dL/dS`.
pub fn weights_backward(
    w: ArrayView2<f64>,
    grad_w: ArrayView2<f64>,
    layout: &SegmentLayout,
    weighting: &Weighting,
) -> Array2<f64> {
    let mut grad_s = Array2::zeros(w.raw_dim());
    let mut block = |q: usize, range: std::ops::Range<usize>, mass: f64| {
        if mass == 0.0 {
            return;
        }
        let wr = w.slice(s![q, range.clone()]);
        let gr = grad_w.slice(s![q, range.clone()]);
        // sum_j softmax_j * dW_j, with softmax = W / mass.
        let inner = wr.dot(&gr) / mass;
        let mut out = grad_s.slice_mut(s![q, range]);
        for ((o, &wi), &gi) in out.iter_mut().zip(wr).zip(gr) {
            *o = wi * (gi - inner);
        }
    };
    for q in 0..w.nrows() {
        match weighting {
            Weighting::Fused => block(q, 0..layout.total_tokens(), 1.0),
            Weighting::Guided(masses) => {
                for (g, &mass) in masses.iter().enumerate() {
                    block(q, layout.range(g), mass);
                }
            }
        }
    }
    grad_s
}

fn concat(scores: &SegmentedScores) -> Result<(Array2<f64>, SegmentLayout)> {
    let q = scores.segments.first().map_or(0, |s| s.scores.nrows());
    if scores.segments.iter().any(|s| s.scores.nrows() != q) {
        return Err(DrumError::Dimension("segments disagree on query count".into()));
    }
    if scores.segments.iter().any(|s| s.scores.iter().any(|x| x.is_nan())) {
        return Err(DrumError::NonFinite("NaN attention score".into()));
    }
    let layout = SegmentLayout::new(
        scores
            .segments
            .iter()
            .map(|s| SegmentSpec {
                label: s.label,
                preference: s.preference,
                tokens: s.scores.ncols(),
            })
            .collect(),
    )?;
    let mut all = Array2::zeros((q, layout.total_tokens()));
    for (g, seg) in scores.segments.iter().enumerate() {
        all.slice_mut(s![.., layout.range(g)]).assign(&seg.scores);
    }
    Ok((all, layout))
}

/// Guided weights: per-segment softmax, `1 - alpha` on the target and
/// preference-proportional shares of `alpha` on the references.
pub fn guided_weights(scores: &SegmentedScores, cfg: &GuidanceConfig) -> Result<Array2<f64>> {
    let (all, layout) = concat(scores)?;
    let masses = layout.masses(cfg)?;
    Ok(weights(all.view(), &layout, &Weighting::Guided(masses)))
}

/// Plain joint softmax across the concatenated token axis.
pub fn fused_weights(scores: &SegmentedScores) -> Result<Array2<f64>> {
    let (all, layout) = concat(scores)?;
    Ok(weights(all.view(), &layout, &Weighting::Fused))
}

/// Guidance applied to single-vector class embeddings: each vector is a
/// one-token segment, whose softmax is identically one, so the result is the
/// convex blend `(1 - alpha) t + alpha * sum_g (p_g / sum_h p_h) r_g`.
pub fn guide_class_embeddings(
    class_vecs: &[(SegmentLabel, f64, Vec<f64>)],
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let dim = class_vecs.first().map_or(0, |(_, _, v)| v.len());
    if class_vecs.iter().any(|(_, _, v)| v.len() != dim) {
        return Err(DrumError::Dimension("class embeddings differ in length".into()));
    }
    let layout = SegmentLayout::new(
        class_vecs
            .iter()
            .map(|&(label, preference, _)| SegmentSpec { label, preference, tokens: 1 })
            .collect(),
    )?;
    let masses = layout.masses(cfg)?;
    Ok(blend(class_vecs.iter().map(|(_, _, v)| v.as_slice()), &masses, dim))
}

/// `sum_g mass_g * v_g`, skipping zero masses so the target passes through
/// unchanged when it holds all the mass.
pub(crate) fn blend<'a>(vecs: impl Iterator<Item = &'a [f64]>, masses: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (v, &m) in vecs.zip(masses) {
        if m == 0.0 {
            continue;
        }
        if m == 1.0 {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        } else {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += m * x);
        }
    }
    out
}
