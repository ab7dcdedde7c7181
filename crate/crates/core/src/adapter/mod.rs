//! The personalized conditioning adapter: a stack of cross-attention layers
//! that queries from the unconditional embedding and attends over reference
//! and target conditions.
//!
//! Design notes:
//!
//! - Layer normalization is applied to the queries before every layer and
//!   nowhere else, so outputs stay in the raw (pre-normalization) condition
//!   space.
//! - Residual connections run along the query stream; there are no
//!   feed-forward sublayers and no positional encodings. Attention over the
//!   condition tokens is therefore a set operation.
//! - References are concatenated in profile order with the target last.
//! - The key projection has no bias: softmax cancels a per-row shift of
//!   the scores, so such a bias would never receive gradient.

mod checkpoint;
mod model;
mod params;

use ndarray::Array2;

use crate::error::{DrumError, Result};
use crate::guidance::{self, GuidanceConfig, SegmentLabel};
use crate::store::PromptRecord;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use model::{
    attention_layer, attention_weights, backward, forward_with_cache, AdapterInput, ConditionSegment,
    ForwardCache,
};
pub use params::{AdapterConfig, AdapterParams, LayerSlots, LinearSlots, ParamLayout, TensorSlot};

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizationRequest {
    pub target: PromptRecord,
    /// Typically the records of a user profile, in profile order.
    pub references: Vec<PromptRecord>,
    pub guidance: GuidanceConfig,
    /// `T_u x d_cond` query source.
    pub uncond: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedCondition {
    /// `T_u x d_cond`.
    pub condition: Array2<f64>,
    /// Present when the target and every reference carry a class embedding.
    pub class_embedding: Option<Vec<f64>>,
    /// Mass per segment (references first, target last) used to blend the
    /// class embeddings.
    pub segment_mass: Vec<f64>,
}

impl PersonalizationRequest {
    pub fn to_input(&self) -> AdapterInput {
        let seg = |r: &PromptRecord, label| ConditionSegment {
            label,
            preference: r.preference as f64,
            condition: r.condition_f64(),
        };
        let mut segments: Vec<ConditionSegment> =
            self.references.iter().map(|r| seg(r, SegmentLabel::Reference)).collect();
        segments.push(seg(&self.target, SegmentLabel::Target));
        AdapterInput {
            queries: self.uncond.mapv(|x| x as f64),
            segments,
            guidance: self.guidance,
        }
    }
}

/// Personalizes the target condition with the references.
///
/// With guidance enabled, class embeddings are blended with
/// [`guidance::guide_class_embeddings`]. Without guidance there is no
/// preference weighting to apply, so the class embeddings are blended with
/// the per-segment attention mass of the last layer's joint softmax.
pub fn forward(params: &AdapterParams, req: &PersonalizationRequest) -> Result<PersonalizedCondition> {
    let input = req.to_input();
    let (condition, cache) = forward_with_cache(params, &input)?;

    let classes: Option<Vec<Vec<f64>>> = req
        .references
        .iter()
        .chain(std::iter::once(&req.target))
        .map(|r| r.class_f64())
        .collect();
    let segment_mass = if req.guidance.enabled {
        cache.layout().masses(&req.guidance)?
    } else {
        cache.last_layer_segment_mass()
    };
    let class_embedding = match classes {
        Some(classes) if classes.iter().any(|c| c.len() != params.config().d_cond) => {
            return Err(DrumError::Dimension("class embedding width differs from d_cond".into()));
        }
        Some(classes) if req.guidance.enabled => {
            let tagged: Vec<(SegmentLabel, f64, Vec<f64>)> = input
                .segments
                .iter()
                .zip(classes)
                .map(|(s, c)| (s.label, s.preference, c))
                .collect();
            Some(guidance::guide_class_embeddings(&tagged, &req.guidance)?)
        }
        Some(classes) => Some(guidance::blend(
            classes.iter().map(|c| c.as_slice()),
            &segment_mass,
            params.config().d_cond,
        )),
        None => None,
    };
    Ok(PersonalizedCondition {
        condition,
        class_embedding,
        segment_mass,
    })
}

/// Per-token cosine between two condition matrices, averaged over the
/// first `min(T_a, T_b)` tokens.
pub fn token_cosine(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(DrumError::Dimension(format!("widths {} and {}", a.ncols(), b.ncols())));
    }
    let t = a.nrows().min(b.nrows());
    if t == 0 {
        return Err(DrumError::Degenerate("no tokens to compare".into()));
    }
    let mut total = 0.0;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()).take(t) {
        let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
        if na == 0.0 || nb == 0.0 {
            return Err(DrumError::Degenerate("zero-norm token".into()));
        }
        total += ra.dot(&rb) / (na * nb);
    }
    Ok(total / t as f64)
}
