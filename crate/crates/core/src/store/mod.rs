//! Prompt records, corpora and their on-disk format.
//!
//! A corpus is an ordered list of [`PromptRecord`]s sharing one similarity
//! dimension (`d_sim`) and one condition width (`d_cond`), together with the
//! encoder's unconditional embedding. Tensors are kept at `f32`, which is
//! exactly what the on-disk format stores; computation widens to `f64`.
//!
//! Record ids may carry a user prefix, `"<user>/<local>"`. Local ids starting
//! with `t` mark target prompts, everything else is history. Ids without a
//! `/` belong to the anonymous user `""`.

mod format;
mod synthetic;

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;

use crate::error::{DrumError, Result};

pub use format::{load_corpus, save_corpus, CorpusManifest, FORMAT_VERSION, MAGIC};
pub use synthetic::{gen_synthetic, SyntheticSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub id: String,
    /// Informational only; never used in computation.
    pub text: Option<String>,
    pub sim_embedding: Vec<f32>,
    /// `T x d_cond`, pre-normalization encoder tokens.
    pub condition: Array2<f32>,
    pub class_embedding: Option<Vec<f32>>,
    pub preference: f32,
}

impl PromptRecord {
    pub fn tokens(&self) -> usize {
        self.condition.nrows()
    }

    pub fn sim_f64(&self) -> Vec<f64> {
        self.sim_embedding.iter().map(|&x| x as f64).collect()
    }

    pub fn condition_f64(&self) -> Array2<f64> {
        self.condition.mapv(|x| x as f64)
    }

    pub fn class_f64(&self) -> Option<Vec<f64>> {
        self.class_embedding
            .as_ref()
            .map(|c| c.iter().map(|&x| x as f64).collect())
    }

    /// The user prefix of the id, or `""` when there is none.
    pub fn user(&self) -> &str {
        self.id.split_once('/').map_or("", |(u, _)| u)
    }

    pub fn is_target(&self) -> bool {
        self.id
            .split_once('/')
            .is_some_and(|(_, local)| local.starts_with('t'))
    }
}

/// Provenance carried in the manifest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub encoder: String,
    pub extras: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    pub records: Vec<PromptRecord>,
    pub d_sim: usize,
    pub d_cond: usize,
    pub max_tokens: usize,
    /// `T_u x d_cond` unconditional embedding, the adapter's query source.
    pub uncond: Array2<f32>,
    pub manifest: Provenance,
}

/// One user's slice of a corpus, as record indices in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserGroup {
    pub user: String,
    pub history: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EmbeddingCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn uncond_f64(&self) -> Array2<f64> {
        self.uncond.mapv(|x| x as f64)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn preferences(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.preference as f64).collect()
    }

    /// Users sorted by id; history and targets keep corpus order.
    pub fn users(&self) -> Vec<UserGroup> {
        let mut groups: BTreeMap<&str, UserGroup> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let g = groups.entry(r.user()).or_insert_with(|| UserGroup {
                user: r.user().to_string(),
                history: Vec::new(),
                targets: Vec::new(),
            });
            if r.is_target() {
                g.targets.push(i);
            } else {
                g.history.push(i);
            }
        }
        groups.into_values().collect()
    }

    /// A corpus holding only the given records (in the given order), sharing
    /// dimensions, uncond and provenance with `self`.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingCorpus {
        EmbeddingCorpus {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            d_sim: self.d_sim,
            d_cond: self.d_cond,
            max_tokens: self.max_tokens,
            uncond: self.uncond.clone(),
            manifest: self.manifest.clone(),
        }
    }

    /// Checks every corpus and record invariant.
    pub fn validate(&self) -> Result<()> {
        if self.d_sim == 0 || self.d_cond == 0 || self.max_tokens == 0 {
            return Err(DrumError::Invalid(format!(
                "dimensions must be positive (d_sim={}, d_cond={}, max_tokens={})",
                self.d_sim, self.d_cond, self.max_tokens
            )));
        }
        let (tu, du) = self.uncond.dim();
        if tu == 0 || du != self.d_cond {
            return Err(DrumError::Dimension(format!(
                "uncond is {tu}x{du}, expected at least one row of width {}",
                self.d_cond
            )));
        }
        if self.uncond.iter().any(|x| !x.is_finite()) {
            return Err(DrumError::NonFinite("uncond".into()));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DrumError::Invalid(format!("duplicate id {:?}", r.id)));
            }
            validate_record(r, self.d_sim, self.d_cond, self.max_tokens)?;
        }
        Ok(())
    }
}

fn validate_record(r: &PromptRecord, d_sim: usize, d_cond: usize, max_tokens: usize) -> Result<()> {
    if r.sim_embedding.len() != d_sim {
        return Err(DrumError::Dimension(format!(
            "record {:?}: sim_embedding has length {}, expected {d_sim}",
            r.id,
            r.sim_embedding.len()
        )));
    }
    if r.sim_embedding.iter().any(|x| !x.is_finite()) {
        return Err(DrumError::NonFinite(format!("record {:?}: sim_embedding", r.id)));
    }
    let (t, d) = r.condition.dim();
    if t == 0 || t > max_tokens || d != d_cond {
        return Err(DrumError::Dimension(format!(
            "record {:?}: condition is {t}x{d}, expected 1..={max_tokens} rows of width {d_cond}",
            r.id
        )));
    }
    if r.condition.iter().any(|x| !x.is_finite()) {
        return Err(DrumError::NonFinite(format!("record {:?}: condition", r.id)));
    }
    if let Some(c) = &r.class_embedding {
        if c.len() != d_cond {
            return Err(DrumError::Dimension(format!(
                "record {:?}: class embedding has length {}, expected {d_cond}",
                r.id,
                c.len()
            )));
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(DrumError::NonFinite(format!("record {:?}: class embedding", r.id)));
        }
    }
    if !r.preference.is_finite() || r.preference < 0.0 {
        return Err(DrumError::Invalid(format!(
            "record {:?}: preference {} must be finite and nonnegative",
            r.id, r.preference
        )));
    }
    Ok(())
}
