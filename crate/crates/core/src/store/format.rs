//! Corpus directory format.
//!
//! ```text
//! <dir>/manifest.json   UTF-8 JSON: format_version, d_sim, d_cond, max_tokens,
//!                       n_records, encoder, extras {..}, texts [..] (optional)
//! <dir>/tensors.bin     "DRUM" | u32 version
//!                       per record:
//!                         u32 id_len | id bytes (UTF-8) | u32 T
//!                         f32[d_sim] sim | f32[T*d_cond] condition (row-major)
//!                         u8 has_class | f32[d_cond] class (if has_class) | f32 preference
//!                       u32 T_u | f32[T_u*d_cond] uncond
//! ```
//!
//! All integers and floats are little-endian. Nothing time-dependent is
//! written, so saving a corpus is a pure function of its value.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EmbeddingCorpus, PromptRecord, Provenance};
use crate::error::{DrumError, Result};

pub const MAGIC: &[u8; 4] = b"DRUM";
pub const FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub d_sim: usize,
    pub d_cond: usize,
    pub max_tokens: usize,
    pub n_records: usize,
    pub encoder: String,
    #[serde(default)]
    pub extras: BTreeMap<String, String>,
    /// Per-record prompt text, present only when at least one record has text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<Option<String>>>,
}

pub fn save_corpus(corpus: &EmbeddingCorpus, dir: &Path) -> Result<()> {
    corpus.validate()?;

    let texts = corpus
        .records
        .iter()
        .any(|r| r.text.is_some())
        .then(|| corpus.records.iter().map(|r| r.text.clone()).collect());
    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        d_sim: corpus.d_sim,
        d_cond: corpus.d_cond,
        max_tokens: corpus.max_tokens,
        n_records: corpus.records.len(),
        encoder: corpus.manifest.encoder.clone(),
        extras: corpus.manifest.extras.clone(),
        texts,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');

    let payload = encode_tensors(corpus);

    fs::create_dir_all(dir).map_err(|e| DrumError::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest_bytes).map_err(|e| DrumError::io(&mpath, e))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, payload).map_err(|e| DrumError::io(&tpath, e))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<EmbeddingCorpus> {
    let mpath = dir.join(MANIFEST_FILE);
    let mbytes = fs::read(&mpath).map_err(|e| DrumError::io(&mpath, e))?;
    let manifest: CorpusManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| DrumError::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DrumError::Format(format!(
            "unsupported manifest format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if let Some(texts) = &manifest.texts {
        if texts.len() != manifest.n_records {
            return Err(DrumError::Invalid(format!(
                "manifest lists {} texts for {} records",
                texts.len(),
                manifest.n_records
            )));
        }
    }

    let tpath = dir.join(TENSORS_FILE);
    let payload = fs::read(&tpath).map_err(|e| DrumError::io(&tpath, e))?;
    let corpus = decode_tensors(&payload, &manifest)?;
    corpus.validate()?;
    Ok(corpus)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s<'a>(buf: &mut Vec<u8>, xs: impl IntoIterator<Item = &'a f32>) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_tensors(corpus: &EmbeddingCorpus) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    for r in &corpus.records {
        put_u32(&mut buf, r.id.len() as u32);
        buf.extend_from_slice(r.id.as_bytes());
        put_u32(&mut buf, r.condition.nrows() as u32);
        put_f32s(&mut buf, &r.sim_embedding);
        // `iter()` walks logical row-major order whatever the memory layout.
        put_f32s(&mut buf, r.condition.iter());
        match &r.class_embedding {
            Some(c) => {
                buf.push(1);
                put_f32s(&mut buf, c);
            }
            None => buf.push(0),
        }
        put_f32s(&mut buf, [&r.preference]);
    }
    put_u32(&mut buf, corpus.uncond.nrows() as u32);
    put_f32s(&mut buf, corpus.uncond.iter());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(DrumError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| {
            DrumError::Format(format!("tensor length {n} overflows"))
        })?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| DrumError::Format(format!("tensor shape {rows}x{cols} overflows")))?;
        let data = self.f32s(n)?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}

fn decode_tensors(payload: &[u8], manifest: &CorpusManifest) -> Result<EmbeddingCorpus> {
    let mut rd = Reader { buf: payload, pos: 0 };
    let magic = rd.take(4).map_err(|_| DrumError::Format("missing magic bytes".into()))?;
    if magic != MAGIC {
        return Err(DrumError::Format(format!("bad magic bytes {magic:?}")));
    }
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(DrumError::Format(format!(
            "unsupported tensor payload version {version} (expected {FORMAT_VERSION})"
        )));
    }

    let d_cond = manifest.d_cond;
    let mut records = Vec::with_capacity(manifest.n_records.min(1 << 16));
    for i in 0..manifest.n_records {
        let id_len = rd.u32()? as usize;
        let id = std::str::from_utf8(rd.take(id_len)?)
            .map_err(|e| DrumError::Format(format!("record {i}: id is not UTF-8: {e}")))?
            .to_string();
        let t = rd.u32()? as usize;
        if t == 0 || t > manifest.max_tokens {
            return Err(DrumError::Invalid(format!(
                "record {i}: token count {t} outside 1..={}",
                manifest.max_tokens
            )));
        }
        let sim_embedding = rd.f32s(manifest.d_sim)?;
        let condition = rd.matrix(t, d_cond)?;
        let class_embedding = match rd.u8()? {
            0 => None,
            1 => Some(rd.f32s(d_cond)?),
            b => {
                return Err(DrumError::Format(format!("record {i}: has_class byte is {b}")));
            }
        };
        let preference = rd.f32s(1)?[0];
        let text = manifest.texts.as_ref().and_then(|t| t[i].clone());
        records.push(PromptRecord {
            id,
            text,
            sim_embedding,
            condition,
            class_embedding,
            preference,
        });
    }
    let tu = rd.u32()? as usize;
    if tu == 0 || tu > manifest.max_tokens {
        return Err(DrumError::Invalid(format!(
            "uncond token count {tu} outside 1..={}",
            manifest.max_tokens
        )));
    }
    let uncond = rd.matrix(tu, d_cond)?;
    if rd.pos != payload.len() {
        return Err(DrumError::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - rd.pos
        )));
    }

    Ok(EmbeddingCorpus {
        records,
        d_sim: manifest.d_sim,
        d_cond,
        max_tokens: manifest.max_tokens,
        uncond,
        manifest: Provenance {
            encoder: manifest.encoder.clone(),
            extras: manifest.extras.clone(),
        },
    })
}
