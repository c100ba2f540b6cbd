//! Feature-hashing sentence embedder and the embedding table file.

use std::path::Path;

use crate::error::{Result, VapError};
use crate::model::PromptEmbedding;
use crate::seed::fnv1a;

pub const MIN_DIM: usize = 8;

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
}

/// Deterministic unit vector from hashed lowercase word counts. Word order
/// is ignored.
pub fn embed_text(text: &str, dim: usize, seed: u64) -> Result<PromptEmbedding> {
    if dim < MIN_DIM {
        return Err(VapError::Input(format!(
            "embedding dim {dim} is below {MIN_DIM}"
        )));
    }
    let mut v = vec![0.0f64; dim];
    let mut any = false;
    for tok in tokens(text) {
        let mut bytes = seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(tok.as_bytes());
        let h = fnv1a(&bytes);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
        any = true;
    }
    if !any {
        return Err(VapError::Input("cannot embed text without words".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every token cancelled out; fall back to the first token's slot.
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    PromptEmbedding::new(text, v.into_iter().map(|x| x as f32).collect())
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

const PEMB_MAGIC: &[u8; 4] = b"PEMB";
const PEMB_VERSION: u32 = 1;

/// Writes `(key, vector)` entries; all vectors must share one length.
pub fn store_embeddings(path: &Path, entries: &[(String, Vec<f32>)]) -> Result<()> {
    let dim = entries.first().map_or(0, |(_, v)| v.len());
    if let Some((k, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
        return Err(VapError::Validation(format!(
            "embedding {k} has {} dims, expected {dim}",
            v.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(PEMB_MAGIC);
    for v in [PEMB_VERSION, entries.len() as u32, dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (k, v) in entries {
        out.extend_from_slice(&(k.len() as u32).to_le_bytes());
        out.extend_from_slice(k.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| VapError::io(path, e))
}

/// Reads an embedding table. Vectors within 1e-3 of unit norm are
/// renormalized; others are rejected.
pub fn load_embeddings(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| VapError::io(path, e))?;
    let fmt = |m: String| VapError::Format(format!("{}: {m}", path.display()));
    let mut r = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let trunc = |pos: usize| fmt(format!("truncated at byte {pos}"));
    if r.take(4).ok_or_else(|| trunc(0))? != PEMB_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let word = |r: &mut Cursor| r.u32().ok_or_else(|| trunc(r.pos));
    let version = word(&mut r)?;
    if version != PEMB_VERSION {
        return Err(fmt(format!("version {version}, expected {PEMB_VERSION}")));
    }
    let count = word(&mut r)? as usize;
    let dim = word(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = word(&mut r)? as usize;
        let key = r.take(len).ok_or_else(|| trunc(r.pos))?;
        let key = String::from_utf8(key.to_vec()).map_err(|_| fmt("key is not UTF-8".into()))?;
        let mut v: Vec<f32> = r
            .take(4 * dim)
            .ok_or_else(|| trunc(r.pos))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(fmt(format!("embedding {key} has norm {norm:.6}")));
        }
        if norm != 1.0 {
            v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
        }
        out.push((key, v));
    }
    if r.pos != bytes.len() {
        return Err(fmt("trailing bytes".into()));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
