//! Binary checkpoint format.
//!
//! ```text
//! "VAPP" | version u32 | len u32 + config JSON | count u32 |
//!   count × (len u32 + name | rank u32 | rank × extent u32 | f32 data)
//! ```
//! All integers and floats are little-endian and names are sorted, so a
//! load/save cycle reproduces the bytes exactly.

use std::collections::BTreeMap;
use std::path::Path;

use vapp_numcore::{Real, Tensor};

use super::config::ModelConfig;
use super::network::PromptVap;
use crate::error::{Result, VapError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VAPP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model<F: Real>(model: &PromptVap<F>) -> Self {
        Self {
            config: model.config().clone(),
            tensors: model
                .params()
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn to_model<F: Real>(&self) -> Result<PromptVap<F>> {
        let params = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect();
        PromptVap::from_params(self.config.clone(), params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.config.to_canonical());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                put_u32(&mut out, e as u32);
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(VapError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(VapError::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let text = r.string()?;
        let config = ModelConfig::from_canonical(&text)?;
        if config.to_canonical() != text {
            return Err(VapError::Format(
                "config block is not in canonical form".into(),
            ));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let name = r.string()?;
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(VapError::Format(format!(
                    "tensor {name} out of order or duplicated"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name.clone(), Tensor::new(&shape, data)?);
            last = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(VapError::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| VapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| VapError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            VapError::Format(m) => VapError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                VapError::Format(format!("truncated checkpoint at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| VapError::Format("name is not valid UTF-8".into()))
    }
}
