//! Binary model files: `RXF1`, a format version, a length-prefixed JSON
//! header, then every tensor in declaration order as a `u32` element count
//! followed by little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Ablation, Model};
use super::params::{Layout, ModelConfig};
use crate::corpus::TokenVocab;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RXF1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: TokenVocab,
    relations: Vec<String>,
    ablation: Ablation,
    nrc_threshold: f64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("unexpected end of file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            relations: self.relations.clone(),
            ablation: self.ablation,
            nrc_threshold: self.nrc_threshold,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.layout.tensors {
            out.extend_from_slice(&(t.seg.len as u32).to_le_bytes());
            for v in t.seg.of(&self.params) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Model> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a model file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| bad(format!("bad header: {e}")))?;
        header.config.validate()?;
        let mut model = Model::new(header.config, header.vocab, header.relations, header.ablation)?;
        model.nrc_threshold = header.nrc_threshold;
        let layout: &Layout = &model.layout;
        let mut params = vec![0.0; layout.total];
        for t in &layout.tensors {
            let count = r.u32()? as usize;
            if count != t.seg.len {
                return Err(bad(format!(
                    "tensor {} has {count} values, expected {} for shape {:?}",
                    t.name, t.seg.len, t.shape
                )));
            }
            let raw = r.take(4 * count)?;
            for (dst, chunk) in t.seg.of_mut(&mut params).iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            }
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&buf)
    }

    /// Rounds every parameter to `f32`, the precision of saved files.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }
}
