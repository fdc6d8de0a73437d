//! Versioned binary checkpoints: header, named f64 tensors, optional Adam
//! state. Serialization is deterministic, so save → load → save is
//! byte-identical.

use crate::diff::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::episodes::TaskSpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::training::WorldParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"AMNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// What the header's JSON section records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Task the model was trained on, if known.
    pub task: Option<TaskSpec>,
    /// Synthetic-world settings the task environment was built with.
    #[serde(default)]
    pub world: Option<WorldParams>,
    /// Updates completed when the checkpoint was written.
    pub update: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

/// First 8 bytes of SHA-256 over the canonical config JSON.
pub fn config_hash(config: &ModelConfig) -> Result<[u8; 8]> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let digest = Sha256::digest(&json);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    Ok(out)
}

impl Checkpoint {
    pub fn new(model: &Model, task: Option<TaskSpec>, adam: Option<&AdamState>, update: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                model: model.config.clone(),
                task,
                world: None,
                update,
            },
            params: model.params.clone(),
            adam: adam.cloned(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.meta.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&config_hash(&self.meta.model)?);
        out.extend_from_slice(&(self.meta.model.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.meta.model.hidden_dim as u32).to_le_bytes());
        let json = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for t in a.m.iter().chain(&a.v) {
                    put_tensor(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hash: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
        let (embed, hidden) = (r.u32()? as usize, r.u32()? as usize);
        let json_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if config_hash(&meta.model)? != hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        if meta.model.embed_dim != embed || meta.model.hidden_dim != hidden {
            return Err(Error::Checkpoint("header dims disagree with config".into()));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            params.add(name, r.tensor()?);
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for _ in 0..count {
                    m.push(r.tensor()?);
                }
                for _ in 0..count {
                    v.push(r.tensor()?);
                }
                for (i, (_, _, p)) in params.iter().enumerate() {
                    if m[i].shape() != p.shape() || v[i].shape() != p.shape() {
                        return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
                    }
                }
                Some(AdamState { config, step, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read `{}`: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.shape().len() as u8);
    for &s in t.shape() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(self.u32()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(Error::Checkpoint("truncated tensor".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
