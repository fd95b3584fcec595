//! `EPCK` checkpoints: a JSON metadata header followed by one record per
//! parameter tensor.
//!
//! Layout (little endian): `b"EPCK"`, `u32` version, `u64` metadata length,
//! metadata JSON, `u32` record count, then per record: `u16` module length,
//! module, `u16` name length, name, `u8` group (0 backbone, 1 main), `u8`
//! rank, `u64` per dimension, `f64` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autodiff::Tensor;
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};

const MAGIC: &[u8; 4] = b"EPCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub iterations_done: usize,
    pub skipped_steps: usize,
    /// Fusion-schedule time the model is evaluated at.
    pub schedule_time: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::with_params(self.meta.config.model.clone(), self.store.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::with_capacity(64 + meta.len() + self.store.numel() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            for s in [&p.module, &p.name] {
                let len = u16::try_from(s.len())
                    .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {s}")))?;
                buf.extend_from_slice(&len.to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
            buf.push(match p.group {
                ParamGroup::Backbone => 0,
                ParamGroup::Main => 1,
            });
            buf.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "EPCK");
        if r.take(4)? != MAGIC {
            return Err(r.err(0, "bad magic".into()));
        }
        let v_off = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(v_off, format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta_off = r.pos;
        if meta_len > r.remaining() {
            return Err(r.err(meta_off, format!("metadata length {meta_len} exceeds file")));
        }
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| r.err(meta_off, format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let rec = r.pos;
            let mut text = || -> Result<String> {
                let len = r.u16()? as usize;
                let off = r.pos;
                let raw = r.take(len)?;
                String::from_utf8(raw.to_vec()).map_err(|_| r.err(off, "name is not utf-8".into()))
            };
            let module = text()?;
            let name = text()?;
            let group = match r.u8()? {
                0 => ParamGroup::Backbone,
                1 => ParamGroup::Main,
                g => return Err(r.err(r.pos - 1, format!("unknown parameter group {g}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            match numel {
                Some(n) if n.checked_mul(8).is_some_and(|b| b <= r.remaining()) => {
                    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    if store.find(&module, &name).is_some() {
                        return Err(r.err(rec, format!("duplicate parameter {module}.{name}")));
                    }
                    store.add(&module, &name, group, Tensor::new(shape, data)?);
                }
                _ => return Err(r.err(rec, format!("tensor {module}.{name} {shape:?} exceeds file"))),
            }
        }
        if r.remaining() != 0 {
            return Err(r.err(r.pos, "trailing bytes after last record".into()));
        }
        Ok(Self { meta, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
