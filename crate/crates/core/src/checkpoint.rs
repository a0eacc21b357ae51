//! Binary checkpoint format.
//!
//! All integers and values are little-endian:
//!
//! ```text
//! magic      8 bytes  "KPDCKPT\0"
//! version    u32
//! step       u64
//! config     u32 length + UTF-8 JSON of the training config
//! params     tensor table
//! adam step  u64
//! adam m     tensor table
//! adam v     tensor table
//!
//! tensor table: u32 count, then per tensor
//!   u32 name length, name bytes, u32 rank, rank × u32 extents, f32 values
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::DeblurModel;
use crate::nn::ParamStore;
use crate::numerics::{AdamState, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"KPDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub opt: AdamState<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_table<'a>(
    out: &mut Vec<u8>,
    table: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>,
) {
    put_u32(out, table.len() as u32);
    for (name, t) in table {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn table(&mut self) -> Result<IndexMap<String, Tensor<f32>>> {
        let count = self.u32()?;
        let mut out = IndexMap::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let shape = (0..rank)
                .map(|_| self.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("extents of `{name}` overflow")))?;
            let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("extents of `{name}` overflow"))
            })?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
            if out.insert(name.clone(), t).is_some() {
                return Err(Error::CorruptCheckpoint(format!(
                    "duplicate tensor `{name}`"
                )));
            }
        }
        Ok(out)
    }
}

/// Every tensor must name a model parameter of the same shape.
fn check_against(
    table: &IndexMap<String, Tensor<f32>>,
    reference: &ParamStore<f32>,
    complete: bool,
) -> Result<()> {
    for (name, t) in table {
        let r = reference
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        if r.shape() != t.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                r.shape()
            )));
        }
    }
    if complete {
        if let Some((missing, _)) = reference.iter().find(|(n, _)| !table.contains_key(*n)) {
            return Err(Error::CorruptCheckpoint(format!(
                "missing parameter `{missing}`"
            )));
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        put_u32(&mut out, config.len() as u32);
        out.extend_from_slice(&config);
        put_table(&mut out, self.params.iter());
        out.extend_from_slice(&self.opt.step.to_le_bytes());
        put_table(&mut out, self.opt.m.iter().map(|(k, v)| (k.as_str(), v)));
        put_table(&mut out, self.opt.v.iter().map(|(k, v)| (k.as_str(), v)));
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())
            .map_err(|_| Error::CorruptCheckpoint("bad magic".into()))?
            != MAGIC
        {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
        let params = r.table()?;
        let opt_step = r.u64()?;
        let m = r.table()?;
        let v = r.table()?;
        if r.pos != buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        let reference: ParamStore<f32> = DeblurModel::new(config.model.clone())?.init_params(0);
        check_against(&params, &reference, true)?;
        check_against(&m, &reference, false)?;
        check_against(&v, &reference, false)?;
        let mut store = ParamStore::new();
        for (name, t) in params {
            store.insert(name, t);
        }
        Ok(Self {
            step,
            config,
            params: store,
            opt: AdamState {
                step: opt_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
