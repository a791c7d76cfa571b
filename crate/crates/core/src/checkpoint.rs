//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        5 bytes   "ACTV1"
//! arch         u32       Arch::tag
//! ps d_model n_blocks d_mlp d_token_mlp heads n_classes      u32 × 7
//! pos_embed stream_norm final_norm gelu(0 exact, 1 tanh)     u32 × 4
//! seed         u64
//! n_records    u32
//! n_records × { name_len u32, name (UTF-8), rank u32, extents u32 × rank, f32 × numel }
//! ```
//!
//! Records appear in parameter-store order. Values are always stored as
//! 32-bit floats whatever the in-memory precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Arch, ClassifierModel, ModelConfig};
use crate::tensor::{GeluKind, Real, Tensor};

pub const MAGIC: &[u8; 5] = b"ACTV1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Parsed container, before it is matched against a model structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &ClassifierModel<T>) -> Self {
        Self {
            config: model.config.clone(),
            records: model
                .store
                .iter()
                .map(|p| Record {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|v| v.to_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    /// Total scalar count over all records.
    pub fn numel(&self) -> usize {
        self.records.iter().map(|r| r.values.len()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + self.numel() * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, c.arch.tag());
        for v in [c.ps, c.d_model, c.n_blocks, c.d_mlp, c.d_token_mlp, c.heads, c.n_classes] {
            put_u32(&mut out, to_u32(v, "config field")?);
        }
        for flag in [c.pos_embed, c.stream_norm, c.final_norm] {
            put_u32(&mut out, flag as u32);
        }
        put_u32(
            &mut out,
            match c.gelu {
                GeluKind::Exact => 0,
                GeluKind::Tanh => 1,
            },
        );
        out.extend_from_slice(&c.seed.to_le_bytes());
        put_u32(&mut out, to_u32(self.records.len(), "record count")?);
        for r in &self.records {
            put_u32(&mut out, to_u32(r.name.len(), "name length")?);
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, to_u32(r.shape.len(), "rank")?);
            for &d in &r.shape {
                put_u32(&mut out, to_u32(d, "extent")?);
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an ACTV1 checkpoint".into()));
        }
        let tag = r.u32()?;
        let arch = Arch::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown arch tag {tag}")))?;
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let mut flags = [false; 3];
        for f in &mut flags {
            *f = match r.u32()? {
                0 => false,
                1 => true,
                other => return Err(Error::Checkpoint(format!("flag value {other} is not 0/1"))),
            };
        }
        let gelu = match r.u32()? {
            0 => GeluKind::Exact,
            1 => GeluKind::Tanh,
            other => return Err(Error::Checkpoint(format!("unknown gelu tag {other}"))),
        };
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = ModelConfig {
            arch,
            ps: dims[0],
            d_model: dims[1],
            n_blocks: dims[2],
            d_mlp: dims[3],
            d_token_mlp: dims[4],
            heads: dims[5],
            n_classes: dims[6],
            pos_embed: flags[0],
            stream_norm: flags[1],
            final_norm: flags[2],
            gelu,
            seed,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("header describes an invalid model: {e}")))?;
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("extents of `{name}` overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(Record { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, records })
    }

    /// Rebuild the model structure from the header and fill in every parameter.
    pub fn into_model<T: Real>(self) -> Result<ClassifierModel<T>> {
        let mut model = ClassifierModel::<T>::build(&self.config)?;
        if self.records.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} records, model expects {}",
                self.records.len(),
                model.store.len()
            )));
        }
        for rec in self.records {
            let id = model
                .store
                .find(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", rec.name)))?;
            let param = model.store.get_mut(id);
            if param.value.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    rec.name,
                    rec.shape,
                    param.value.shape()
                )));
            }
            param.value = Tensor::new(&rec.shape, rec.values.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        }
        Ok(model)
    }
}

pub fn save<T: Real>(model: &ClassifierModel<T>, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_model(model).encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    Checkpoint::decode(&bytes)
}

pub fn load<T: Real>(path: &Path) -> Result<ClassifierModel<T>> {
    read(path)?.into_model()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
