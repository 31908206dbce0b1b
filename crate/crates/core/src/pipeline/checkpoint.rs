//! `MDCK` checkpoints: little-endian header, the model configuration as
//! text, a named tensor table and a trailing CRC32 over everything before
//! it.
//!
//! Tensor entries: name length u16, UTF-8 name, dtype u8, rank u8, dims
//! u32 each, raw buffer. Parameters are stored as `param/<name>`, AdamW
//! moments as `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};
use crate::temporal::Reader;

const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    /// Training steps taken.
    pub step: u64,
    pub params: Vec<(String, Tensor<T>)>,
    /// AdamW `(m, v)` per parameter, in parameter order.
    pub moments: Option<(Vec<Tensor<T>>, Vec<Tensor<T>>)>,
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn get_tensor<T: Scalar>(r: &mut Reader) -> Result<(String, Tensor<T>, usize)> {
    let start = r.pos;
    let len = r.u16("name length")? as usize;
    let name_at = r.pos;
    let name = std::str::from_utf8(r.take(len, "tensor name")?)
        .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?
        .to_string();
    let dtype_at = r.pos;
    let dtype = DType::from_code(r.u8("dtype")?).ok_or_else(|| Error::format(dtype_at, "unknown dtype code"))?;
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dimension")? as usize);
    }
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
    let data = r.elements::<T>(dtype, count, &name)?;
    Ok((name, Tensor::from_vec(&shape, data)?, start))
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of a model and, optionally, its optimizer.
    pub fn capture(model: &Model<T>, opt: Option<&AdamW<T>>, step: u64) -> Self {
        Checkpoint {
            config: model.cfg,
            step,
            params: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            moments: opt.map(|o| (o.m.clone(), o.v.clone())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let n = self.params.len() * if self.moments.is_some() { 3 } else { 1 };
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_tensor(&mut out, &format!("param/{name}"), t);
        }
        if let Some((m, v)) = &self.moments {
            for ((name, _), t) in self.params.iter().zip(m) {
                put_tensor(&mut out, &format!("adam.m/{name}"), t);
            }
            for ((name, _), t) in self.params.iter().zip(v) {
                put_tensor(&mut out, &format!("adam.v/{name}"), t);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, step, mut r) = open(bytes)?;
        let count = r.u32("entry count")? as usize;
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let (name, t, at) = get_tensor::<T>(&mut r)?;
            if let Some(p) = name.strip_prefix("param/") {
                if !m.is_empty() || !v.is_empty() {
                    return Err(Error::format(at, format!("parameter {p} after optimizer moments")));
                }
                if params.iter().any(|(q, _)| q == p) {
                    return Err(Error::format(at, format!("duplicate parameter {p}")));
                }
                params.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix("adam.m/") {
                expect_moment(&params, m.len(), p, &t, at)?;
                m.push(t);
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                if m.len() != params.len() {
                    return Err(Error::format(at, "second moments before all first moments"));
                }
                expect_moment(&params, v.len(), p, &t, at)?;
                v.push(t);
            } else {
                return Err(Error::format(at, format!("unknown entry {name}")));
            }
        }
        if r.pos != bytes.len() - 4 {
            return Err(Error::format(r.pos, "trailing bytes before checksum"));
        }
        let moments = match (m.len(), v.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some((m, v)),
            _ => return Err(Error::format(r.pos, "incomplete optimizer moments")),
        };
        Ok(Checkpoint {
            config,
            step,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and writes every stored tensor into it.
    pub fn to_model(&self) -> Result<Model<T>> {
        let mut model = Model::build(self.config, 0)?;
        let mut seen = vec![false; model.store.len()];
        for (name, t) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::format(0, format!("checkpoint tensor {name} is not a model parameter")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::format(
                    0,
                    format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = &model.store.get(crate::numerics::ParamId(i)).name;
            return Err(Error::format(0, format!("missing tensor {name}")));
        }
        Ok(model)
    }

    /// Optimizer state aligned with `model`'s parameter order.
    pub fn to_optimizer(&self, model: &Model<T>, weight_decay: f64) -> Result<AdamW<T>> {
        let mut opt = AdamW::new(&model.store, weight_decay);
        if let Some((m, v)) = &self.moments {
            for (i, (name, _)) in self.params.iter().enumerate() {
                let id = model
                    .store
                    .id(name)
                    .ok_or_else(|| Error::format(0, format!("unknown parameter {name}")))?;
                opt.m[id.0] = m[i].clone();
                opt.v[id.0] = v[i].clone();
            }
            opt.step = self.step;
        }
        Ok(opt)
    }
}

fn expect_moment<T: Scalar>(params: &[(String, Tensor<T>)], index: usize, name: &str, t: &Tensor<T>, at: usize) -> Result<()> {
    match params.get(index) {
        Some((p, v)) if p == name && v.shape() == t.shape() => Ok(()),
        _ => Err(Error::format(at, format!("moment {name} does not match parameter {index}"))),
    }
}

/// Checks magic, version and CRC; returns the config, step and a reader
/// positioned at the entry count.
fn open(bytes: &[u8]) -> Result<(ModelConfig, u64, Reader<'_>)> {
    if bytes.len() < 4 + 2 + 8 + 4 + 4 + 4 {
        return Err(Error::format(bytes.len(), "file too short for a checkpoint"));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("four bytes"));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::format(
            body,
            format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}"),
        ));
    }
    let mut r = Reader::new(&bytes[..body]);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected MDCK"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let step = r.u64("step")?;
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::format(at, "config is not UTF-8"))?;
    let config = ModelConfig::from_text(text).map_err(|e| Error::format(at, format!("config: {e}")))?;
    Ok((config, step, r))
}

/// Model configuration of a checkpoint without decoding its tensors.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    open(bytes).map(|(c, _, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default().with_channels(16);
        c.backbone.depth = 1;
        c
    }

    #[test]
    fn bytes_round_trip_and_reject_corruption() {
        let model = Model::<f32>::build(small(), 1).unwrap();
        let opt = AdamW::new(&model.store, 1e-4);
        let ck = Checkpoint::capture(&model, Some(&opt), 7);
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 7);
        assert_eq!(back.to_model().unwrap().store.checksum(), model.store.checksum());

        let mut bad = bytes.clone();
        bad[100] ^= 0x20;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format { offset, .. }) if offset == bytes.len() - 4));
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }
}
