//! Binary checkpoint container.
//!
//! ```text
//! "GTWF"  u32 version
//! repeated: u8 tag, u64 payload length, payload
//!   1  config text (UTF-8)
//!   2  iteration (u64)
//!   3  parameter: u32 name length, name, u8 dtype tag, u32 rank,
//!      u64 extents…, little-endian values
//!   4  optimizer: u64 step, u32 slot count, per slot u64 length then
//!      first and second moments as f64
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use gastwin_tensor::{DType, Real};

use crate::config::{parse_config, ModelConfig};
use crate::error::{Error, Result};
use crate::model::GasTwinFormer;
use crate::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"GTWF";
pub const VERSION: u32 = 1;

const TAG_CONFIG: u8 = 1;
const TAG_ITER: u8 = 2;
const TAG_PARAM: u8 = 3;
const TAG_OPTIM: u8 = 4;

fn record(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Serializes a model (and optionally its optimizer) to bytes.
pub fn encode<T: Real>(model: &GasTwinFormer<T>, optim: Option<&AdamW>, iteration: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    record(
        &mut out,
        TAG_CONFIG,
        model.config.to_config_text().as_bytes(),
    );
    record(&mut out, TAG_ITER, &iteration.to_le_bytes());
    for p in model.named_params() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(T::DTYPE.tag());
        buf.extend_from_slice(&(p.tensor.ndim() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data().iter() {
            v.write_le(&mut buf);
        }
        record(&mut out, TAG_PARAM, &buf);
    }
    if let Some(o) = optim {
        let mut buf = Vec::new();
        buf.extend_from_slice(&o.step.to_le_bytes());
        buf.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
        for (m, v) in o.m.iter().zip(&o.v) {
            buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        record(&mut out, TAG_OPTIM, &buf);
    }
    out
}

pub fn save<T: Real>(
    path: &Path,
    model: &GasTwinFormer<T>,
    optim: Option<&AdamW>,
    iteration: u64,
) -> Result<()> {
    fs::write(path, encode(model, optim, iteration)).map_err(|e| Error::io(path, e))
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
            .ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// A stored parameter before it is matched to a model.
#[derive(Clone, Debug)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    raw: Vec<u8>,
}

/// AdamW step count and first/second moments, one vector per parameter.
pub type OptimState = (u64, Vec<Vec<f64>>, Vec<Vec<f64>>);

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: u64,
    pub params: Vec<StoredTensor>,
    pub optim: Option<OptimState>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let (mut config, mut iteration, mut params, mut optim) = (None, 0, Vec::new(), None);
    while !r.done() {
        let tag = r.u8()?;
        let len = r.u64()? as usize;
        let mut p = Reader {
            buf: r.take(len)?,
            pos: 0,
        };
        match tag {
            TAG_CONFIG => {
                let text = std::str::from_utf8(p.buf)
                    .map_err(|_| Error::Data("checkpoint config is not UTF-8".into()))?;
                config = Some(parse_config(text)?);
            }
            TAG_ITER => iteration = p.u64()?,
            TAG_PARAM => {
                let n = p.u32()? as usize;
                let name = String::from_utf8(p.take(n)?.to_vec())
                    .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
                let tag = p.u8()?;
                let dtype = DType::from_tag(tag)
                    .ok_or_else(|| Error::Data(format!("{name}: unknown dtype tag {tag}")))?;
                let rank = p.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| p.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let count: usize = shape.iter().product();
                let raw = p.take(count * dtype.size_of())?.to_vec();
                let values = match dtype {
                    DType::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                        .collect(),
                    DType::F64 => raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                };
                params.push(StoredTensor {
                    name,
                    dtype,
                    shape,
                    values,
                    raw,
                });
            }
            TAG_OPTIM => {
                let step = p.u64()?;
                let slots = p.u32()? as usize;
                let (mut ms, mut vs) = (Vec::with_capacity(slots), Vec::with_capacity(slots));
                for _ in 0..slots {
                    let n = p.u64()? as usize;
                    ms.push((0..n).map(|_| p.f64()).collect::<Result<Vec<_>>>()?);
                    vs.push((0..n).map(|_| p.f64()).collect::<Result<Vec<_>>>()?);
                }
                optim = Some((step, ms, vs));
            }
            // Unknown records are skipped for forward compatibility.
            _ => {}
        }
    }
    Ok(Checkpoint {
        config: config.ok_or_else(|| Error::Data("checkpoint has no config record".into()))?,
        iteration,
        params,
        optim,
    })
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rebuilds the model and copies every stored tensor into it. Values are
    /// copied bit-for-bit when the stored dtype matches `T`, otherwise
    /// converted.
    pub fn model<T: Real>(&self) -> Result<GasTwinFormer<T>> {
        let model = GasTwinFormer::<T>::new(&self.config)?;
        let params = model.named_params();
        if params.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&self.params) {
            if p.name != s.name || p.tensor.shape() != s.shape.as_slice() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    s.name,
                    s.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            let mut data = p.tensor.data_mut();
            if s.dtype == T::DTYPE {
                for (d, c) in data.iter_mut().zip(s.raw.chunks_exact(s.dtype.size_of())) {
                    *d = T::read_le(c);
                }
            } else {
                for (d, &v) in data.iter_mut().zip(&s.values) {
                    *d = T::of(v);
                }
            }
        }
        Ok(model)
    }

    /// Optimizer state, if stored, bound to the checkpoint's config.
    pub fn optimizer(&self) -> Option<AdamW> {
        self.optim.as_ref().map(|(step, m, v)| AdamW {
            cfg: self.config.optim.clone(),
            step: *step,
            m: m.clone(),
            v: v.clone(),
        })
    }
}

/// Loads a model of precision `T` from a checkpoint file.
pub fn load<T: Real>(path: &Path) -> Result<(GasTwinFormer<T>, Checkpoint)> {
    let ckpt = Checkpoint::read(path)?;
    Ok((ckpt.model()?, ckpt))
}
