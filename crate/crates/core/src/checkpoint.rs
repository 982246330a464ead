//! The `GCDM` model checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      b"GCDM"
//! version    u32 = 1
//! config     u32 × 6   d_in, d_model, tokens, heads, k_all, k_base
//! count      u32       number of tensors
//! tensors    count × { u32 name_len, name (UTF-8), u8 trainable,
//!                      u32 ndim, u64 × ndim dims, f64 × Π dims }
//! checksum   u64       FNV-1a 64 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::data::{fnv1a64, format_err, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const GCDM_MAGIC: &[u8; 4] = b"GCDM";
pub const GCDM_VERSION: u32 = 1;

pub fn encode_model(model: &ModelState) -> Vec<u8> {
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(GCDM_MAGIC);
    buf.extend_from_slice(&GCDM_VERSION.to_le_bytes());
    for v in [c.d_in, c.d_model, c.tokens, c.heads, c.k_all, c.k_base] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(u8::from(p.trainable));
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != GCDM_MAGIC {
        return Err(format_err(0, "magic", "expected GCDM"));
    }
    let at = r.pos();
    let version = r.u32("version")?;
    if version != GCDM_VERSION {
        return Err(format_err(at, "version", format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32("config")? as usize;
    }
    let config = ModelConfig {
        d_in: dims[0],
        d_model: dims[1],
        tokens: dims[2],
        heads: dims[3],
        k_all: dims[4],
        k_base: dims[5],
    };
    config
        .validate()
        .map_err(|e| format_err(8, "config", e.to_string()))?;
    let count = r.u32("count")? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let at = r.pos();
        let len = r.u32("name_len")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format_err(at + 4, "name", "not UTF-8"))?
            .to_string();
        let at = r.pos();
        let trainable = match r.u8("trainable")? {
            0 => false,
            1 => true,
            b => return Err(format_err(at, "trainable", format!("flag byte {b}"))),
        };
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(format_err(r.pos() - 4, "ndim", format!("{ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let at = r.pos();
        let n = match n {
            Some(n) if n.saturating_mul(8) <= bytes.len() - at => n,
            _ => return Err(format_err(at, "data", format!("tensor `{name}` of shape {shape:?} does not fit"))),
        };
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos();
            let v = r.f64("data")?;
            if !v.is_finite() {
                return Err(format_err(at, "data", format!("non-finite value in `{name}`")));
            }
            data.push(v);
        }
        params
            .insert(name, Tensor::new(shape, data)?, trainable)
            .map_err(|e| format_err(at, "name", e.to_string()))?;
    }
    r.finish_with_checksum()?;
    ModelState::from_params(config, params)
}

pub fn save_model(model: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
