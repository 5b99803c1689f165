//! Binary checkpoint format plus the `config.json` sidecar.
//!
//! Layout: magic `RVLT`, `u32` version, `u32` tensor count, then per
//! tensor a `u16`-prefixed UTF-8 name, dtype code `u8`, rank `u8`, `u32`
//! dims and the little-endian payload. Integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use revealtoy_tensor::{DType, Element, Tensor};

use super::config::RunConfig;
use super::params::ParamStore;
use super::train::Adam;
use crate::error::{io_err, json_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"RVLT";
pub const VERSION: u32 = 1;

const STEP_KEY: &str = "optim.step";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

pub fn encode_tensors<T: Element>(tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("cannot encode tensor {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(T::DTYPE.code());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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
}

/// Decodes a tensor file, converting stored values to `T`.
pub fn decode_tensors<T: Element>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype {code}")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let size = dtype.size_of();
        let payload = r.take(n.checked_mul(size).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?)?;
        let data: Vec<T> = payload
            .chunks(size)
            .map(|c| match dtype {
                DType::F32 => T::from_f64(f32::read_le(c) as f64),
                DType::F64 => T::from_f64(f64::read_le(c)),
            })
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub config: RunConfig,
    pub params: ParamStore<T>,
    pub optimizer: Adam<T>,
}

impl<T: Element> Checkpoint<T> {
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_file_name("config.json")
}

pub fn save_checkpoint<T: Element>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<T>)> = ckpt
        .params
        .iter()
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    let opt = &ckpt.optimizer;
    tensors.push((STEP_KEY.into(), Tensor::scalar(T::from_f64(opt.step as f64))));
    tensors.extend(opt.m.iter().map(|(k, t)| (format!("{M_PREFIX}{k}"), t.clone())));
    tensors.extend(opt.v.iter().map(|(k, t)| (format!("{V_PREFIX}{k}"), t.clone())));
    let bytes = encode_tensors(&tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    // write-then-rename so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&ckpt.config).map_err(json_err(&side))?;
    fs::write(&side, text).map_err(io_err(&side))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(json_err(&side))?;
    config.validate()?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut params = BTreeMap::new();
    let mut optimizer = Adam::new(&config.train);
    for (name, t) in decode_tensors::<T>(&bytes)? {
        if name == STEP_KEY {
            optimizer.step = t.data().first().map_or(0, |v| v.as_f64() as u64);
        } else if let Some(k) = name.strip_prefix(M_PREFIX) {
            optimizer.m.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix(V_PREFIX) {
            optimizer.v.insert(k.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    let params = ParamStore::from_tensors(&config.model, params)?;
    Ok(Checkpoint {
        config,
        params,
        optimizer,
    })
}

/// Short identifier for logs and the health endpoint: file stem and step.
pub fn checkpoint_id(path: &Path, step: u64) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    format!("{stem}@{step}")
}
