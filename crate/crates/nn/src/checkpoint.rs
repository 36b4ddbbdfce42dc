//! `SBNN` parameter checkpoints.
//!
//! ```text
//! "SBNN" u16 version=1
//! u32 config_len  <config_len bytes of CnnConfig JSON>
//! u32 tensors
//! per tensor: u16 name_len <name> u8 trainable u8 rank u32[rank] f32[product]
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use biastrial_core::{io, Error, Result};
use sha2::{Digest, Sha256};

use crate::model::{CnnConfig, ModelParams, Tensor};
use crate::real::{real, Real};

pub const MAGIC: &[u8; 4] = b"SBNN";
const VERSION: u16 = 1;

pub fn encode<T: Real>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&params.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(u8::from(t.trainable));
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated SBNN checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    if bytes.len() < 32 {
        return Err(Error::Format("truncated SBNN checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("SBNN checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad SBNN magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SBNN version {version}")));
    }
    let len = r.u32()? as usize;
    let config: CnnConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let trainable = r.u8()? != 0;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw.chunks_exact(4).map(|c| real(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        tensors.push(Tensor { name, shape, data, trainable });
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in SBNN checkpoint".into()));
    }
    let params = ModelParams { config, tensors };
    let fresh = crate::model::init_params::<T>(&params.config, 0)?;
    let layout = |p: &ModelParams<T>| p.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect::<Vec<_>>();
    if layout(&fresh) != layout(&params) {
        return Err(Error::Format("SBNN tensor table does not match its config".into()));
    }
    Ok(params)
}

pub fn save<T: Real>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    io::write_file(path, &encode(params)?)
}

pub fn load<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    decode(&io::read_file(path)?)
}
