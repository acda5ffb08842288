//! Versioned binary checkpoints: magic + version + config JSON + seed +
//! named f32 arrays with shapes and masks. Byte output is deterministic.

use crate::error::{Result, SamError};
use crate::model::{ModelConfig, ParamStore, SamModel};
use crate::tensor::DenseArray;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SAMCKPT\0";
pub const VERSION: u32 = 1;

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_bytes(out: &mut Vec<u8>, b: &[u8]) {
    write_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

/// Serializes a model to the checkpoint container.
pub fn encode_checkpoint(model: &SamModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, VERSION);
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| SamError::Format(format!("config serialization: {e}")))?;
    write_bytes(&mut out, &config);
    out.extend_from_slice(&model.seed.to_le_bytes());
    write_u32(&mut out, model.store.len() as u32);
    for p in model.store.iter() {
        write_bytes(&mut out, p.name.as_bytes());
        write_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            write_u32(&mut out, d as u32);
        }
        match &p.mask {
            None => out.push(0),
            Some(mask) => {
                out.push(1);
                out.extend(mask.iter().map(|&m| m as u8));
            }
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SamError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Parses a checkpoint; validates magic, version, shapes, finiteness and
/// the zero-block masks.
pub fn decode_checkpoint(buf: &[u8]) -> Result<SamModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(SamError::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SamError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| SamError::Format(format!("config block: {e}")))?;
    config.validate()?;
    let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| SamError::Format("non-UTF-8 parameter name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mask = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.take(len)?.iter().map(|&b| b != 0).collect::<Vec<bool>>()),
            f => return Err(SamError::Format(format!("bad mask flag {f}"))),
        };
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = DenseArray::new(shape, data)?;
        if !value.all_finite() {
            return Err(SamError::NonFinite(format!("checkpoint array {name}")));
        }
        store.add(&name, value, mask)?;
    }
    if r.pos != buf.len() {
        return Err(SamError::Format("trailing bytes in checkpoint".into()));
    }
    if !store.masks_hold() {
        return Err(SamError::Format(
            "checkpoint violates enforced-zero masks".into(),
        ));
    }
    Ok(SamModel { config, seed, store })
}

pub fn save_checkpoint(path: &Path, model: &SamModel) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SamModel> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
