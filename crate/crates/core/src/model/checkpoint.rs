//! Binary parameter checkpoints.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! magic "SFRCKPT\0" | version | n_scales in_channels height width
//! feature_width main_depth sub_depth dim classes | tensor_count
//! per tensor: name_len name rank dims[rank] values[f64 LE; prod(dims)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFRCKPT\0";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint(params: &ModelParams, mut out: impl Write) -> Result<()> {
    let c = &params.config;
    let mut buf = Vec::with_capacity(64 + params.parameter_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, VERSION as usize)?;
    for v in [
        c.n_scales,
        c.in_channels,
        c.input_size.0,
        c.input_size.1,
        c.width,
        c.main_depth,
        c.sub_depth,
        c.dim,
        c.classes,
    ] {
        put_u32(&mut buf, v)?;
    }
    let tensors = params.params();
    put_u32(&mut buf, tensors.len())?;
    for p in tensors {
        put_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.shape.len())?;
        for &d in &p.shape {
            put_u32(&mut buf, d)?;
        }
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .and_then(|_| out.flush())
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(mut input: impl Read) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 9];
    for v in f.iter_mut() {
        *v = cur.u32()?;
    }
    let config = ModelConfig {
        n_scales: f[0],
        in_channels: f[1],
        input_size: (f[2], f[3]),
        width: f[4],
        main_depth: f[5],
        sub_depth: f[6],
        dim: f[7],
        classes: f[8],
    };
    let mut params = ModelParams::zeros(config)
        .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
    let count = cur.u32()?;
    let mut slots = params.params_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "config implies {} tensors, file has {count}",
            slots.len()
        )));
    }
    for slot in slots.iter_mut() {
        let name_len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != slot.name {
            return Err(Error::Checkpoint(format!("expected tensor `{}`, found `{name}`", slot.name)));
        }
        let rank = cur.u32()?;
        let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        if dims != slot.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {dims:?}, config implies {:?}",
                slot.shape
            )));
        }
        for v in slot.value.iter_mut() {
            *v = cur.f64()?;
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    drop(slots);
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
