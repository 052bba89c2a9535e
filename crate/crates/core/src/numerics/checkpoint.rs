//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SAFM"  u32 version  u32 count
//! count x { u32 name_len, name (UTF-8), u32 rank, rank x u64 dim, numel x f32 }
//! ```
//!
//! Values are always written as `f32`, whatever precision the model runs at.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SAFM";
pub const VERSION: u32 = 1;

pub fn write_named<R: Real>(out: &mut impl Write, tensors: &[(&str, &Tensor<R>)]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read_named<R: Real>(input: &mut impl Read) -> Result<Vec<(String, Tensor<R>)>> {
    if &take::<4>(input)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a SAFM checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(input)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(input)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(input)?) as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(input)?) as usize;
        let shape = (0..rank)
            .map(|_| take::<8>(input).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input
            .read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated payload for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| R::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_store<R: Real>(store: &ParamStore<R>, path: &Path) -> Result<()> {
    let named: Vec<(&str, &Tensor<R>)> = store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    let mut buf = Vec::new();
    write_named(&mut buf, &named).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_store<R: Real>(store: &mut ParamStore<R>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let named = read_named(&mut bytes.as_slice())?;
    store.load_named(named)
}
