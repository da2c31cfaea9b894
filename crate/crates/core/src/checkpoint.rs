//! Binary tensor container shared by checkpoints and dataset files.
//!
//! Layout: magic (4 bytes), version `u32`, then entries until end of file:
//! name length `u32`, UTF-8 name, rank `u32`, one `u32` per extent, payload as
//! little-endian `f64`. All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UVML";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

/// Writes one named tensor entry.
pub fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, to_u32(name.len(), "name length")?)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, to_u32(t.shape().len(), "rank")?)?;
    for &d in t.shape() {
        write_u32(w, to_u32(d, "extent")?)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one named tensor entry; `Ok(None)` on a clean end of input.
pub fn read_tensor(r: &mut impl Read) -> Result<Option<(String, Tensor)>> {
    let mut first = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut first[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::Format("truncated entry header".into()));
        }
        got += n;
    }
    let name_len = u32::from_le_bytes(first) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::Format(format!("entry name: {e}")))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("entry {name}: rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("entry {name}: {e}")))?;
    Ok(Some((name, t)))
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut out, CHECKPOINT_VERSION)?;
    for (name, t) in store.iter() {
        write_tensor(&mut out, name, t)?;
    }
    Ok(out)
}

pub fn decode(mut bytes: &[u8]) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic).map_err(|_| Error::Format("missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut bytes)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParamStore::new(0);
    while let Some((name, t)) = read_tensor(&mut bytes)? {
        store.insert(&name, t)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&fs::read(path)?)
}
