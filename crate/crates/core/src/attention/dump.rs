//! Little-endian binary dump of named tensors.
//!
//! Layout: magic `PPDUMP01`, `u32` tensor count, then per tensor a `u32`
//! name length, UTF-8 name, three `u64` dims and the `f64` values.

use std::io::{Read, Write};

use super::Tensor3;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PPDUMP01";

fn io(e: std::io::Error) -> Error {
    Error::Dump(e.to_string())
}

pub fn write_dump<W: Write>(mut w: W, tensors: &[(&str, &Tensor3)]) -> Result<()> {
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        for d in t.dims {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for x in &t.data {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(io)?;
    Ok(buf)
}

pub fn read_dump<R: Read>(mut r: R) -> Result<Vec<(String, Tensor3)>> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Dump("bad magic".into()));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| Error::Dump(e.to_string()))?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u64::from_le_bytes(read_array(&mut r)?) as usize;
        }
        let total = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Dump("shape overflow".into()))?;
        let mut data = Vec::with_capacity(total.min(1 << 24));
        for _ in 0..total {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        out.push((name, Tensor3 { dims, data }));
    }
    Ok(out)
}
