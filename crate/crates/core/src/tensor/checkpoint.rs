//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MUST" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 bytes | rank: u32 | extents: rank × u64 | payload: f64 × product(extents)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MUST";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    params: &[(String, Tensor<T>)],
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.values() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 if filled == 0 => return Ok(false),
            0 => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "truncated record",
                ))
            }
            n => filled += n,
        }
    }
    Ok(true)
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let store = |e: std::io::Error| Error::Store(format!("checkpoint: {e}"));
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(store)?;
    if &head[..4] != MAGIC {
        return Err(Error::Store("checkpoint: bad magic".into()));
    }
    let version = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Store(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let mut out = Vec::new();
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    while read_exact_or_eof(&mut r, &mut b4).map_err(store)? {
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(store)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Store("checkpoint: parameter name is not utf-8".into()))?;
        r.read_exact(&mut b4).map_err(store)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b8).map_err(store)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8).map_err(store)?;
            values.push(T::lit(f64::from_le_bytes(b8)));
        }
        out.push((name, Tensor::new(shape, values)?));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, params: &[(String, Tensor<T>)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), params).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
