//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OCDD" | version: u32 | record*
//! record = name_len: u32 | name: utf-8 | rank: u32 | dims: u64 * rank | payload: f32 * prod(dims)
//! ```
//!
//! Records run to the end of the stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OCDD";
pub const CONTAINER_VERSION: u32 = 1;

pub fn write_container<W: Write>(mut w: W, tensors: &[(&str, &Tensor<f32>)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        write_record(&mut w, name, t)?;
    }
    w.flush()
}

pub fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Format("truncated tensor record".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Format(format!("read failed: {e}"))),
        }
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    if !read_exact_or_eof(r, &mut b)? {
        return Err(Error::Format("truncated tensor record".into()));
    }
    Ok(u32::from_le_bytes(b))
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    if !read_exact_or_eof(&mut r, &mut magic)? || &magic != MAGIC {
        return Err(Error::Format("missing OCDD magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "container version {version}, expected {CONTAINER_VERSION}"
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len)? {
            break;
        }
        let name_len = u32::from_le_bytes(len) as usize;
        if name_len > 1 << 16 {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        if !read_exact_or_eof(&mut r, &mut name)? && name_len > 0 {
            return Err(Error::Format("truncated tensor name".into()));
        }
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible rank {rank} for {name}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            if !read_exact_or_eof(&mut r, &mut b)? {
                return Err(Error::Format("truncated dims".into()));
            }
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; n * 4];
        if n > 0 && !read_exact_or_eof(&mut r, &mut payload)? {
            return Err(Error::Format(format!("missing payload for {name}")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_container(BufWriter::new(f), tensors).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_container(BufReader::new(f))
}
