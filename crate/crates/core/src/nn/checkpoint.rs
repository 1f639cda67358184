//! `DVCK` checkpoint container.
//!
//! ```text
//! "DVCK" | version u16 | manifest_len u32 | manifest (UTF-8 JSON)
//!        | tensor_count u32
//!        | per tensor: name_len u16, name, rank u8, dims u32 × rank
//!        | per tensor, in manifest order: f32 × product(dims)
//! ```
//!
//! All integers and floats are little-endian. The manifest is free-form
//! JSON owned by the caller (the network config).

use std::io::{Read, Write};

use super::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(mut w: W, manifest: &str, store: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    w.write_all(&(store.params.len() as u32).to_le_bytes())?;
    for p in &store.params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.shape.len() as u8])?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for p in &store.params {
        for &v in &p.value {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::UnexpectedEnd("checkpoint"),
        _ => Error::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Returns the manifest and the tensors in manifest order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, Vec<CheckpointTensor>)> {
    let mut magic = [0; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a DVCK checkpoint".into()));
    }
    let version = read_u16(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mlen = read_u32(&mut r)? as usize;
    let mut mbuf = vec![0; mlen];
    read_exact(&mut r, &mut mbuf)?;
    let manifest = String::from_utf8(mbuf).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u16(&mut r)? as usize;
        let mut nbuf = vec![0; nlen];
        read_exact(&mut r, &mut nbuf)?;
        let name = String::from_utf8(nbuf).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let shape = (0..rank[0]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        tensors.push(CheckpointTensor { name, shape, values: Vec::new() });
    }
    for t in &mut tensors {
        let n: usize = t.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        read_exact(&mut r, &mut buf)?;
        t.values = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    }
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut store = ParamStore::default();
        store.add("a.weight", vec![2, 3], vec![0.5, -1.25, 2.0, 0.0, 3.5, -0.125]);
        store.add("a.bias", vec![3], vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"k\":1}", &store).unwrap();
        assert_eq!(&buf[..4], b"DVCK");
        let (m, t) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(m, "{\"k\":1}");
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].shape, vec![2, 3]);
        assert_eq!(t[0].values, store.params[0].value);
        assert_eq!(t[1].name, "a.bias");
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 1]), Err(Error::UnexpectedEnd(_))));
        assert!(matches!(read_checkpoint(&b"XXXX"[..]), Err(Error::Format(_))));
    }
}
