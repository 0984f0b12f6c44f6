//! Versioned binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"UMDACKPT"                      8-byte magic
//! u32 version                      currently 1
//! u32 arch_len, arch_len bytes     architecture as UTF-8 `key = value` lines
//! u32 tensor_count
//! per tensor:
//!   u32 rank, rank x u64 extents
//!   product(extents) x f64 values, row-major
//! ```
//!
//! Tensors appear in [`Parameterized::parameters`] order.

use std::io::{Read, Write};
use std::path::Path;

use super::{ArchConfig, DetectorParams};
use crate::config::{KvMap, KvSection};
use crate::error::{Error, Result};
use crate::tensor::Parameterized;

const MAGIC: &[u8; 8] = b"UMDACKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &DetectorParams, mut out: W) -> std::io::Result<()> {
    let mut kv = KvMap::new();
    params.arch().write_kv("", &mut kv);
    let arch = kv.render();

    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(arch.len() as u32).to_le_bytes())?;
    out.write_all(arch.as_bytes())?;
    let tensors = params.parameters();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint; `origin` only labels error messages.
pub fn read_checkpoint<R: Read>(mut input: R, origin: &Path) -> Result<DetectorParams> {
    let bad = |msg: String| Error::format(origin, msg);
    let io = |e: std::io::Error| Error::format(origin, format!("truncated checkpoint: {e}"));

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a detector checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut input).map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let arch_len = read_u32(&mut input).map_err(io)? as usize;
    let mut arch_bytes = vec![0u8; arch_len];
    input.read_exact(&mut arch_bytes).map_err(io)?;
    let arch_text =
        String::from_utf8(arch_bytes).map_err(|_| bad("architecture block is not UTF-8".into()))?;
    let mut kv = KvMap::parse(&arch_text).map_err(|e| bad(e.to_string()))?;
    let arch = ArchConfig::from_kv("", &mut kv).map_err(|e| bad(e.to_string()))?;
    kv.finish().map_err(|e| bad(e.to_string()))?;

    let mut params = DetectorParams::zeros(&arch).map_err(|e| bad(e.to_string()))?;
    let count = read_u32(&mut input).map_err(io)? as usize;
    let names = params.parameter_names();
    if count != names.len() {
        return Err(bad(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            names.len()
        )));
    }
    for (tensor, name) in params.parameters_mut().into_iter().zip(names) {
        let rank = read_u32(&mut input).map_err(io)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut input).map_err(io)? as usize);
        }
        if shape != tensor.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                tensor.shape()
            )));
        }
        for v in tensor.data_mut() {
            *v = f64::from_bits(read_u64(&mut input).map_err(io)?);
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing).map_err(io)? != 0 {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &DetectorParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{init_detector, Activation};

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = ArchConfig {
            stream_channels: vec![2, 3],
            activation: Activation::Relu,
            init_scale: 0.7,
            ..ArchConfig::default()
        };
        let p = init_detector(&arch, 17).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.fingerprint(), q.fingerprint());
    }

    #[test]
    fn rejects_corruption() {
        let p = init_detector(&ArchConfig::default(), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&bad_magic[..], Path::new("m")).is_err());

        let mut bad_version = buf.clone();
        bad_version[8] = 9;
        assert!(read_checkpoint(&bad_version[..], Path::new("m")).is_err());

        assert!(read_checkpoint(&buf[..buf.len() - 3], Path::new("m")).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(&trailing[..], Path::new("m")).is_err());
    }
}
