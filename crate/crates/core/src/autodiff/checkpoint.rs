//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"SSODPRM1"
//! version  u32      currently 1
//! meta_len u64      followed by that many UTF-8 bytes (JSON, may be empty)
//! count    u64      number of entries, in sorted name order
//! entry    repeated:
//!   name_len u32, name bytes
//!   ndim     u32, dims u64 * ndim
//!   values   f64 bit patterns as u64, row-major
//! ```
//!
//! Values round-trip bit-exactly because they are stored as raw bit
//! patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ParamSet;

const MAGIC: &[u8; 8] = b"SSODPRM1";
const VERSION: u32 = 1;

pub fn save(params: &ParamSet, path: &Path, meta: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, String)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {version}", path.display())));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta = String::from_utf8(meta_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: meta is not UTF-8", path.display())))?;

    let count = read_u64(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: entry name is not UTF-8", path.display())))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        params.insert(&name, Tensor::from_vec(&shape, data));
    }
    Ok((params, meta))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = crate::rng::stream(5, "ckpt-test", 0);
        let mut params = ParamSet::new();
        params.insert("trunk.conv1.w", Tensor::from_vec(&[2, 3], (0..6).map(|_| rng.gen::<f64>() * 3.0 - 1.5).collect()));
        params.insert("trunk.conv1.b", Tensor::from_vec(&[3], vec![0.1, -1e-300, 7e200]));
        params.insert("scalar", Tensor::scalar(-0.0));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        params.save(&path, "{\"kind\":\"test\"}").unwrap();
        let (loaded, meta) = ParamSet::load(&path).unwrap();
        assert_eq!(meta, "{\"kind\":\"test\"}");
        assert_eq!(loaded.len(), params.len());
        for ((an, at), (bn, bt)) in params.iter().zip(loaded.iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.shape(), bt.shape());
            for (x, y) in at.data().iter().zip(bt.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTRIGHTxxxxxxxxxxx").unwrap();
        assert!(ParamSet::load(&path).is_err());
    }
}
