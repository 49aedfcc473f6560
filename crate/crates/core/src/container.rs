//! Binary tensor container.
//!
//! Layout: magic "QTN1" (4 bytes), record count (u32 LE), then per record
//! a u16 LE name length, the ASCII name, a u8 ndim, u64 LE dims and the
//! row-major f64 LE payload. Names must be unique within a file. Readers
//! fail closed on a bad magic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"QTN1";

/// Writes named tensors in the given order.
pub fn write_container<W: Write>(mut w: W, records: &[(String, &Tensor)]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in records {
        if !name.is_ascii() {
            return Err(Error::Format(format!("record name {:?} is not ASCII", name)));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate record name {:?}", name)));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, tensor) in records {
        if name.len() > u16::MAX as usize {
            return Err(Error::Format("record name too long".into()));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format("too many dimensions".into()));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_container_file(path: &Path, records: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, records)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads all records, preserving names.
pub fn read_container<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad container magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut count_buf = [0u8; 4];
    r.read_exact(&mut count_buf)?;
    let count = u32::from_le_bytes(count_buf);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        r.read_exact(&mut len_buf)?;
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("record name is not valid ASCII".into()))?;
        if !name.is_ascii() {
            return Err(Error::Format("record name is not valid ASCII".into()));
        }
        let mut ndim_buf = [0u8; 1];
        r.read_exact(&mut ndim_buf)?;
        let mut shape = Vec::with_capacity(ndim_buf[0] as usize);
        for _ in 0..ndim_buf[0] {
            let mut d = [0u8; 8];
            r.read_exact(&mut d)?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut v = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut v)?;
            data.push(f64::from_le_bytes(v));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate record name {:?}", name)));
        }
    }
    Ok(out)
}

pub fn read_container_file(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let data = std::fs::read(path)?;
    read_container(std::io::Cursor::new(data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f64::MIN_POSITIVE, 1e300, -0.0])
            .unwrap();
        let b = Tensor::scalar(42.0);
        let mut buf = Vec::new();
        write_container(&mut buf, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let out = read_container(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(out["a"], a);
        assert_eq!(out["b"], b);
    }

    #[test]
    fn empty_container_is_valid() {
        let mut buf = Vec::new();
        write_container(&mut buf, &[]).unwrap();
        let out = read_container(std::io::Cursor::new(buf)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn bad_magic_fails_closed() {
        let buf = b"NOPE\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            read_container(std::io::Cursor::new(buf)),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::scalar(1.0);
        let mut buf = Vec::new();
        assert!(write_container(&mut buf, &[("x".into(), &t), ("x".into(), &t)]).is_err());
    }
}
