//! 8-bit binary PGM output for masks and maps.
//!
//! Maps are min-max scaled to 0..255; the scaling used is returned so the
//! caller can record it in a JSON sidecar.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Scaling applied when quantizing a map to 8 bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub min: f64,
    pub max: f64,
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<PgmScale> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "PGM output expects a 2-D map, got {:?}",
            shape
        )));
    }
    map.check_finite("PGM map")?;
    let (h, w) = (shape[0], shape[1]);
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-300);
    let mut buf = Vec::with_capacity(h * w + 32);
    write!(buf, "P5\n{} {}\n255\n", w, h)?;
    for &v in map.data() {
        let q = ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8;
        buf.push(q);
    }
    std::fs::write(path, buf)?;
    Ok(PgmScale { min, max })
}

/// Binary masks map 0 -> 0 and 1 -> 255 without rescaling.
pub fn write_mask_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "PGM output expects a 2-D mask, got {:?}",
            shape
        )));
    }
    if !mask.is_binary() {
        return Err(Error::InvalidArgument("mask must be binary".into()));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut buf = Vec::with_capacity(h * w + 32);
    write!(buf, "P5\n{} {}\n255\n", w, h)?;
    for &v in mask.data() {
        buf.push(if v == 1.0 { 255 } else { 0 });
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scale() {
        let dir = std::env::temp_dir().join("qtn_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.pgm");
        let map = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let scale = write_pgm(&path, &map).unwrap();
        assert_eq!(scale, PgmScale { min: 0.0, max: 5.0 });
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes[bytes.len() - 6..].to_vec(), vec![0, 51, 102, 153, 204, 255]);
    }
}
