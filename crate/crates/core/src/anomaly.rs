//! Turning quantile maps into detections.
//!
//! Pipeline pieces: Gaussian moment recovery from a (median, off-median
//! quantile) pair, z-scores, two-sided p-values, Benjamini-Hochberg FDR
//! thresholding, 7x7 median filtering, and the model-free interval mask.

use crate::conformal::{conformalize, ConformalCalibration};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

/// Sigma floor applied to degenerate (zero or negative width) pixels;
/// data is assumed scaled to [0, 1].
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "normal quantile needs p in (0,1), got {}",
            p
        )));
    }
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(n.inverse_cdf(p))
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Pixels where q_low >= q_med; their sigma was clamped to the floor.
    pub degenerate: Vec<usize>,
}

/// Recovers Gaussian (mu, sigma) from the median and a lower quantile:
/// mu = q_med, sigma = (q_med - q_low) / z*, z* = Phi^-1(1 - alpha_low).
/// For alpha_low = 0.15 the divisor is 1.0364.
pub fn quantiles_to_moments(q_med: &Tensor, q_low: &Tensor, alpha_low: f64) -> Result<Moments> {
    q_med.check_same_shape(q_low, "quantiles_to_moments")?;
    if !(alpha_low > 0.0 && alpha_low < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "alpha_low must be in (0, 0.5), got {}",
            alpha_low
        )));
    }
    let z_star = normal_quantile(1.0 - alpha_low)?;
    let mut sigma = Tensor::zeros(q_med.shape().to_vec());
    let mut degenerate = Vec::new();
    for i in 0..q_med.len() {
        let width = q_med.data()[i] - q_low.data()[i];
        if width <= 0.0 {
            degenerate.push(i);
            sigma.data_mut()[i] = SIGMA_FLOOR;
        } else {
            sigma.data_mut()[i] = (width / z_star).max(SIGMA_FLOOR);
        }
    }
    Ok(Moments {
        mu: q_med.clone(),
        sigma,
        degenerate,
    })
}

/// Elementwise (x - mu) / sigma.
pub fn zscore(x: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    x.check_same_shape(mu, "zscore")?;
    x.check_same_shape(sigma, "zscore")?;
    if sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument("zscore requires sigma > 0".into()));
    }
    x.zip(mu, |a, b| a - b)?.zip(sigma, |d, s| d / s)
}

/// Two-sided normal p-value: p = 2 (1 - Phi(|z|)) = erfc(|z| / sqrt(2)).
pub fn pvalue(z: &Tensor) -> Result<Tensor> {
    z.check_finite("pvalue input")?;
    Ok(z.map(|v| erfc(v.abs() / std::f64::consts::SQRT_2)))
}

/// Benjamini-Hochberg step-up: k* = max{k : p_(k) <= k alpha / m};
/// rejects all p <= p_(k*). Returns (threshold, binary mask); threshold
/// is 0 when nothing is rejected.
pub fn bh_fdr(p: &Tensor, alpha: f64) -> Result<(f64, Tensor)> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("bh_fdr on empty input".into()));
    }
    if p.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument("p-values must lie in [0,1]".into()));
    }
    let m = p.len();
    let mut sorted = p.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k_star = (1..=m)
        .rev()
        .find(|&k| sorted[k - 1] <= k as f64 * alpha / m as f64);
    let mask = match k_star {
        Some(k) => {
            let threshold = sorted[k - 1];
            (threshold, p.map(|v| if v <= threshold { 1.0 } else { 0.0 }))
        }
        None => (0.0, Tensor::zeros(p.shape().to_vec())),
    };
    Ok(mask)
}

/// Median filter with an odd square window and edge-replicated borders.
pub fn median_filter(map: &Tensor, window: usize) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "median_filter expects 2-D map, got {:?}",
            shape
        )));
    }
    if window % 2 == 0 {
        return Err(Error::InvalidArgument("window must be odd".into()));
    }
    let (h, w) = (shape[0], shape[1]);
    if window > h || window > w {
        return Err(Error::InvalidArgument(format!(
            "window {} larger than image {}x{}",
            window, h, w
        )));
    }
    let r = (window / 2) as isize;
    let mut out = Tensor::zeros(vec![h, w]);
    let mut buf = Vec::with_capacity(window * window);
    for y in 0..h as isize {
        for x in 0..w as isize {
            buf.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    buf.push(map.data()[yy * w + xx]);
                }
            }
            buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.data_mut()[y as usize * w + x as usize] = buf[buf.len() / 2];
        }
    }
    Ok(out)
}

/// Binary mask of pixels strictly outside [q_lo, q_hi] (boundary inclusive
/// counts as inside).
pub fn interval_mask(x: &Tensor, q_lo: &Tensor, q_hi: &Tensor) -> Result<Tensor> {
    x.check_same_shape(q_lo, "interval_mask")?;
    x.check_same_shape(q_hi, "interval_mask")?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        if x.data()[i] < q_lo.data()[i] || x.data()[i] > q_hi.data()[i] {
            out.data_mut()[i] = 1.0;
        }
    }
    Ok(out)
}

/// Detection mode: threshold directly on the quantile interval, or fit a
/// Gaussian from the quantile pair and control FDR on p-values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectMode {
    ModelFree,
    Gaussian,
}

/// Quantile maps feeding `detect`. `alpha_lo`/`alpha_hi` are the levels
/// the two maps estimate; Gaussian mode requires one of them to be 0.5.
#[derive(Debug, Clone)]
pub struct QuantileMaps {
    pub q_lo: Tensor,
    pub q_hi: Tensor,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
}

impl QuantileMaps {
    /// (mu, sigma) from whichever side is the median.
    pub fn to_moments(&self) -> Result<Moments> {
        if self.alpha_hi == 0.5 {
            quantiles_to_moments(&self.q_hi, &self.q_lo, self.alpha_lo)
        } else if self.alpha_lo == 0.5 {
            // mirrored: sigma = (q_hi - q_med) / Phi^-1(alpha_hi)
            let z_star = normal_quantile(self.alpha_hi)?;
            let mut sigma = Tensor::zeros(self.q_lo.shape().to_vec());
            let mut degenerate = Vec::new();
            for i in 0..self.q_lo.len() {
                let width = self.q_hi.data()[i] - self.q_lo.data()[i];
                if width <= 0.0 {
                    degenerate.push(i);
                    sigma.data_mut()[i] = SIGMA_FLOOR;
                } else {
                    sigma.data_mut()[i] = (width / z_star).max(SIGMA_FLOOR);
                }
            }
            Ok(Moments {
                mu: self.q_lo.clone(),
                sigma,
                degenerate,
            })
        } else {
            Err(Error::InvalidArgument(
                "Gaussian conversion requires one quantile level to be 0.5".into(),
            ))
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectConfig {
    pub mode: DetectMode,
    pub alpha: f64,
    /// Median filter window applied to the z-map; 0 disables.
    pub median_window: usize,
    pub conformal: Option<ConformalCalibration>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            mode: DetectMode::Gaussian,
            alpha: 0.05,
            median_window: 7,
            conformal: None,
        }
    }
}

/// z-map, p-map, FDR threshold and binary anomaly mask for one image.
/// z/p maps are absent in model-free mode.
#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub z_map: Option<Tensor>,
    pub p_map: Option<Tensor>,
    pub fdr_threshold: f64,
    pub mask: Tensor,
    pub degenerate_pixels: usize,
}

/// Full per-image detection from quantile maps.
pub fn detect(x: &Tensor, maps: &QuantileMaps, cfg: &DetectConfig) -> Result<DetectionResult> {
    let (q_lo, q_hi) = match &cfg.conformal {
        Some(cal) => conformalize(&maps.q_lo, &maps.q_hi, cal)?,
        None => (maps.q_lo.clone(), maps.q_hi.clone()),
    };
    match cfg.mode {
        DetectMode::ModelFree => {
            let mask = interval_mask(x, &q_lo, &q_hi)?;
            Ok(DetectionResult {
                z_map: None,
                p_map: None,
                fdr_threshold: 0.0,
                mask,
                degenerate_pixels: 0,
            })
        }
        DetectMode::Gaussian => {
            let adjusted = QuantileMaps {
                q_lo,
                q_hi,
                alpha_lo: maps.alpha_lo,
                alpha_hi: maps.alpha_hi,
            };
            let moments = adjusted.to_moments()?;
            let z = zscore(x, &moments.mu, &moments.sigma)?;
            let z = if cfg.median_window > 1 {
                median_filter(&z, cfg.median_window)?
            } else {
                z
            };
            let p = pvalue(&z)?;
            let flat = p.reshape(vec![p.len()])?;
            let (threshold, mask_flat) = bh_fdr(&flat, cfg.alpha)?;
            let mask = mask_flat.reshape(x.shape().to_vec())?;
            Ok(DetectionResult {
                z_map: Some(z),
                p_map: Some(p),
                fdr_threshold: threshold,
                mask,
                degenerate_pixels: moments.degenerate.len(),
            })
        }
    }
}
