//! Synthetic data: the two-moon 4-D simulation, lesion-image stand-ins
//! with known ground truth, multi-rater mask synthesis, and a k-NN
//! Kullback-Leibler divergence estimator.
//!
//! All generators are bitwise reproducible from (config, seed); per-image
//! randomness comes from `Rng::fork` so images can be generated in any
//! order or in parallel.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoMoonConfig {
    pub n: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Points on two interleaved half-circles plus isotropic Gaussian jitter.
/// Moon A: (cos t, sin t); moon B: (1 - cos t, 0.5 - sin t); t ~ U[0, pi].
/// The first ceil(n/2) points belong to moon A.
pub fn two_moon_latent(cfg: &TwoMoonConfig) -> Result<Tensor> {
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("two_moon_latent needs n >= 1".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let n_a = cfg.n.div_ceil(2);
    let mut data = Vec::with_capacity(cfg.n * 2);
    for i in 0..cfg.n {
        let t = rng.uniform_in(0.0, std::f64::consts::PI);
        let (mut z1, mut z2) = if i < n_a {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        z1 += cfg.noise_std * rng.normal();
        z2 += cfg.noise_std * rng.normal();
        data.push(z1);
        data.push(z2);
    }
    Tensor::new(vec![cfg.n, 2], data)
}

/// Noiseless component of the 4-D map, shared with the noisy generator so
/// tests can re-evaluate it independently of the noise draws.
pub fn simulate_4d_mean(z1: f64, z2: f64) -> [f64; 4] {
    [
        z1 - z2,
        z1 * z1 - 0.5 * z2,
        z1 * z2 - z1,
        z1 + z2,
    ]
}

/// Per-coordinate noise standard deviations of the 4-D map.
pub fn simulate_4d_noise_std(z1: f64) -> [f64; 4] {
    [
        (0.03 + 0.05 * (3.0 + z1)).sqrt(),
        (0.03 + 0.03 * z1.abs()).sqrt(),
        (0.03 + 0.05 * z1.abs()).sqrt(),
        (0.03 + 0.03 / (0.02 + z1.abs())).sqrt(),
    ]
}

/// Maps n x 2 latents to n x 4 observations with heteroscedastic noise.
/// z1 is clipped to >= -3.6 so every radicand stays nonnegative. With
/// `shared_eps` one standard normal is reused across the four coordinates
/// of a point; otherwise each coordinate draws its own.
pub fn simulate_4d(latents: &Tensor, rng: &mut Rng, shared_eps: bool) -> Result<Tensor> {
    let shape = latents.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "simulate_4d expects n x 2 latents, got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let mut data = Vec::with_capacity(n * 4);
    for i in 0..n {
        let z1 = latents.data()[i * 2].max(-3.6);
        let z2 = latents.data()[i * 2 + 1];
        let mean = simulate_4d_mean(z1, z2);
        let std = simulate_4d_noise_std(z1);
        let shared = if shared_eps { rng.normal() } else { 0.0 };
        for c in 0..4 {
            let eps = if shared_eps { shared } else { rng.normal() };
            data.push(mean[c] + eps * std[c]);
        }
    }
    Tensor::new(vec![n, 4], data)
}

/// k-NN KL divergence estimate between two sample sets (Euclidean,
/// brute-force). Duplicate pairs closer than 1e-12 are excluded.
pub fn knn_kl(samples_p: &Tensor, samples_q: &Tensor, k: usize) -> Result<f64> {
    let (sp, sq) = (samples_p.shape(), samples_q.shape());
    if sp.len() != 2 || sq.len() != 2 || sp[1] != sq[1] {
        return Err(Error::ShapeMismatch(format!(
            "knn_kl expects n x d and m x d, got {:?} and {:?}",
            sp, sq
        )));
    }
    let (n, d) = (sp[0], sp[1]);
    let m = sq[0];
    if k == 0 || n <= k || m <= k {
        return Err(Error::InvalidArgument(format!(
            "knn_kl needs n, m > k >= 1, got n={} m={} k={}",
            n, m, k
        )));
    }
    const TIE_EPS: f64 = 1e-12;
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let kth_nearest = |point: &[f64], pool: &Tensor, skip: Option<usize>| -> Result<f64> {
        let rows = pool.shape()[0];
        let mut ds = Vec::with_capacity(rows);
        for j in 0..rows {
            if skip == Some(j) {
                continue;
            }
            let other = &pool.data()[j * d..(j + 1) * d];
            let dd = dist(point, other);
            if dd > TIE_EPS {
                ds.push(dd);
            }
        }
        if ds.len() < k {
            return Err(Error::InvalidArgument(
                "too many duplicate points for k-NN distance".into(),
            ));
        }
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(ds[k - 1])
    };
    let mut acc = 0.0;
    for i in 0..n {
        let point = &samples_p.data()[i * d..(i + 1) * d];
        let rho = kth_nearest(point, samples_p, Some(i))?;
        let nu = kth_nearest(point, samples_q, None)?;
        acc += (nu / rho).ln();
    }
    Ok((d as f64 / n as f64) * acc + (m as f64 / (n as f64 - 1.0)).ln())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionImageConfig {
    pub n: usize,
    pub size: usize,
    pub bumps: usize,
    /// iid Gaussian pixel noise on top of the smooth background.
    pub noise_std: f64,
    pub lesion_p: f64,
    pub lesion_intensity: (f64, f64),
    pub lesion_radius: (f64, f64),
    pub seed: u64,
}

impl Default for LesionImageConfig {
    fn default() -> Self {
        LesionImageConfig {
            n: 32,
            size: 32,
            bumps: 6,
            noise_std: 0.05,
            lesion_p: 1.0,
            lesion_intensity: (0.3, 0.5),
            lesion_radius: (3.0, 6.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LesionDataset {
    /// n x size x size images.
    pub images: Tensor,
    /// n x size x size binary lesion masks (empty when no lesion).
    pub masks: Tensor,
}

/// Smooth random-bump backgrounds, optionally with a planted elliptical
/// lesion of contrasting intensity; the mask records the exact ellipse
/// support. `lesion_p = 0` yields the anomaly-free training variant.
pub fn synth_lesion_dataset(cfg: &LesionImageConfig) -> Result<LesionDataset> {
    if cfg.lesion_radius.1 * 2.0 >= cfg.size as f64 {
        return Err(Error::InvalidArgument("lesion does not fit in image".into()));
    }
    let root = Rng::new(cfg.seed);
    let s = cfg.size;
    let mut images = Vec::with_capacity(cfg.n * s * s);
    let mut masks = Vec::with_capacity(cfg.n * s * s);
    for img_idx in 0..cfg.n {
        let mut rng = root.fork(img_idx as u64);
        // background: normalized sum of random smooth bumps
        let mut bg = vec![0.0f64; s * s];
        for _ in 0..cfg.bumps {
            let cx = rng.uniform_in(0.0, s as f64);
            let cy = rng.uniform_in(0.0, s as f64);
            let width = rng.uniform_in(s as f64 / 8.0, s as f64 / 3.0);
            let amp = rng.uniform_in(0.3, 1.0);
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    bg[y * s + x] += amp * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
        let lo = bg.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = bg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        // normalize to [0,1], then compress into [0.2, 0.7] to leave
        // headroom for noise and lesion contrast
        for v in bg.iter_mut() {
            *v = 0.2 + 0.5 * (*v - lo) / span;
        }
        for v in bg.iter_mut() {
            *v += cfg.noise_std * rng.normal();
        }
        let mut mask = vec![0.0f64; s * s];
        if rng.uniform() < cfg.lesion_p {
            let rx = rng.uniform_in(cfg.lesion_radius.0, cfg.lesion_radius.1);
            let ry = rng.uniform_in(cfg.lesion_radius.0, cfg.lesion_radius.1);
            let cx = rng.uniform_in(rx + 1.0, s as f64 - rx - 1.0);
            let cy = rng.uniform_in(ry + 1.0, s as f64 - ry - 1.0);
            let delta = rng.uniform_in(cfg.lesion_intensity.0, cfg.lesion_intensity.1);
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 - cx) / rx;
                    let v = (y as f64 - cy) / ry;
                    if u * u + v * v <= 1.0 {
                        bg[y * s + x] += delta;
                        mask[y * s + x] = 1.0;
                    }
                }
            }
        }
        images.extend_from_slice(&bg);
        masks.extend_from_slice(&mask);
    }
    Ok(LesionDataset {
        images: Tensor::new(vec![cfg.n, s, s], images)?,
        masks: Tensor::new(vec![cfg.n, s, s], masks)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaterConfig {
    /// Signed dilation radius per rater: positive dilates the truth,
    /// negative erodes. Listed from most to least permissive to keep the
    /// expected masks nested.
    pub radii: Vec<i32>,
    /// Probability of flipping each boundary-adjacent pixel.
    pub flip_prob: f64,
}

impl Default for RaterConfig {
    fn default() -> Self {
        RaterConfig {
            radii: vec![2, 1, -1, -2],
            flip_prob: 0.0,
        }
    }
}

fn morph_step(mask: &[f64], h: usize, w: usize, dilate: bool) -> Vec<f64> {
    let mut out = mask.to_vec();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut hit = false;
            for (dy, dx) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                let yy = y + dy;
                let xx = x + dx;
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                    // outside the image counts as background
                    if !dilate {
                        hit = true;
                    }
                    continue;
                }
                let v = mask[(yy * w as isize + xx) as usize];
                if dilate && v == 1.0 {
                    hit = true;
                } else if !dilate && v == 0.0 {
                    hit = true;
                }
            }
            if hit {
                out[(y * w as isize + x) as usize] = if dilate { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

fn boundary_pixels(mask: &[f64], h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v = mask[(y * w as isize + x) as usize];
            let mut edge = false;
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let yy = y + dy;
                let xx = x + dx;
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                    continue;
                }
                if mask[(yy * w as isize + xx) as usize] != v {
                    edge = true;
                }
            }
            if edge {
                out.push((y * w as isize + x) as usize);
            }
        }
    }
    out
}

/// Synthesizes one noisy expert mask per rater from a ground-truth mask:
/// morphological dilation/erosion by the rater's signed radius followed
/// by boundary flip noise.
pub fn synth_multirater(truth: &Tensor, cfg: &RaterConfig, rng: &mut Rng) -> Result<Vec<Tensor>> {
    let shape = truth.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "synth_multirater expects 2-D mask, got {:?}",
            shape
        )));
    }
    if !truth.is_binary() {
        return Err(Error::InvalidArgument("truth mask must be binary".into()));
    }
    if cfg.radii.is_empty() {
        return Err(Error::InvalidArgument("need at least one rater".into()));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(cfg.radii.len());
    for &radius in &cfg.radii {
        let mut mask = truth.data().to_vec();
        for _ in 0..radius.unsigned_abs() {
            mask = morph_step(&mask, h, w, radius > 0);
        }
        if cfg.flip_prob > 0.0 {
            for idx in boundary_pixels(&mask.clone(), h, w) {
                if rng.uniform() < cfg.flip_prob {
                    mask[idx] = 1.0 - mask[idx];
                }
            }
        }
        out.push(Tensor::new(vec![h, w], mask)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moon_parameterization_endpoints() {
        // noiseless: moon A at t = 0 is (1, 0); moon B at t = pi/2 is (1, -0.5)
        assert_eq!(simulate_4d_mean(0.0, 0.0), [0.0; 4]);
        let a = (0.0f64.cos(), 0.0f64.sin());
        assert_eq!(a, (1.0, 0.0));
        let t = std::f64::consts::FRAC_PI_2;
        let b = (1.0 - t.cos(), 0.5 - t.sin());
        assert!((b.0 - 1.0).abs() < 1e-15 && (b.1 + 0.5).abs() < 1e-15);
        // generator with zero noise lands exactly on the half circles
        let cfg = TwoMoonConfig {
            n: 10,
            noise_std: 0.0,
            seed: 3,
        };
        let z = two_moon_latent(&cfg).unwrap();
        for i in 0..5 {
            let (z1, z2) = (z.data()[2 * i], z.data()[2 * i + 1]);
            assert!((z1 * z1 + z2 * z2 - 1.0).abs() < 1e-12, "moon A point off circle");
            assert!(z2 >= 0.0);
        }
        for i in 5..10 {
            let (z1, z2) = (z.data()[2 * i], z.data()[2 * i + 1]);
            let (u, v) = (z1 - 1.0, z2 - 0.5);
            assert!((u * u + v * v - 1.0).abs() < 1e-12, "moon B point off circle");
            assert!(z2 <= 0.5);
        }
    }

    #[test]
    fn two_moon_seed_reproducible() {
        let cfg = TwoMoonConfig {
            n: 100,
            noise_std: 0.1,
            seed: 5,
        };
        assert_eq!(two_moon_latent(&cfg).unwrap(), two_moon_latent(&cfg).unwrap());
    }

    #[test]
    fn simulate_4d_noiseless_values() {
        // z = (1, 2), eps = 0 -> (-1, 0, 1, 3)
        assert_eq!(simulate_4d_mean(1.0, 2.0), [-1.0, 0.0, 1.0, 3.0]);
        // noise std of v1 at z1 = 0: sqrt(0.18)
        let std = simulate_4d_noise_std(0.0);
        assert!((std[0] - 0.18f64.sqrt()).abs() < 1e-12);
        assert!((std[0] - 0.42426).abs() < 1e-5);
    }

    #[test]
    fn simulate_4d_mean_matches_reevaluation() {
        // the noiseless component of the generator equals an independent
        // re-evaluation of the four formulas
        let mut rng = Rng::new(7);
        let n = 1000;
        let latents = Tensor::new(
            vec![n, 2],
            (0..2 * n).map(|_| 2.0 * rng.normal()).collect(),
        )
        .unwrap();
        let mut noise_rng = Rng::new(8);
        let noisy = simulate_4d(&latents, &mut noise_rng, false).unwrap();
        let mut zero_rng = Rng::new(8);
        // reconstruct the eps draws to subtract the noise exactly
        for i in 0..n {
            let z1 = latents.data()[2 * i].max(-3.6);
            let z2 = latents.data()[2 * i + 1];
            let mean = [
                z1 - z2,
                z1 * z1 - z2 / 2.0,
                z1 * z2 - z1,
                z1 + z2,
            ];
            let std = simulate_4d_noise_std(z1);
            for c in 0..4 {
                let eps = zero_rng.normal();
                let expect = mean[c] + eps * std[c];
                assert!(
                    (noisy.data()[4 * i + c] - expect).abs() < 1e-12,
                    "mismatch at sample {i} coord {c}"
                );
            }
        }
    }

    #[test]
    fn knn_kl_self_divergence_near_zero() {
        let mut rng = Rng::new(10);
        let n = 2000;
        let p = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
        let d = knn_kl(&p, &p, 5).unwrap();
        assert!(d.abs() < 0.1, "self divergence {d}");
    }

    #[test]
    fn knn_kl_gaussian_shift_matches_analytic() {
        // KL( N(0,1) || N(1,1) ) = 0.5
        let mut rng = Rng::new(11);
        let n = 5000;
        let p = Tensor::new(vec![n, 1], (0..n).map(|_| rng.normal()).collect()).unwrap();
        let q = Tensor::new(vec![n, 1], (0..n).map(|_| 1.0 + rng.normal()).collect()).unwrap();
        let d = knn_kl(&p, &q, 5).unwrap();
        assert!((d - 0.5).abs() < 0.1, "estimate {d}");
    }

    #[test]
    fn knn_kl_rejects_small_samples() {
        let p = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(knn_kl(&p, &p, 5).is_err());
    }

    #[test]
    fn lesion_dataset_mask_probabilities() {
        let mut cfg = LesionImageConfig {
            n: 16,
            seed: 1,
            ..Default::default()
        };
        cfg.lesion_p = 0.0;
        let clean = synth_lesion_dataset(&cfg).unwrap();
        assert_eq!(clean.masks.sum(), 0.0);
        cfg.lesion_p = 1.0;
        let lesioned = synth_lesion_dataset(&cfg).unwrap();
        for i in 0..cfg.n {
            assert!(lesioned.masks.index_axis0(i).unwrap().sum() > 0.0);
        }
    }

    #[test]
    fn lesion_dataset_reproducible() {
        let cfg = LesionImageConfig {
            n: 4,
            seed: 9,
            ..Default::default()
        };
        let a = synth_lesion_dataset(&cfg).unwrap();
        let b = synth_lesion_dataset(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.masks, b.masks);
    }

    fn disk_mask(s: usize, r: f64) -> Tensor {
        let c = s as f64 / 2.0;
        let mut m = Tensor::zeros(vec![s, s]);
        for y in 0..s {
            for x in 0..s {
                if (x as f64 - c).powi(2) + (y as f64 - c).powi(2) <= r * r {
                    m.data_mut()[y * s + x] = 1.0;
                }
            }
        }
        m
    }

    #[test]
    fn multirater_zero_noise_zero_radius_is_identity() {
        let truth = disk_mask(16, 4.0);
        let cfg = RaterConfig {
            radii: vec![0, 0, 0],
            flip_prob: 0.0,
        };
        let mut rng = Rng::new(1);
        for m in synth_multirater(&truth, &cfg, &mut rng).unwrap() {
            assert_eq!(m, truth);
        }
    }

    #[test]
    fn multirater_signed_radii_are_nested() {
        let truth = disk_mask(24, 6.0);
        let cfg = RaterConfig::default(); // radii (2, 1, -1, -2), no flips
        let mut rng = Rng::new(1);
        let masks = synth_multirater(&truth, &cfg, &mut rng).unwrap();
        for w in masks.windows(2) {
            for i in 0..w[0].len() {
                assert!(
                    w[1].data()[i] <= w[0].data()[i],
                    "mask not nested at pixel {i}"
                );
            }
        }
    }

    #[test]
    fn multirater_agreement_forms_concentric_bands() {
        let truth = disk_mask(24, 6.0);
        let cfg = RaterConfig::default();
        let mut rng = Rng::new(1);
        let masks = synth_multirater(&truth, &cfg, &mut rng).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..truth.len() {
            let a: f64 = masks.iter().map(|m| m.data()[i]).sum::<f64>() / 4.0;
            seen.insert((a * 4.0).round() as i64);
        }
        // all five agreement values appear
        assert_eq!(seen, (0..=4).collect());
    }
}
