//! Command implementations behind the `qtn` binary.
//!
//! Each command takes a parsed [`ExperimentConfig`] and an output
//! directory, writes its artifacts there, and echoes the fully resolved
//! config alongside them. All randomness flows from the config seed, so a
//! rerun with the same config produces byte-identical outputs except for
//! the `generated_at` timestamp in the JSON summary.

use crate::anomaly::{
    self, normal_quantile, DetectConfig, DetectMode, QuantileMaps,
};
use crate::bqr::{
    self, agreement_map, load_bqr, predict_regions, rater_quantile_regions, save_bqr, BqrModel,
    BqrTrainConfig, MultiRaterSample,
};
use crate::config::ExperimentConfig;
use crate::conformal::{self, ConformalCalibration};
use crate::container;
use crate::error::{Error, Result};
use crate::losses::QuantileLevel;
use crate::metrics;
use crate::pgm;
use crate::rng::Rng;
use crate::simdata::{self, LesionImageConfig, RaterConfig, TwoMoonConfig};
use crate::tensor::Tensor;
use crate::vae::{
    self, load_vae, predict_meanvar_maps, predict_quantile_maps, save_vae, HeadMode, TrainConfig,
    VaeModel,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Internal parallelism cap: `QTN_THREADS` if set, else the machine's
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("QTN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Applies `f` to every item, possibly across threads, preserving input
/// order in the output.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = thread_cap().min(items.len().max(1));
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let results: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn now_string() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{}", secs)
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved.txt"), cfg.to_config_string())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateSummary {
    command: &'static str,
    dataset: String,
    n: usize,
    seed: u64,
    generated_at: String,
}

/// Derives per-rater morphology radii: the first half of the raters
/// dilate the truth, the second half erode it, most permissive first.
fn rater_radii(raters: usize) -> Vec<i32> {
    let half = (raters as i32 + 1) / 2;
    (0..raters as i32)
        .map(|i| {
            let v = half - i;
            if v <= 0 {
                v - 1
            } else {
                v
            }
        })
        .collect()
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let data_path = out.join("data.qtn");
    match cfg.dataset.as_str() {
        "two_moon" => {
            let latents = simdata::two_moon_latent(&TwoMoonConfig {
                n: cfg.n,
                noise_std: cfg.noise_std,
                seed: cfg.seed,
            })?;
            let mut rng = Rng::new(cfg.seed).fork(1);
            let data = simdata::simulate_4d(&latents, &mut rng, cfg.shared_eps)?;
            container::write_container_file(
                &data_path,
                &[("data".into(), &data), ("latents".into(), &latents)],
            )?;
        }
        "lesion" => {
            let ds = simdata::synth_lesion_dataset(&LesionImageConfig {
                n: cfg.n,
                size: cfg.image_size,
                noise_std: cfg.noise_std,
                seed: cfg.seed,
                ..LesionImageConfig::default()
            })?;
            container::write_container_file(
                &data_path,
                &[("images".into(), &ds.images), ("masks".into(), &ds.masks)],
            )?;
        }
        "multirater" => {
            let ds = simdata::synth_lesion_dataset(&LesionImageConfig {
                n: cfg.n,
                size: cfg.image_size,
                noise_std: cfg.noise_std,
                seed: cfg.seed,
                ..LesionImageConfig::default()
            })?;
            let rater_cfg = RaterConfig {
                radii: rater_radii(cfg.raters),
                // the pixel-noise knob doubles as boundary flip probability
                flip_prob: cfg.noise_std.clamp(0.0, 0.5),
            };
            let root = Rng::new(cfg.seed).fork(1);
            let s = cfg.image_size;
            let mut stacked = Vec::with_capacity(cfg.n * cfg.raters * s * s);
            for i in 0..cfg.n {
                let truth = ds.masks.index_axis0(i)?;
                let mut rng = root.fork(i as u64);
                for m in simdata::synth_multirater(&truth, &rater_cfg, &mut rng)? {
                    stacked.extend_from_slice(m.data());
                }
            }
            let rater_masks = Tensor::new(vec![cfg.n, cfg.raters, s, s], stacked)?;
            container::write_container_file(
                &data_path,
                &[
                    ("images".into(), &ds.images),
                    ("truth".into(), &ds.masks),
                    ("rater_masks".into(), &rater_masks),
                ],
            )?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown dataset '{}': expected two_moon, lesion or multirater",
                other
            )))
        }
    }
    write_json(
        &out.join("manifest.json"),
        &SimulateSummary {
            command: "simulate",
            dataset: cfg.dataset.clone(),
            n: cfg.n,
            seed: cfg.seed,
            generated_at: now_string(),
        },
    )
}

fn require_data(cfg: &ExperimentConfig) -> Result<&PathBuf> {
    cfg.data
        .as_ref()
        .ok_or_else(|| Error::Config("config key 'data' is required for this command".into()))
}

fn require_model(cfg: &ExperimentConfig) -> Result<&PathBuf> {
    cfg.model
        .as_ref()
        .ok_or_else(|| Error::Config("config key 'model' is required for this command".into()))
}

fn read_record(records: &BTreeMap<String, Tensor>, name: &str, path: &Path) -> Result<Tensor> {
    records.get(name).cloned().ok_or_else(|| {
        Error::Format(format!(
            "dataset {} has no '{}' record (found: {:?})",
            path.display(),
            name,
            records.keys().collect::<Vec<_>>()
        ))
    })
}

/// Rater samples from a "multirater" container.
fn load_multirater(records: &BTreeMap<String, Tensor>, path: &Path) -> Result<Vec<MultiRaterSample>> {
    let images = read_record(records, "images", path)?;
    let rater_masks = read_record(records, "rater_masks", path)?;
    let n = images.shape()[0];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let image = images.index_axis0(i)?;
        let per_image = rater_masks.index_axis0(i)?;
        let r = per_image.shape()[0];
        let masks = (0..r)
            .map(|j| per_image.index_axis0(j))
            .collect::<Result<Vec<_>>>()?;
        samples.push(MultiRaterSample::new(image, masks)?);
    }
    Ok(samples)
}

#[derive(Serialize)]
struct TrainSummary {
    command: &'static str,
    mode: String,
    epochs: usize,
    final_loss: f64,
    generated_at: String,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let data_path = require_data(cfg)?;
    let records = container::read_container_file(data_path)?;
    let mut root = Rng::new(cfg.seed);
    let final_loss;
    match cfg.mode.as_str() {
        "vae" | "qrvae" => {
            let head_mode = if cfg.mode == "vae" {
                HeadMode::MeanVar
            } else {
                HeadMode::Quantiles {
                    alpha_lo: cfg.alpha_lo,
                    alpha_hi: cfg.alpha_hi,
                }
            };
            let (data, mut model) = if records.contains_key("data") {
                let data = read_record(&records, "data", data_path)?;
                let dim = *data.shape().last().unwrap();
                let m = VaeModel::dense(
                    dim,
                    cfg.hidden,
                    cfg.latent_dim,
                    head_mode,
                    &mut root.fork(1),
                )?;
                (data, m)
            } else {
                let images = read_record(&records, "images", data_path)?;
                let (n, s) = (images.shape()[0], cfg.image_size);
                let data = images.reshape(vec![n, 1, s, s])?;
                let m = VaeModel::conv(
                    s,
                    2,
                    cfg.base_channels,
                    cfg.latent_dim,
                    head_mode,
                    &mut root.fork(1),
                )?;
                (data, m)
            };
            let tc = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                kl_weight: cfg.kl_weight,
                seed: cfg.seed,
            };
            let history = if cfg.mode == "vae" {
                vae::train_vae(&data, &mut model, &tc)?
            } else {
                vae::train_qrvae(&data, &mut model, &tc)?
            };
            let mut csv = String::from("epoch,total,reconstruction,kl\n");
            for h in &history {
                writeln!(csv, "{},{},{},{}", h.epoch, h.total, h.reconstruction, h.kl)
                    .expect("string write");
            }
            std::fs::write(out.join("history.csv"), csv)?;
            save_vae(&model, &out.join("model"))?;
            final_loss = history.last().map(|h| h.total).unwrap_or(f64::NAN);
        }
        "bqr" => {
            let samples = load_multirater(&records, data_path)?;
            let size = samples
                .first()
                .map(|s| s.image.shape()[0])
                .ok_or_else(|| Error::InvalidArgument("empty multirater dataset".into()))?;
            let mut model = BqrModel::new(size, cfg.base_channels, &cfg.levels, &mut root.fork(1))?;
            let history = bqr::train_bqr(
                &samples,
                &mut model,
                &BqrTrainConfig {
                    epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    learning_rate: cfg.learning_rate,
                    warmup: cfg.warmup,
                    seed: cfg.seed,
                },
            )?;
            let mut csv = String::from("epoch,loss,warmup\n");
            for h in &history {
                writeln!(csv, "{},{},{}", h.epoch, h.loss, h.warmup).expect("string write");
            }
            std::fs::write(out.join("history.csv"), csv)?;
            save_bqr(&model, &out.join("model"))?;
            final_loss = history.last().map(|h| h.loss).unwrap_or(f64::NAN);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown train mode '{}': expected vae, qrvae or bqr",
                other
            )))
        }
    }
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            command: "train",
            mode: cfg.mode.clone(),
            epochs: cfg.epochs,
            final_loss,
            generated_at: now_string(),
        },
    )
}

/// Quantile maps from either model family; MeanVar moments are expressed
/// as a (alpha_lo, median) quantile pair so the detection path is shared.
fn model_quantile_maps(model: &VaeModel, x: &Tensor, alpha_lo: f64) -> Result<QuantileMaps> {
    match model.head_mode {
        HeadMode::Quantiles { .. } => predict_quantile_maps(model, x),
        HeadMode::MeanVar => {
            let m = predict_meanvar_maps(model, x)?;
            let z = normal_quantile(alpha_lo)?;
            let q_lo = m.mu.zip(&m.sigma, |mu, s| mu + z * s)?;
            Ok(QuantileMaps {
                q_lo,
                q_hi: m.mu,
                alpha_lo,
                alpha_hi: 0.5,
            })
        }
    }
}

pub fn cmd_calibrate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let data_path = require_data(cfg)?;
    let records = container::read_container_file(data_path)?;
    let cal = if let Some(scores) = records.get("scores") {
        conformal::calibrate(scores, cfg.alpha)?
    } else {
        let model = load_vae(require_model(cfg)?)?;
        let data = if records.contains_key("data") {
            read_record(&records, "data", data_path)?
        } else {
            let images = read_record(&records, "images", data_path)?;
            let (n, s) = (images.shape()[0], cfg.image_size);
            images.reshape(vec![n, 1, s, s])?
        };
        let n = data.shape()[0];
        if n == 0 {
            return Err(Error::InvalidArgument("empty calibration set".into()));
        }
        let idx: Vec<usize> = (0..n).collect();
        let per_sample = parallel_map(&idx, |&i| {
            let x = data.index_axis0(i)?;
            let maps = model_quantile_maps(&model, &x, cfg.alpha_lo)?;
            conformal::conformity_scores(&maps.q_lo, &maps.q_hi, &x)
        })?;
        let mut pooled = Vec::new();
        for t in per_sample {
            pooled.extend_from_slice(t.data());
        }
        conformal::calibrate(&Tensor::from_vec(pooled), cfg.alpha)?
    };
    write_json(&out.join("calibration.json"), &cal)
}

#[derive(Serialize)]
struct DetectSummary {
    command: &'static str,
    model_kind: String,
    n: usize,
    alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dice_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fdr_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dice_per_level: Option<Vec<f64>>,
    generated_at: String,
}

fn model_kind(prefix: &Path) -> Result<String> {
    let text = std::fs::read_to_string(prefix.with_extension("json")).map_err(|e| {
        Error::Config(format!(
            "cannot read model sidecar {}: {}",
            prefix.with_extension("json").display(),
            e
        ))
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    if v.get("kind").and_then(|k| k.as_str()) == Some("bqr") {
        return Ok("bqr".into());
    }
    match v.get("head_mode") {
        Some(hm) if hm.as_str() == Some("MeanVar") => Ok("vae".into()),
        Some(_) => Ok("qrvae".into()),
        None => Err(Error::Format(format!(
            "unrecognized model sidecar {}",
            prefix.with_extension("json").display()
        ))),
    }
}

pub fn cmd_detect(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let kind = model_kind(require_model(cfg)?)?;
    if kind == "bqr" {
        detect_bqr(cfg, out)
    } else {
        detect_vae(cfg, out, kind)
    }
}

fn detect_vae(cfg: &ExperimentConfig, out: &Path, kind: String) -> Result<()> {
    let data_path = require_data(cfg)?;
    let records = container::read_container_file(data_path)?;
    let images = read_record(&records, "images", data_path)?;
    let truth = records.get("masks").cloned();
    let model = load_vae(require_model(cfg)?)?;
    let conformal_cal: Option<ConformalCalibration> = match &cfg.calibration {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let (n, s) = (images.shape()[0], cfg.image_size);
    let detect_cfg = DetectConfig {
        mode: DetectMode::Gaussian,
        alpha: cfg.detect_alpha,
        median_window: cfg.median_window,
        conformal: conformal_cal,
    };
    let idx: Vec<usize> = (0..n).collect();
    let results = parallel_map(&idx, |&i| {
        let x = images.index_axis0(i)?.reshape(vec![1, s, s])?;
        let maps = model_quantile_maps(&model, &x, cfg.alpha_lo)?;
        let r = anomaly::detect(&x, &maps, &detect_cfg)?;
        let score = r
            .z_map
            .as_ref()
            .expect("gaussian mode emits a z-map")
            .map(f64::abs)
            .reshape(vec![s, s])?;
        Ok((r.mask.reshape(vec![s, s])?, score))
    })?;
    let pred = Tensor::stack(&results.iter().map(|(m, _)| m.clone()).collect::<Vec<_>>())?;
    let score = Tensor::stack(&results.iter().map(|(_, z)| z.clone()).collect::<Vec<_>>())?;
    let mut out_records: Vec<(String, &Tensor)> =
        vec![("pred".into(), &pred), ("score".into(), &score)];
    if let Some(t) = &truth {
        out_records.push(("truth".into(), t));
    }
    container::write_container_file(&out.join("masks.qtn"), &out_records)?;
    if n > 0 {
        pgm::write_mask_pgm(&out.join("pred_0000.pgm"), &pred.index_axis0(0)?)?;
        let scale = pgm::write_pgm(&out.join("score_0000.pgm"), &score.index_axis0(0)?)?;
        write_json(&out.join("score_0000.json"), &scale)?;
    }
    let mut csv = String::new();
    let (mut auc, mut dice_mean, mut fdr_mean) = (None, None, None);
    match &truth {
        Some(t) => {
            csv.push_str("image,dice,fdr\n");
            let mut dsum = 0.0;
            let mut fsum = 0.0;
            for i in 0..n {
                let d = metrics::dice(&pred.index_axis0(i)?, &t.index_axis0(i)?)?;
                let f = metrics::empirical_fdr(&pred.index_axis0(i)?, &t.index_axis0(i)?)?;
                writeln!(csv, "{},{},{}", i, d, f).expect("string write");
                dsum += d;
                fsum += f;
            }
            if n > 0 {
                dice_mean = Some(dsum / n as f64);
                fdr_mean = Some(fsum / n as f64);
                auc = Some(metrics::roc_auc(&score, t)?);
            }
        }
        None => {
            csv.push_str("image,rejected_fraction\n");
            for i in 0..n {
                let frac = pred.index_axis0(i)?.sum() / (s * s) as f64;
                writeln!(csv, "{},{}", i, frac).expect("string write");
            }
        }
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    write_json(
        &out.join("summary.json"),
        &DetectSummary {
            command: "detect",
            model_kind: kind,
            n,
            alpha: cfg.detect_alpha,
            auc,
            dice_mean,
            fdr_mean,
            dice_per_level: None,
            generated_at: now_string(),
        },
    )
}

fn detect_bqr(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data_path = require_data(cfg)?;
    let records = container::read_container_file(data_path)?;
    let samples = load_multirater(&records, data_path)?;
    let model = load_bqr(require_model(cfg)?)?;
    let n = samples.len();
    let levels = model.levels.clone();
    let segs = parallel_map(&samples, |s| predict_regions(&model, &s.image))?;
    let mut csv = String::from("image,level,dice\n");
    let mut dice_per_level = vec![0.0; levels.len()];
    let mut preds: Vec<Vec<Tensor>> = vec![Vec::with_capacity(n); levels.len()];
    let mut truths: Vec<Vec<Tensor>> = vec![Vec::with_capacity(n); levels.len()];
    for (i, (sample, seg)) in samples.iter().zip(&segs).enumerate() {
        let agreement = agreement_map(sample)?;
        for (li, &level) in levels.iter().enumerate() {
            let gt = rater_quantile_regions(&agreement, QuantileLevel::new(level)?);
            let d = metrics::dice(&seg.regions[li], &gt)?;
            writeln!(csv, "{},{},{}", i, level, d).expect("string write");
            dice_per_level[li] += d;
            preds[li].push(seg.regions[li].clone());
            truths[li].push(gt);
        }
    }
    if n > 0 {
        for d in &mut dice_per_level {
            *d /= n as f64;
        }
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    let mut stacked: Vec<(String, Tensor)> = Vec::new();
    for (li, &level) in levels.iter().enumerate() {
        stacked.push((format!("pred_tau_{:.3}", level), Tensor::stack(&preds[li])?));
        stacked.push((format!("truth_tau_{:.3}", level), Tensor::stack(&truths[li])?));
    }
    let refs: Vec<(String, &Tensor)> = stacked.iter().map(|(k, t)| (k.clone(), t)).collect();
    container::write_container_file(&out.join("regions.qtn"), &refs)?;
    if n > 0 {
        for (li, &level) in levels.iter().enumerate() {
            pgm::write_mask_pgm(
                &out.join(format!("region_tau_{:.3}_0000.pgm", level)),
                &segs[0].regions[li],
            )?;
        }
    }
    write_json(&out.join("levels.json"), &levels)?;
    write_json(
        &out.join("summary.json"),
        &DetectSummary {
            command: "detect",
            model_kind: "bqr".into(),
            n,
            alpha: cfg.detect_alpha,
            auc: None,
            dice_mean: None,
            fdr_mean: None,
            dice_per_level: Some(dice_per_level),
            generated_at: now_string(),
        },
    )
}

pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    if cfg.inputs.is_empty() {
        return Err(Error::Config(
            "config key 'inputs' must list at least one detect output directory".into(),
        ));
    }
    let mut table1 = String::from("variant,auc,dice_mean,fdr_mean\n");
    let mut table2 = String::from("variant,level,dice_mean\n");
    let (mut t1_rows, mut t2_rows) = (0usize, 0usize);
    for dir in &cfg.inputs {
        let summary_path = dir.join("summary.json");
        let text = std::fs::read_to_string(&summary_path).map_err(|e| {
            Error::Config(format!(
                "cannot read {} (was `detect` run into this directory?): {}",
                summary_path.display(),
                e
            ))
        })?;
        let summary: serde_json::Value = serde_json::from_str(&text)?;
        let kind = summary
            .get("model_kind")
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                Error::Format(format!("{} lacks a model_kind field", summary_path.display()))
            })?
            .to_string();
        if kind == "bqr" {
            let records = container::read_container_file(&dir.join("regions.qtn"))?;
            let levels: Vec<f64> =
                serde_json::from_str(&std::fs::read_to_string(dir.join("levels.json"))?)?;
            for &level in &levels {
                let pred = read_record(&records, &format!("pred_tau_{:.3}", level), dir)?;
                let gt = read_record(&records, &format!("truth_tau_{:.3}", level), dir)?;
                let n = pred.shape()[0];
                let mut dsum = 0.0;
                for i in 0..n {
                    dsum += metrics::dice(&pred.index_axis0(i)?, &gt.index_axis0(i)?)?;
                }
                let mean = if n > 0 { dsum / n as f64 } else { f64::NAN };
                writeln!(table2, "{},{},{}", kind, level, mean).expect("string write");
                t2_rows += 1;
            }
        } else {
            let records = container::read_container_file(&dir.join("masks.qtn"))?;
            let pred = read_record(&records, "pred", dir)?;
            let score = read_record(&records, "score", dir)?;
            let truth = read_record(&records, "truth", dir)?;
            let n = pred.shape()[0];
            let auc = metrics::roc_auc(&score, &truth)?;
            let mut dsum = 0.0;
            let mut fsum = 0.0;
            for i in 0..n {
                dsum += metrics::dice(&pred.index_axis0(i)?, &truth.index_axis0(i)?)?;
                fsum += metrics::empirical_fdr(&pred.index_axis0(i)?, &truth.index_axis0(i)?)?;
            }
            writeln!(
                table1,
                "{},{},{},{}",
                kind,
                auc,
                dsum / n as f64,
                fsum / n as f64
            )
            .expect("string write");
            t1_rows += 1;
        }
    }
    if t1_rows > 0 {
        std::fs::write(out.join("table1.csv"), table1)?;
    }
    if t2_rows > 0 {
        std::fs::write(out.join("table2.csv"), table2)?;
    }
    #[derive(Serialize)]
    struct EvalSummary {
        command: &'static str,
        table1_rows: usize,
        table2_rows: usize,
        generated_at: String,
    }
    write_json(
        &out.join("summary.json"),
        &EvalSummary {
            command: "eval",
            table1_rows: t1_rows,
            table2_rows: t2_rows,
            generated_at: now_string(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..57).collect();
        let out = parallel_map(&items, |&i| Ok(i * 3)).unwrap();
        assert_eq!(out, (0..57).map(|i| i * 3).collect::<Vec<_>>());
    }

    #[test]
    fn parallel_map_propagates_errors() {
        let items: Vec<usize> = (0..8).collect();
        let out = parallel_map(&items, |&i| {
            if i == 5 {
                Err(Error::InvalidArgument("boom".into()))
            } else {
                Ok(i)
            }
        });
        assert!(out.is_err());
    }

    #[test]
    fn rater_radii_are_signed_and_nested() {
        assert_eq!(rater_radii(4), vec![2, 1, -1, -2]);
        assert_eq!(rater_radii(2), vec![1, -1]);
        assert_eq!(rater_radii(3), vec![2, 1, -1]);
    }
}
