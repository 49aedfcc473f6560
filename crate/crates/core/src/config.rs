//! Flat key=value experiment configuration.
//!
//! The format is deliberately plain: UTF-8 lines, `#` comments, one
//! `key = value` per line. Unknown keys are rejected so config drift is
//! caught instead of silently ignored, and every command echoes the fully
//! resolved config (defaults included) into its output directory.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Generator for `simulate`: "two_moon", "lesion" or "multirater".
    pub dataset: String,
    /// Trainer for `train`: "vae", "qrvae" or "bqr".
    pub mode: String,
    /// Sample count (points for two_moon, images otherwise).
    pub n: usize,
    pub noise_std: f64,
    /// Two-moon: share one noise draw across the four coordinates.
    pub shared_eps: bool,
    pub image_size: usize,
    pub raters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub latent_dim: usize,
    pub hidden: usize,
    pub base_channels: usize,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Conformal miscoverage level.
    pub alpha: f64,
    /// Benjamini-Hochberg level for detection.
    pub detect_alpha: f64,
    pub median_window: usize,
    /// Quantile levels for the multi-head segmentation net.
    pub levels: Vec<f64>,
    pub warmup: bool,
    /// Input dataset container (train/calibrate/detect).
    pub data: Option<PathBuf>,
    /// Model file prefix (train output, calibrate/detect input).
    pub model: Option<PathBuf>,
    /// Calibration JSON produced by `calibrate` (detect input, optional).
    pub calibration: Option<PathBuf>,
    /// Comma-separated detect output directories (`eval` input).
    pub inputs: Vec<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: "two_moon".into(),
            mode: "qrvae".into(),
            n: 500,
            noise_std: 0.05,
            shared_eps: false,
            image_size: 32,
            raters: 4,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            kl_weight: 1.0,
            latent_dim: 2,
            hidden: 48,
            base_channels: 8,
            alpha_lo: 0.15,
            alpha_hi: 0.5,
            alpha: 0.1,
            detect_alpha: 0.05,
            median_window: 7,
            levels: vec![0.125, 0.375, 0.625, 0.875],
            warmup: true,
            data: None,
            model: None,
            calibration: None,
            inputs: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key '{}': cannot parse '{}'", key, v)))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{}': expected true/false, got '{}'",
            key, v
        ))),
    }
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "mode" => self.mode = value.to_string(),
            "n" => self.n = parse_num(key, value)?,
            "noise_std" => self.noise_std = parse_num(key, value)?,
            "shared_eps" => self.shared_eps = parse_bool(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "raters" => self.raters = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "kl_weight" => self.kl_weight = parse_num(key, value)?,
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "base_channels" => self.base_channels = parse_num(key, value)?,
            "alpha_lo" => self.alpha_lo = parse_num(key, value)?,
            "alpha_hi" => self.alpha_hi = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "detect_alpha" => self.detect_alpha = parse_num(key, value)?,
            "median_window" => self.median_window = parse_num(key, value)?,
            "levels" => {
                self.levels = value
                    .split(',')
                    .map(|s| parse_num::<f64>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "warmup" => self.warmup = parse_bool(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "calibration" => self.calibration = Some(PathBuf::from(value)),
            "inputs" => {
                self.inputs = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| PathBuf::from(s.trim()))
                    .collect();
            }
            _ => return Err(Error::Config(format!("unknown config key '{}'", key))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{}'", lineno + 1, line))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{}'",
                    lineno + 1,
                    key
                )));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::parse_str(&text)
    }

    /// Full resolved key=value listing (defaults included), suitable for
    /// echoing into the output directory and for re-parsing.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("seed", self.seed.to_string());
        push("dataset", self.dataset.clone());
        push("mode", self.mode.clone());
        push("n", self.n.to_string());
        push("noise_std", format!("{}", self.noise_std));
        push("shared_eps", self.shared_eps.to_string());
        push("image_size", self.image_size.to_string());
        push("raters", self.raters.to_string());
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("learning_rate", format!("{}", self.learning_rate));
        push("kl_weight", format!("{}", self.kl_weight));
        push("latent_dim", self.latent_dim.to_string());
        push("hidden", self.hidden.to_string());
        push("base_channels", self.base_channels.to_string());
        push("alpha_lo", format!("{}", self.alpha_lo));
        push("alpha_hi", format!("{}", self.alpha_hi));
        push("alpha", format!("{}", self.alpha));
        push("detect_alpha", format!("{}", self.detect_alpha));
        push("median_window", self.median_window.to_string());
        push(
            "levels",
            self.levels
                .iter()
                .map(|l| format!("{}", l))
                .collect::<Vec<_>>()
                .join(","),
        );
        push("warmup", self.warmup.to_string());
        if let Some(p) = &self.data {
            push("data", p.display().to_string());
        }
        if let Some(p) = &self.model {
            push("model", p.display().to_string());
        }
        if let Some(p) = &self.calibration {
            push("calibration", p.display().to_string());
        }
        if !self.inputs.is_empty() {
            push(
                "inputs",
                self.inputs
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_config_string();
        let parsed = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ExperimentConfig::parse_str(
            "# experiment\n\nseed = 7   # rng\nn=12\n  epochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.n, 12);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, ExperimentConfig::default().batch_size);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::parse_str("learnin_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(ExperimentConfig::parse_str("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(ExperimentConfig::parse_str("seed 1").is_err());
        assert!(ExperimentConfig::parse_str("epochs = three").is_err());
        assert!(ExperimentConfig::parse_str("warmup = maybe").is_err());
    }

    #[test]
    fn level_and_input_lists_parse() {
        let cfg =
            ExperimentConfig::parse_str("levels = 0.1, 0.5 ,0.9\ninputs = a/b, c\n").unwrap();
        assert_eq!(cfg.levels, vec![0.1, 0.5, 0.9]);
        assert_eq!(cfg.inputs, vec![PathBuf::from("a/b"), PathBuf::from("c")]);
    }
}
