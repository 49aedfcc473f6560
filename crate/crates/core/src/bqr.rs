//! Multi-head binary quantile segmentation.
//!
//! A small encoder–decoder net with skip connections carries one output
//! head per quantile level. Each head's logit map is trained with the
//! smoothed binary-quantile objective against every rater's mask, after a
//! one-epoch weighted cross-entropy warm-up. Higher levels correspond to
//! higher required rater agreement, so predicted regions shrink as the
//! level grows and are post-processed to nest exactly.

use crate::error::{Error, Result};
use crate::losses::{self, QuantileLevel};
use crate::nn::{
    adam_step, backward, forward, init_params, Activation, InitScheme, Layer, NetworkSpec,
    NetworkState, ParamSet,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_LEVELS: [f64; 4] = [0.125, 0.375, 0.625, 0.875];

/// One image with R expert masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiRaterSample {
    pub image: Tensor,
    pub rater_masks: Vec<Tensor>,
}

impl MultiRaterSample {
    pub fn new(image: Tensor, rater_masks: Vec<Tensor>) -> Result<Self> {
        if rater_masks.is_empty() {
            return Err(Error::InvalidArgument("need at least one rater".into()));
        }
        if image.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "image must be 2-D, got shape {:?}",
                image.shape()
            )));
        }
        for (r, m) in rater_masks.iter().enumerate() {
            image.check_same_shape(m, "rater mask")?;
            if !m.is_binary() {
                return Err(Error::InvalidArgument(format!(
                    "rater {} mask is not binary",
                    r
                )));
            }
        }
        Ok(MultiRaterSample { image, rater_masks })
    }
}

/// Per-pixel fraction of raters marking the pixel; values in {0, 1/R, .., 1}.
pub fn agreement_map(sample: &MultiRaterSample) -> Result<Tensor> {
    let r = sample.rater_masks.len() as f64;
    let mut acc = Tensor::zeros(sample.image.shape().to_vec());
    for m in &sample.rater_masks {
        acc.add_assign(m)?;
    }
    acc.scale_assign(1.0 / r);
    Ok(acc)
}

/// Ground-truth region for a head at `level`: pixels where at least a
/// `level` fraction of raters agree. A small tolerance absorbs the
/// representation error of fractions like 1/3.
pub fn rater_quantile_regions(agreement: &Tensor, level: QuantileLevel) -> Tensor {
    agreement.map(|a| if a + 1e-9 >= level.value() { 1.0 } else { 0.0 })
}

/// One binary region per level, nested after enforcement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileSegmentation {
    pub levels: Vec<f64>,
    pub regions: Vec<Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BqrModel {
    pub spec: NetworkSpec,
    pub state: NetworkState,
    pub levels: Vec<f64>,
}

fn head_name(level: f64) -> String {
    format!("tau_{:.3}", level)
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("need at least one level".into()));
    }
    for w in levels.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidArgument(format!(
                "levels must be strictly increasing, got {:?}",
                levels
            )));
        }
    }
    for &l in levels {
        QuantileLevel::new(l)?;
    }
    Ok(())
}

/// Encoder–decoder segmentation backbone for square single-channel images:
/// two stride-2 down blocks, mirrored up path with skip concatenation, and
/// one 3x3 logit head per quantile level.
pub fn segmentation_net(size: usize, base_channels: usize, levels: &[f64]) -> Result<NetworkSpec> {
    check_levels(levels)?;
    if size % 4 != 0 || size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image size {} must be a multiple of 4 and at least 8",
            size
        )));
    }
    let c = base_channels;
    let trunk = vec![
        Layer::Conv2d { in_ch: 1, out_ch: c, kernel: 3, stride: 1, pad: 1 },
        Layer::Act(Activation::Relu),
        Layer::SkipSave(0),
        Layer::Conv2d { in_ch: c, out_ch: 2 * c, kernel: 3, stride: 2, pad: 1 },
        Layer::Act(Activation::Relu),
        Layer::SkipSave(1),
        Layer::Conv2d { in_ch: 2 * c, out_ch: 4 * c, kernel: 3, stride: 2, pad: 1 },
        Layer::Act(Activation::Relu),
        Layer::Upsample2x,
        Layer::SkipConcat(1),
        Layer::Conv2d { in_ch: 6 * c, out_ch: 2 * c, kernel: 3, stride: 1, pad: 1 },
        Layer::Act(Activation::Relu),
        Layer::Upsample2x,
        Layer::SkipConcat(0),
        Layer::Conv2d { in_ch: 3 * c, out_ch: c, kernel: 3, stride: 1, pad: 1 },
        Layer::Act(Activation::Relu),
    ];
    let heads = levels
        .iter()
        .map(|&l| {
            (
                head_name(l),
                vec![Layer::Conv2d { in_ch: c, out_ch: 1, kernel: 3, stride: 1, pad: 1 }],
            )
        })
        .collect::<Vec<_>>();
    NetworkSpec::new(vec![1, size, size], trunk, heads)
}

impl BqrModel {
    pub fn new(size: usize, base_channels: usize, levels: &[f64], rng: &mut Rng) -> Result<Self> {
        let spec = segmentation_net(size, base_channels, levels)?;
        let state = init_params(&spec, rng, InitScheme::FanInUniform)?;
        Ok(BqrModel {
            spec,
            state,
            levels: levels.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BqrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// First epoch uses weighted cross-entropy with a data-derived
    /// positive weight instead of the quantile objective.
    pub warmup: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BqrEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub warmup: bool,
}

fn image_input(image: &Tensor) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    image.reshape(vec![1, h, w])
}

/// Ratio of negative to positive pixels over all rater masks.
fn positive_weight(samples: &[MultiRaterSample]) -> Result<f64> {
    let mut pos = 0.0;
    let mut neg = 0.0;
    for s in samples {
        for m in &s.rater_masks {
            let p = m.sum();
            pos += p;
            neg += m.len() as f64 - p;
        }
    }
    if pos == 0.0 {
        return Err(Error::InvalidArgument(
            "training set has no positive pixels; cannot derive class weight".into(),
        ));
    }
    Ok(neg / pos)
}

/// Trains the multi-head net. Epoch 0 (when `warmup` is set) minimizes
/// weighted BCE against each rater mask; later epochs maximize the
/// smoothed quantile objective per head. A head at quantile level tau
/// should cover pixels where the rater-positive probability exceeds tau,
/// which is the smoothed objective evaluated at level 1 - tau.
pub fn train_bqr(
    samples: &[MultiRaterSample],
    model: &mut BqrModel,
    cfg: &BqrTrainConfig,
) -> Result<Vec<BqrEpochStats>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(
            "epochs, batch_size and learning_rate must be positive".into(),
        ));
    }
    let n_raters = samples[0].rater_masks.len();
    for s in samples {
        if s.rater_masks.len() != n_raters {
            return Err(Error::InvalidArgument(
                "all samples must have the same rater count".into(),
            ));
        }
        if s.image.shape() != samples[0].image.shape() {
            return Err(Error::ShapeMismatch(format!(
                "train_bqr images: expected {:?}, found {:?}",
                samples[0].image.shape(),
                s.image.shape()
            )));
        }
    }
    let pos_weight = positive_weight(samples)?;
    let objective_levels: Vec<QuantileLevel> = model
        .levels
        .iter()
        .map(|&l| QuantileLevel::new(1.0 - l))
        .collect::<Result<_>>()?;
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let warm = cfg.warmup && epoch == 0;
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamSet::zeros_like_spec(&model.spec)?;
            for &idx in batch {
                let sample = &samples[idx];
                let x = image_input(&sample.image)?;
                let cache = forward(&model.spec, &model.state, &x)?;
                let mut head_grads: BTreeMap<String, Tensor> = BTreeMap::new();
                for (li, &level) in model.levels.iter().enumerate() {
                    let name = head_name(level);
                    let logits = &cache.outputs[&name];
                    let mut grad = Tensor::zeros(logits.shape().to_vec());
                    for mask in &sample.rater_masks {
                        let labels = mask.reshape(logits.shape().to_vec())?;
                        let loss = if warm {
                            losses::weighted_bce(logits, &labels, pos_weight)?
                        } else {
                            losses::bqr_objective(logits, &labels, objective_levels[li])?
                        };
                        if !loss.value.is_finite() {
                            return Err(Error::Diverged {
                                epoch,
                                detail: format!("non-finite loss at head {}", name),
                            });
                        }
                        epoch_loss += loss.value;
                        grad.add_assign(&loss.grad)?;
                    }
                    head_grads.insert(name, grad);
                }
                let back = backward(&model.spec, &model.state, &cache, &head_grads)?;
                grads.add_assign(&back.params)?;
            }
            grads.scale_assign(1.0 / batch.len() as f64);
            adam_step(&mut model.state, &grads, cfg.learning_rate, 0.9, 0.999, 1e-8)?;
        }
        let denom = (samples.len() * n_raters * model.levels.len()) as f64;
        history.push(BqrEpochStats {
            epoch,
            loss: epoch_loss / denom,
            warmup: warm,
        });
    }
    // collapse check: if every head predicts strictly negative logits on
    // every training pixel, the net degenerated to the empty region
    let mut any_nonneg = false;
    'outer: for s in samples {
        let cache = forward(&model.spec, &model.state, &image_input(&s.image)?)?;
        for out in cache.outputs.values() {
            if out.data().iter().any(|&v| v >= 0.0) {
                any_nonneg = true;
                break 'outer;
            }
        }
    }
    if !any_nonneg {
        return Err(Error::Diverged {
            epoch: cfg.epochs - 1,
            detail: "all heads collapsed to the empty region on the training set".into(),
        });
    }
    Ok(history)
}

/// Intersects each region with the previous level's region so the
/// sequence nests exactly.
pub fn enforce_nesting(regions: &mut [Tensor]) -> Result<()> {
    for i in 1..regions.len() {
        let prev = regions[i - 1].clone();
        let cur = &mut regions[i];
        let merged = cur.zip(&prev, |a, b| a * b)?;
        *cur = merged;
    }
    Ok(())
}

/// Thresholds each head at logit 0 (the f = 0 boundary is included) and
/// enforces nesting across levels.
pub fn predict_regions(model: &BqrModel, image: &Tensor) -> Result<QuantileSegmentation> {
    let x = image_input(image)?;
    let cache = forward(&model.spec, &model.state, &x)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut regions = Vec::with_capacity(model.levels.len());
    for &level in &model.levels {
        let logits = &cache.outputs[&head_name(level)];
        let mask = logits
            .map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
            .reshape(vec![h, w])?;
        regions.push(mask);
    }
    enforce_nesting(&mut regions)?;
    Ok(QuantileSegmentation {
        levels: model.levels.clone(),
        regions,
    })
}

/// JSON sidecar stored next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BqrMeta {
    pub kind: String,
    pub levels: Vec<f64>,
    pub spec: NetworkSpec,
}

/// Writes `<prefix>.qtn` (parameters) and `<prefix>.json` (sidecar).
pub fn save_bqr(model: &BqrModel, prefix: &std::path::Path) -> Result<()> {
    let meta = BqrMeta {
        kind: "bqr".into(),
        levels: model.levels.clone(),
        spec: model.spec.clone(),
    };
    let mut records: Vec<(String, Tensor)> = Vec::new();
    model.state.params.for_each(|name, t| {
        records.push((name.to_string(), t.clone()));
    });
    let refs: Vec<(String, &Tensor)> = records.iter().map(|(n, t)| (n.clone(), t)).collect();
    crate::container::write_container_file(&prefix.with_extension("qtn"), &refs)?;
    std::fs::write(
        prefix.with_extension("json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

pub fn load_bqr(prefix: &std::path::Path) -> Result<BqrModel> {
    let meta: BqrMeta =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
    if meta.kind != "bqr" {
        return Err(Error::Format(format!(
            "expected a bqr model sidecar, found kind '{}'",
            meta.kind
        )));
    }
    let records = crate::container::read_container_file(&prefix.with_extension("qtn"))?;
    let mut rng = Rng::new(0);
    let mut state = init_params(&meta.spec, &mut rng, InitScheme::Zeros)?;
    let mut missing = Vec::new();
    state.params.for_each_mut(|name, t| match records.get(name) {
        Some(saved) if saved.shape() == t.shape() => *t = saved.clone(),
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "model file missing or mis-shaped records: {:?}",
            missing
        )));
    }
    Ok(BqrModel {
        spec: meta.spec,
        state,
        levels: meta.levels,
    })
}
