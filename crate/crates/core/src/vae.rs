//! Baseline mean-variance VAE and the quantile-regression VAE.
//!
//! Both share one architecture: an encoder emitting the posterior mean
//! and log-variance, a reparameterized latent sample, and a decoder with
//! two named heads sharing the trunk. In `MeanVar` mode the heads are the
//! Gaussian likelihood parameters and training minimizes NLL + KL; in
//! `Quantiles` mode the heads are a low/high quantile pair and training
//! minimizes the joint pinball loss + KL.

use crate::anomaly::{Moments, QuantileMaps};
use crate::container;
use crate::error::{Error, Result};
use crate::losses;
use crate::losses::QuantileLevel;
use crate::nn::{
    self, adam_step, backward, forward, init_params, Activation, InitScheme, Layer, NetworkSpec,
    NetworkState, ParamSet,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Decoder log-variance clamp for the MeanVar baseline; keeps the
/// shrinkage pathology observable instead of producing NaNs.
pub const LOGVAR_CLAMP: (f64, f64) = (-20.0, 5.0);

pub const ENC_MU: &str = "mu";
pub const ENC_LOGVAR: &str = "logvar";
pub const DEC_MEAN: &str = "mean";
pub const DEC_LOGVAR: &str = "logvar";
pub const DEC_Q_LO: &str = "q_lo";
pub const DEC_Q_HI: &str = "q_hi";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadMode {
    MeanVar,
    Quantiles { alpha_lo: f64, alpha_hi: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeModel {
    pub encoder_spec: NetworkSpec,
    pub decoder_spec: NetworkSpec,
    pub encoder: NetworkState,
    pub decoder: NetworkState,
    pub latent_dim: usize,
    pub head_mode: HeadMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.kl_weight < 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive and kl_weight nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch loss record; `total = reconstruction + kl_weight * kl`
/// exactly (all averaged per sample).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl VaeModel {
    pub fn head_mode_levels(&self) -> Result<(QuantileLevel, QuantileLevel)> {
        match self.head_mode {
            HeadMode::Quantiles { alpha_lo, alpha_hi } => Ok((
                QuantileLevel::new(alpha_lo)?,
                QuantileLevel::new(alpha_hi)?,
            )),
            HeadMode::MeanVar => Err(Error::InvalidArgument(
                "model is in MeanVar mode, not Quantiles".into(),
            )),
        }
    }

    pub fn data_shape(&self) -> &[usize] {
        &self.encoder_spec.input_shape
    }

    fn head_names(&self) -> (&'static str, &'static str) {
        match self.head_mode {
            HeadMode::MeanVar => (DEC_MEAN, DEC_LOGVAR),
            HeadMode::Quantiles { .. } => (DEC_Q_LO, DEC_Q_HI),
        }
    }

    /// Fully-connected architecture for vector data.
    pub fn dense(
        data_dim: usize,
        hidden: usize,
        latent_dim: usize,
        head_mode: HeadMode,
        rng: &mut Rng,
    ) -> Result<VaeModel> {
        check_head_mode(&head_mode)?;
        let encoder_spec = NetworkSpec::new(
            vec![data_dim],
            vec![
                Layer::Dense {
                    input: data_dim,
                    output: hidden,
                },
                Layer::Act(Activation::Relu),
                Layer::Dense {
                    input: hidden,
                    output: hidden,
                },
                Layer::Act(Activation::Relu),
            ],
            vec![
                (
                    ENC_MU.into(),
                    vec![Layer::Dense {
                        input: hidden,
                        output: latent_dim,
                    }],
                ),
                (
                    ENC_LOGVAR.into(),
                    vec![Layer::Dense {
                        input: hidden,
                        output: latent_dim,
                    }],
                ),
            ],
        )?;
        let (h0, h1) = match head_mode {
            HeadMode::MeanVar => (DEC_MEAN, DEC_LOGVAR),
            HeadMode::Quantiles { .. } => (DEC_Q_LO, DEC_Q_HI),
        };
        let head = |_: &str| {
            vec![Layer::Dense {
                input: hidden,
                output: data_dim,
            }]
        };
        let decoder_spec = NetworkSpec::new(
            vec![latent_dim],
            vec![
                Layer::Dense {
                    input: latent_dim,
                    output: hidden,
                },
                Layer::Act(Activation::Relu),
                Layer::Dense {
                    input: hidden,
                    output: hidden,
                },
                Layer::Act(Activation::Relu),
            ],
            vec![(h0.into(), head(h0)), (h1.into(), head(h1))],
        )?;
        let encoder = init_params(&encoder_spec, rng, InitScheme::FanInUniform)?;
        let decoder = init_params(&decoder_spec, rng, InitScheme::FanInUniform)?;
        Ok(VaeModel {
            encoder_spec,
            decoder_spec,
            encoder,
            decoder,
            latent_dim,
            head_mode,
        })
    }

    /// Convolutional architecture for single-channel square images.
    /// `blocks` stride-2 conv blocks down, mirrored up; data heads carry a
    /// sigmoid (inputs assumed scaled to [0, 1]), variance heads do not.
    pub fn conv(
        size: usize,
        blocks: usize,
        base_channels: usize,
        latent_dim: usize,
        head_mode: HeadMode,
        rng: &mut Rng,
    ) -> Result<VaeModel> {
        check_head_mode(&head_mode)?;
        if blocks == 0 || size % (1 << blocks) != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be divisible by 2^{}",
                size, blocks
            )));
        }
        let mut enc_trunk = Vec::new();
        let mut ch = 1;
        for b in 0..blocks {
            let out_ch = base_channels << b;
            enc_trunk.push(Layer::Conv2d {
                in_ch: ch,
                out_ch,
                kernel: 3,
                stride: 2,
                pad: 1,
            });
            enc_trunk.push(Layer::Act(Activation::Relu));
            ch = out_ch;
        }
        let bottom = size >> blocks;
        let flat = ch * bottom * bottom;
        let encoder_spec = NetworkSpec::new(
            vec![1, size, size],
            enc_trunk,
            vec![
                (
                    ENC_MU.into(),
                    vec![Layer::Dense {
                        input: flat,
                        output: latent_dim,
                    }],
                ),
                (
                    ENC_LOGVAR.into(),
                    vec![Layer::Dense {
                        input: flat,
                        output: latent_dim,
                    }],
                ),
            ],
        )?;
        let mut dec_trunk = vec![
            Layer::Dense {
                input: latent_dim,
                output: flat,
            },
            Layer::Act(Activation::Relu),
            Layer::Reshape(vec![ch, bottom, bottom]),
        ];
        for b in (0..blocks).rev() {
            let out_ch = if b == 0 {
                base_channels
            } else {
                base_channels << (b - 1)
            };
            dec_trunk.push(Layer::Upsample2x);
            dec_trunk.push(Layer::Conv2d {
                in_ch: ch,
                out_ch,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            dec_trunk.push(Layer::Act(Activation::Relu));
            ch = out_ch;
        }
        let data_head = |act: Activation| {
            vec![
                Layer::Conv2d {
                    in_ch: ch,
                    out_ch: 1,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Layer::Act(act),
            ]
        };
        let heads = match head_mode {
            HeadMode::MeanVar => vec![
                (DEC_MEAN.to_string(), data_head(Activation::Sigmoid)),
                (DEC_LOGVAR.to_string(), data_head(Activation::Identity)),
            ],
            HeadMode::Quantiles { .. } => vec![
                (DEC_Q_LO.to_string(), data_head(Activation::Sigmoid)),
                (DEC_Q_HI.to_string(), data_head(Activation::Sigmoid)),
            ],
        };
        let decoder_spec = NetworkSpec::new(vec![latent_dim], dec_trunk, heads)?;
        let encoder = init_params(&encoder_spec, rng, InitScheme::FanInUniform)?;
        let decoder = init_params(&decoder_spec, rng, InitScheme::FanInUniform)?;
        Ok(VaeModel {
            encoder_spec,
            decoder_spec,
            encoder,
            decoder,
            latent_dim,
            head_mode,
        })
    }
}

fn check_head_mode(mode: &HeadMode) -> Result<()> {
    if let HeadMode::Quantiles { alpha_lo, alpha_hi } = mode {
        QuantileLevel::new(*alpha_lo)?;
        QuantileLevel::new(*alpha_hi)?;
        if alpha_lo >= alpha_hi {
            return Err(Error::InvalidArgument(format!(
                "Quantiles mode requires alpha_lo < alpha_hi, got ({}, {})",
                alpha_lo, alpha_hi
            )));
        }
    }
    Ok(())
}

/// Posterior parameters for one sample: (mu, log-variance).
pub fn encode(model: &VaeModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let cache = forward(&model.encoder_spec, &model.encoder, x)?;
    Ok((
        cache.outputs[ENC_MU].clone(),
        cache.outputs[ENC_LOGVAR].clone(),
    ))
}

/// z = mu + exp(log_var / 2) * eps with eps ~ N(0, I). Consumes exactly
/// `latent_dim` Gaussian draws.
pub fn reparameterize(mu: &Tensor, log_var: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    mu.check_same_shape(log_var, "reparameterize")?;
    let mut z = Tensor::zeros(mu.shape().to_vec());
    for i in 0..mu.len() {
        z.data_mut()[i] =
            mu.data()[i] + (0.5 * log_var.data()[i]).exp() * rng.normal();
    }
    Ok(z)
}

/// Decoder head outputs for one latent sample.
pub fn decode(model: &VaeModel, z: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let cache = forward(&model.decoder_spec, &model.decoder, z)?;
    Ok(cache.outputs)
}

/// Deterministic quantile maps for one input, decoding the posterior mean
/// (no latent sampling).
pub fn predict_quantile_maps(model: &VaeModel, x: &Tensor) -> Result<QuantileMaps> {
    let (alpha_lo, alpha_hi) = match model.head_mode {
        HeadMode::Quantiles { alpha_lo, alpha_hi } => (alpha_lo, alpha_hi),
        HeadMode::MeanVar => {
            return Err(Error::InvalidArgument(
                "predict_quantile_maps requires Quantiles mode".into(),
            ))
        }
    };
    let (mu, _) = encode(model, x)?;
    let outs = decode(model, &mu)?;
    Ok(QuantileMaps {
        q_lo: outs[DEC_Q_LO].clone(),
        q_hi: outs[DEC_Q_HI].clone(),
        alpha_lo,
        alpha_hi,
    })
}

/// Deterministic (mu, sigma) maps from a MeanVar model, decoding the
/// posterior mean.
pub fn predict_meanvar_maps(model: &VaeModel, x: &Tensor) -> Result<Moments> {
    if model.head_mode != HeadMode::MeanVar {
        return Err(Error::InvalidArgument(
            "predict_meanvar_maps requires MeanVar mode".into(),
        ));
    }
    let (mu, _) = encode(model, x)?;
    let outs = decode(model, &mu)?;
    let sigma = outs[DEC_LOGVAR].map(|lv| {
        (0.5 * lv.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)).exp()
    });
    Ok(Moments {
        mu: outs[DEC_MEAN].clone(),
        sigma,
        degenerate: Vec::new(),
    })
}

/// Reconstruction loss value and the gradients to feed each decoder head.
fn reconstruction_terms(
    model: &VaeModel,
    x: &Tensor,
    outs: &BTreeMap<String, Tensor>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut head_grads = BTreeMap::new();
    match model.head_mode {
        HeadMode::MeanVar => {
            let mean = &outs[DEC_MEAN];
            let raw_lv = &outs[DEC_LOGVAR];
            let clamped = raw_lv.map(|v| v.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1));
            let loss = losses::gaussian_nll(x, mean, &clamped)?;
            // zero gradient where the clamp is active
            let lv_grad = raw_lv.zip(&loss.grad_b, |raw, g| {
                if (LOGVAR_CLAMP.0..=LOGVAR_CLAMP.1).contains(&raw) {
                    g
                } else {
                    0.0
                }
            })?;
            head_grads.insert(DEC_MEAN.to_string(), loss.grad_a);
            head_grads.insert(DEC_LOGVAR.to_string(), lv_grad);
            Ok((loss.value, head_grads))
        }
        HeadMode::Quantiles { .. } => {
            let (lo, hi) = model.head_mode_levels()?;
            let loss =
                losses::joint_quantile_loss(&outs[DEC_Q_LO], &outs[DEC_Q_HI], x, lo, hi)?;
            head_grads.insert(DEC_Q_LO.to_string(), loss.grad_a);
            head_grads.insert(DEC_Q_HI.to_string(), loss.grad_b);
            Ok((loss.value, head_grads))
        }
    }
}

fn train_impl(data: &Tensor, model: &mut VaeModel, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let n = data.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_rec = 0.0;
        let mut epoch_kl = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut enc_grads = ParamSet::zeros_like_spec(&model.encoder_spec)?;
            let mut dec_grads = ParamSet::zeros_like_spec(&model.decoder_spec)?;
            for &idx in batch {
                let x = data.index_axis0(idx)?;
                let enc_cache = forward(&model.encoder_spec, &model.encoder, &x)?;
                let mu = &enc_cache.outputs[ENC_MU];
                let log_var = &enc_cache.outputs[ENC_LOGVAR];
                // 1-sample ELBO
                let eps = Tensor::from_vec((0..model.latent_dim).map(|_| rng.normal()).collect());
                let std = log_var.map(|v| (0.5 * v).exp());
                let mut z = mu.clone();
                for i in 0..z.len() {
                    z.data_mut()[i] += std.data()[i] * eps.data()[i];
                }
                let dec_cache = forward(&model.decoder_spec, &model.decoder, &z)?;
                let (rec, head_grads) = reconstruction_terms(model, &x, &dec_cache.outputs)?;
                let kl = losses::kl_diag_gaussian(mu, log_var)?;
                if !rec.is_finite() || !kl.value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("loss rec={} kl={}", rec, kl.value),
                    });
                }
                epoch_rec += rec;
                epoch_kl += kl.value;
                let dec_back =
                    backward(&model.decoder_spec, &model.decoder, &dec_cache, &head_grads)?;
                // chain rule through z = mu + std * eps
                let dz = &dec_back.input;
                let mut enc_head_grads = BTreeMap::new();
                let d_mu = dz.zip(&kl.grad_a, |g, k| g + cfg.kl_weight * k)?;
                let d_lv = {
                    let mut t = Tensor::zeros(log_var.shape().to_vec());
                    for i in 0..t.len() {
                        t.data_mut()[i] = dz.data()[i] * eps.data()[i] * 0.5 * std.data()[i]
                            + cfg.kl_weight * kl.grad_b.data()[i];
                    }
                    t
                };
                enc_head_grads.insert(ENC_MU.to_string(), d_mu);
                enc_head_grads.insert(ENC_LOGVAR.to_string(), d_lv);
                let enc_back =
                    backward(&model.encoder_spec, &model.encoder, &enc_cache, &enc_head_grads)?;
                enc_grads.add_assign(&enc_back.params)?;
                dec_grads.add_assign(&dec_back.params)?;
            }
            let scale = 1.0 / batch.len() as f64;
            enc_grads.scale_assign(scale);
            dec_grads.scale_assign(scale);
            adam_step(&mut model.encoder, &enc_grads, cfg.learning_rate, 0.9, 0.999, 1e-8)?;
            adam_step(&mut model.decoder, &dec_grads, cfg.learning_rate, 0.9, 0.999, 1e-8)?;
        }
        let rec = epoch_rec / n as f64;
        let kl = epoch_kl / n as f64;
        history.push(EpochStats {
            epoch,
            total: rec + cfg.kl_weight * kl,
            reconstruction: rec,
            kl,
        });
    }
    Ok(history)
}

/// Trains a MeanVar model by Gaussian NLL + kl_weight * KL.
pub fn train_vae(data: &Tensor, model: &mut VaeModel, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    if model.head_mode != HeadMode::MeanVar {
        return Err(Error::InvalidArgument(
            "train_vae requires MeanVar head mode".into(),
        ));
    }
    train_impl(data, model, cfg)
}

/// Trains a Quantiles model by joint pinball loss + kl_weight * KL; both
/// quantiles are estimated jointly in one network.
pub fn train_qrvae(
    data: &Tensor,
    model: &mut VaeModel,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if !matches!(model.head_mode, HeadMode::Quantiles { .. }) {
        return Err(Error::InvalidArgument(
            "train_qrvae requires Quantiles head mode".into(),
        ));
    }
    train_impl(data, model, cfg)
}

/// Draws n generative samples: z ~ N(0, I), decode, then sample the data
/// space from the decoded distribution. Consumes latent_dim + data_dim
/// Gaussian draws per sample.
pub fn sample_generative(model: &VaeModel, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let data_len: usize = model.data_shape().iter().product();
    let mut out = Vec::with_capacity(n * data_len);
    for _ in 0..n {
        let z = Tensor::from_vec((0..model.latent_dim).map(|_| rng.normal()).collect());
        let outs = decode(model, &z)?;
        let (mu, sigma) = match model.head_mode {
            HeadMode::MeanVar => {
                let sigma = outs[DEC_LOGVAR]
                    .map(|lv| (0.5 * lv.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)).exp());
                (outs[DEC_MEAN].clone(), sigma)
            }
            HeadMode::Quantiles { alpha_lo, alpha_hi } => {
                let maps = QuantileMaps {
                    q_lo: outs[DEC_Q_LO].clone(),
                    q_hi: outs[DEC_Q_HI].clone(),
                    alpha_lo,
                    alpha_hi,
                };
                let m = maps.to_moments()?;
                (m.mu, m.sigma)
            }
        };
        sigma.check_finite("generative sigma")?;
        for i in 0..data_len {
            out.push(mu.data()[i] + sigma.data()[i] * rng.normal());
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(model.data_shape());
    Tensor::new(shape, out)
}

/// JSON sidecar stored next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeMeta {
    pub latent_dim: usize,
    pub head_mode: HeadMode,
    pub encoder_spec: NetworkSpec,
    pub decoder_spec: NetworkSpec,
}

/// Writes `<prefix>.qtn` (parameters) and `<prefix>.json` (sidecar).
pub fn save_vae(model: &VaeModel, prefix: &Path) -> Result<()> {
    let meta = VaeMeta {
        latent_dim: model.latent_dim,
        head_mode: model.head_mode,
        encoder_spec: model.encoder_spec.clone(),
        decoder_spec: model.decoder_spec.clone(),
    };
    let mut records: Vec<(String, Tensor)> = Vec::new();
    model.encoder.params.for_each(|name, t| {
        records.push((format!("encoder.{}", name), t.clone()));
    });
    model.decoder.params.for_each(|name, t| {
        records.push((format!("decoder.{}", name), t.clone()));
    });
    let refs: Vec<(String, &Tensor)> =
        records.iter().map(|(n, t)| (n.clone(), t)).collect();
    container::write_container_file(&prefix.with_extension("qtn"), &refs)?;
    std::fs::write(
        prefix.with_extension("json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

pub fn load_vae(prefix: &Path) -> Result<VaeModel> {
    let meta: VaeMeta =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
    let records = container::read_container_file(&prefix.with_extension("qtn"))?;
    let mut rng = Rng::new(0);
    let mut encoder = init_params(&meta.encoder_spec, &mut rng, InitScheme::Zeros)?;
    let mut decoder = init_params(&meta.decoder_spec, &mut rng, InitScheme::Zeros)?;
    let mut missing = Vec::new();
    for (state, net) in [(&mut encoder, "encoder"), (&mut decoder, "decoder")] {
        state.params.for_each_mut(|name, t| {
            let key = format!("{}.{}", net, name);
            match records.get(&key) {
                Some(saved) if saved.shape() == t.shape() => {
                    *t = saved.clone();
                }
                _ => missing.push(key),
            }
        });
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "model file missing or mis-shaped records: {:?}",
            missing
        )));
    }
    Ok(VaeModel {
        latent_dim: meta.latent_dim,
        head_mode: meta.head_mode,
        encoder_spec: meta.encoder_spec,
        decoder_spec: meta.decoder_spec,
        encoder,
        decoder,
    })
}
