//! Minimal deterministic neural-network engine.
//!
//! Networks are a sequential trunk plus named fan-out heads that share all
//! trunk parameters and differ only in their own final layers. Supported
//! layers: dense, direct-loop 2-D convolution, elementwise activations,
//! reshape, nearest-neighbour 2x upsampling, and save/concat pairs for
//! skip connections inside the trunk. Everything is `f64`; gradients are
//! exact reverse-mode and are validated against central finite differences
//! in the test suite.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Act(Activation),
    Reshape(Vec<usize>),
    Upsample2x,
    /// Stores the current activation under an id for a later `SkipConcat`.
    SkipSave(usize),
    /// Concatenates the saved activation (same spatial size) on the
    /// channel axis: output channels = current ++ saved.
    SkipConcat(usize),
}

impl Layer {
    fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    /// Output shape for a given input shape, or a composition error.
    fn output_shape(&self, input: &[usize], saved: &HashMap<usize, Vec<usize>>) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { input: d_in, output } => {
                let n: usize = input.iter().product();
                if n != *d_in {
                    return Err(Error::ShapeMismatch(format!(
                        "dense expects {} inputs, got shape {:?}",
                        d_in, input
                    )));
                }
                Ok(vec![*output])
            }
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != *in_ch {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d expects [{}, h, w], got {:?}",
                        in_ch, input
                    )));
                }
                let (h, w) = (input[1], input[2]);
                if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d kernel {} too large for input {:?} with pad {}",
                        kernel, input, pad
                    )));
                }
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (w + 2 * pad - kernel) / stride + 1;
                Ok(vec![*out_ch, oh, ow])
            }
            Layer::Act(_) => Ok(input.to_vec()),
            Layer::Reshape(shape) => {
                let n: usize = input.iter().product();
                let m: usize = shape.iter().product();
                if n != m {
                    return Err(Error::ShapeMismatch(format!(
                        "reshape {:?} -> {:?} changes element count",
                        input, shape
                    )));
                }
                Ok(shape.clone())
            }
            Layer::Upsample2x => {
                if input.len() != 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "upsample2x expects [c, h, w], got {:?}",
                        input
                    )));
                }
                Ok(vec![input[0], input[1] * 2, input[2] * 2])
            }
            Layer::SkipSave(_) => Ok(input.to_vec()),
            Layer::SkipConcat(id) => {
                let s = saved.get(id).ok_or_else(|| {
                    Error::InvalidArgument(format!("skip concat {} without matching save", id))
                })?;
                if input.len() != 3 || s.len() != 3 || input[1..] != s[1..] {
                    return Err(Error::ShapeMismatch(format!(
                        "skip concat {}: spatial mismatch {:?} vs {:?}",
                        id, input, s
                    )));
                }
                Ok(vec![input[0] + s[0], input[1], input[2]])
            }
        }
    }
}

/// Layer-graph description: sequential trunk plus named output heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub trunk: Vec<Layer>,
    pub heads: BTreeMap<String, Vec<Layer>>,
}

impl NetworkSpec {
    pub fn new(
        input_shape: Vec<usize>,
        trunk: Vec<Layer>,
        heads: Vec<(String, Vec<Layer>)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, layers) in heads {
            if !name.is_ascii() {
                return Err(Error::InvalidArgument(format!(
                    "head name {:?} is not ASCII",
                    name
                )));
            }
            if map.insert(name.clone(), layers).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate head {:?}", name)));
            }
        }
        let spec = NetworkSpec {
            input_shape,
            trunk,
            heads: map,
        };
        spec.head_shapes()?; // validates composition
        Ok(spec)
    }

    /// Validates layer composition and returns every head's output shape.
    pub fn head_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let (trunk_out, saved) = self.trunk_output_shape()?;
        let mut out = BTreeMap::new();
        for (name, layers) in &self.heads {
            let mut shape = trunk_out.clone();
            for layer in layers {
                shape = layer.output_shape(&shape, &saved)?;
            }
            out.insert(name.clone(), shape);
        }
        Ok(out)
    }

    pub fn trunk_output_shape(&self) -> Result<(Vec<usize>, HashMap<usize, Vec<usize>>)> {
        let mut shape = self.input_shape.clone();
        let mut saved: HashMap<usize, Vec<usize>> = HashMap::new();
        for layer in &self.trunk {
            if let Layer::SkipSave(id) = layer {
                saved.insert(*id, shape.clone());
            }
            shape = layer.output_shape(&shape, &saved)?;
        }
        Ok((shape, saved))
    }
}

/// Weight/bias pair of one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPair {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameter (or gradient, or moment) tensors laid out like a spec:
/// one optional pair per trunk layer and per head layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub trunk: Vec<Option<ParamPair>>,
    pub heads: BTreeMap<String, Vec<Option<ParamPair>>>,
}

impl ParamSet {
    pub fn zeros_like_spec(spec: &NetworkSpec) -> Result<ParamSet> {
        fn zeros_for(layers: &[Layer], mut shape: Vec<usize>, saved: &mut HashMap<usize, Vec<usize>>) -> Result<Vec<Option<ParamPair>>> {
            let mut out = Vec::with_capacity(layers.len());
            for layer in layers {
                if let Layer::SkipSave(id) = layer {
                    saved.insert(*id, shape.clone());
                }
                out.push(match layer {
                    Layer::Dense { input, output } => Some(ParamPair {
                        weight: Tensor::zeros(vec![*output, *input]),
                        bias: Tensor::zeros(vec![*output]),
                    }),
                    Layer::Conv2d {
                        in_ch,
                        out_ch,
                        kernel,
                        ..
                    } => Some(ParamPair {
                        weight: Tensor::zeros(vec![*out_ch, *in_ch, *kernel, *kernel]),
                        bias: Tensor::zeros(vec![*out_ch]),
                    }),
                    _ => None,
                });
                shape = layer.output_shape(&shape, saved)?;
            }
            Ok(out)
        }
        let mut saved = HashMap::new();
        let trunk = zeros_for(&spec.trunk, spec.input_shape.clone(), &mut saved)?;
        let (trunk_out, saved_shapes) = spec.trunk_output_shape()?;
        let mut heads = BTreeMap::new();
        for (name, layers) in &spec.heads {
            let mut s = saved_shapes.clone();
            heads.insert(name.clone(), zeros_for(layers, trunk_out.clone(), &mut s)?);
        }
        Ok(ParamSet { trunk, heads })
    }

    /// Visits every parameter tensor in a stable order:
    /// trunk by layer index, then heads in ASCII name order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (i, p) in self.trunk.iter().enumerate() {
            if let Some(p) = p {
                f(&format!("trunk.{}.weight", i), &p.weight);
                f(&format!("trunk.{}.bias", i), &p.bias);
            }
        }
        for (name, layers) in &self.heads {
            for (i, p) in layers.iter().enumerate() {
                if let Some(p) = p {
                    f(&format!("head.{}.{}.weight", name, i), &p.weight);
                    f(&format!("head.{}.{}.bias", name, i), &p.bias);
                }
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, p) in self.trunk.iter_mut().enumerate() {
            if let Some(p) = p {
                f(&format!("trunk.{}.weight", i), &mut p.weight);
                f(&format!("trunk.{}.bias", i), &mut p.bias);
            }
        }
        for (name, layers) in &mut self.heads {
            for (i, p) in layers.iter_mut().enumerate() {
                if let Some(p) = p {
                    f(&format!("head.{}.{}.weight", name, i), &mut p.weight);
                    f(&format!("head.{}.{}.bias", name, i), &mut p.bias);
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        for (a, b) in self.trunk.iter_mut().zip(other.trunk.iter()) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.add_assign(&b.weight)?;
                a.bias.add_assign(&b.bias)?;
            }
        }
        for (name, layers) in &mut self.heads {
            if let Some(ol) = other.heads.get(name) {
                for (a, b) in layers.iter_mut().zip(ol.iter()) {
                    if let (Some(a), Some(b)) = (a, b) {
                        a.weight.add_assign(&b.weight)?;
                        a.bias.add_assign(&b.bias)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.for_each_mut(|_, t| t.scale_assign(s));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.all_finite());
        ok
    }
}

/// Init scheme for `init_params`. Weights are fan-in-scaled uniform
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    FanInUniform,
    Zeros,
}

/// Trained parameters plus Adam optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkState {
    pub params: ParamSet,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
    pub step: u64,
}

/// Deterministic parameter initialization for a spec.
pub fn init_params(spec: &NetworkSpec, rng: &mut Rng, scheme: InitScheme) -> Result<NetworkState> {
    let mut params = ParamSet::zeros_like_spec(spec)?;
    if scheme == InitScheme::FanInUniform {
        params.for_each_mut(|name, t| {
            if name.ends_with(".weight") {
                let shape = t.shape().to_vec();
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.uniform_in(-bound, bound);
                }
            }
        });
    }
    Ok(NetworkState {
        adam_m: ParamSet::zeros_like_spec(spec)?,
        adam_v: ParamSet::zeros_like_spec(spec)?,
        params,
        step: 0,
    })
}

/// Activations cached by `forward` for a later `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each trunk layer; last entry is the trunk output.
    trunk_inputs: Vec<Tensor>,
    /// Input to each head layer; last entry is the head output.
    head_inputs: BTreeMap<String, Vec<Tensor>>,
    saved: HashMap<usize, Tensor>,
    pub outputs: BTreeMap<String, Tensor>,
}

fn layer_forward(
    layer: &Layer,
    params: Option<&ParamPair>,
    input: &Tensor,
    saved: &mut HashMap<usize, Tensor>,
) -> Result<Tensor> {
    let out = match layer {
        Layer::Dense { input: d_in, output } => {
            if input.len() != *d_in {
                return Err(Error::ShapeMismatch(format!(
                    "dense expects {} inputs, got {:?}",
                    d_in,
                    input.shape()
                )));
            }
            let p = params.expect("dense layer has params");
            let w = p.weight.data();
            let b = p.bias.data();
            let x = input.data();
            let mut y = vec![0.0; *output];
            for o in 0..*output {
                let mut acc = b[o];
                let row = &w[o * d_in..(o + 1) * d_in];
                for i in 0..*d_in {
                    acc += row[i] * x[i];
                }
                y[o] = acc;
            }
            Tensor::new(vec![*output], y)?
        }
        Layer::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => {
            let shape = input.shape();
            if shape.len() != 3 || shape[0] != *in_ch {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d expects [{}, h, w], got {:?}",
                    in_ch, shape
                )));
            }
            let (h, w) = (shape[1], shape[2]);
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (w + 2 * pad - kernel) / stride + 1;
            let p = params.expect("conv layer has params");
            let wt = p.weight.data();
            let b = p.bias.data();
            let x = input.data();
            let mut y = vec![0.0; out_ch * oh * ow];
            for oc in 0..*out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..*in_ch {
                            for ky in 0..*kernel {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..*kernel {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((oc * in_ch + ic) * kernel + ky) * kernel + kx]
                                        * x[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        y[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            Tensor::new(vec![*out_ch, oh, ow], y)?
        }
        Layer::Act(a) => input.map(|v| a.apply(v)),
        Layer::Reshape(shape) => input.reshape(shape.clone())?,
        Layer::Upsample2x => {
            let s = input.shape();
            if s.len() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "upsample2x expects [c, h, w], got {:?}",
                    s
                )));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let x = input.data();
            let mut y = vec![0.0; c * 4 * h * w];
            for ch in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        let v = x[(ch * h + iy) * w + ix];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                y[(ch * 2 * h + 2 * iy + dy) * 2 * w + 2 * ix + dx] = v;
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![c, 2 * h, 2 * w], y)?
        }
        Layer::SkipSave(id) => {
            saved.insert(*id, input.clone());
            input.clone()
        }
        Layer::SkipConcat(id) => {
            let s = saved.get(id).ok_or_else(|| {
                Error::InvalidArgument(format!("skip concat {} without matching save", id))
            })?;
            let (a, b) = (input.shape(), s.shape());
            if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
                return Err(Error::ShapeMismatch(format!(
                    "skip concat {}: {:?} vs {:?}",
                    id, a, b
                )));
            }
            let mut data = input.data().to_vec();
            data.extend_from_slice(s.data());
            Tensor::new(vec![a[0] + b[0], a[1], a[2]], data)?
        }
    };
    out.check_finite("layer output")?;
    Ok(out)
}

/// Runs the network on one sample; returns all head outputs and the cache
/// needed by `backward`.
pub fn forward(spec: &NetworkSpec, state: &NetworkState, input: &Tensor) -> Result<ForwardCache> {
    if input.shape() != spec.input_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not match spec entry {:?}",
            input.shape(),
            spec.input_shape
        )));
    }
    input.check_finite("network input")?;
    let mut saved = HashMap::new();
    let mut trunk_inputs = vec![input.clone()];
    for (i, layer) in spec.trunk.iter().enumerate() {
        let p = state.params.trunk[i].as_ref();
        let next = layer_forward(layer, p, trunk_inputs.last().unwrap(), &mut saved)?;
        trunk_inputs.push(next);
    }
    let trunk_out = trunk_inputs.last().unwrap().clone();
    let mut head_inputs = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for (name, layers) in &spec.heads {
        let mut acts = vec![trunk_out.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let p = state.params.heads[name][i].as_ref();
            let next = layer_forward(layer, p, acts.last().unwrap(), &mut saved)?;
            acts.push(next);
        }
        outputs.insert(name.clone(), acts.last().unwrap().clone());
        head_inputs.insert(name.clone(), acts);
    }
    Ok(ForwardCache {
        trunk_inputs,
        head_inputs,
        saved,
        outputs,
    })
}

/// Per-layer reverse step: gradients w.r.t. parameters and input.
fn layer_backward(
    layer: &Layer,
    params: Option<&ParamPair>,
    input: &Tensor,
    out_grad: &Tensor,
    skip_grads: &mut HashMap<usize, Tensor>,
) -> Result<(Option<ParamPair>, Tensor)> {
    match layer {
        Layer::Dense { input: d_in, output } => {
            let p = params.expect("dense layer has params");
            let w = p.weight.data();
            let x = input.data();
            let g = out_grad.data();
            let mut dw = vec![0.0; output * d_in];
            let mut dx = vec![0.0; *d_in];
            for o in 0..*output {
                let go = g[o];
                for i in 0..*d_in {
                    dw[o * d_in + i] = go * x[i];
                    dx[i] += w[o * d_in + i] * go;
                }
            }
            let grads = ParamPair {
                weight: Tensor::new(vec![*output, *d_in], dw)?,
                bias: Tensor::new(vec![*output], g.to_vec())?,
            };
            let dx = Tensor::new(vec![*d_in], dx)?.reshape(input.shape().to_vec())?;
            Ok((Some(grads), dx))
        }
        Layer::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => {
            let shape = input.shape();
            let (h, w) = (shape[1], shape[2]);
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (w + 2 * pad - kernel) / stride + 1;
            let p = params.expect("conv layer has params");
            let wt = p.weight.data();
            let x = input.data();
            let g = out_grad.data();
            let mut dw = vec![0.0; out_ch * in_ch * kernel * kernel];
            let mut db = vec![0.0; *out_ch];
            let mut dx = vec![0.0; in_ch * h * w];
            for oc in 0..*out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[(oc * oh + oy) * ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        db[oc] += go;
                        for ic in 0..*in_ch {
                            for ky in 0..*kernel {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..*kernel {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = (ic * h + iy as usize) * w + ix as usize;
                                    let wi = ((oc * in_ch + ic) * kernel + ky) * kernel + kx;
                                    dw[wi] += go * x[xi];
                                    dx[xi] += go * wt[wi];
                                }
                            }
                        }
                    }
                }
            }
            let grads = ParamPair {
                weight: Tensor::new(vec![*out_ch, *in_ch, *kernel, *kernel], dw)?,
                bias: Tensor::new(vec![*out_ch], db)?,
            };
            Ok((Some(grads), Tensor::new(shape.to_vec(), dx)?))
        }
        Layer::Act(a) => {
            let dx = input.zip(out_grad, |x, g| g * a.derivative(x))?;
            Ok((None, dx))
        }
        Layer::Reshape(_) => Ok((None, out_grad.reshape(input.shape().to_vec())?)),
        Layer::Upsample2x => {
            let s = input.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let g = out_grad.data();
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx_ in 0..2 {
                                acc += g[(ch * 2 * h + 2 * iy + dy) * 2 * w + 2 * ix + dx_];
                            }
                        }
                        dx[(ch * h + iy) * w + ix] = acc;
                    }
                }
            }
            Ok((None, Tensor::new(vec![c, h, w], dx)?))
        }
        Layer::SkipSave(id) => {
            let mut dx = out_grad.clone();
            if let Some(extra) = skip_grads.remove(id) {
                dx.add_assign(&extra)?;
            }
            Ok((None, dx))
        }
        Layer::SkipConcat(id) => {
            let s = input.shape();
            let (c_in, hw) = (s[0], s[1] * s[2]);
            let g = out_grad.data();
            let dx = Tensor::new(s.to_vec(), g[..c_in * hw].to_vec())?;
            let saved_c = out_grad.shape()[0] - c_in;
            let extra = Tensor::new(vec![saved_c, s[1], s[2]], g[c_in * hw..].to_vec())?;
            match skip_grads.get_mut(id) {
                Some(acc) => acc.add_assign(&extra)?,
                None => {
                    skip_grads.insert(*id, extra);
                }
            }
            Ok((None, dx))
        }
    }
}

/// Gradients of a scalar objective w.r.t. parameters and the input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamSet,
    pub input: Tensor,
}

/// Reverse pass from per-head output gradients. Heads absent from
/// `head_grads` contribute zero.
pub fn backward(
    spec: &NetworkSpec,
    state: &NetworkState,
    cache: &ForwardCache,
    head_grads: &BTreeMap<String, Tensor>,
) -> Result<Gradients> {
    let mut grads = ParamSet::zeros_like_spec(spec)?;
    let trunk_out = cache.trunk_inputs.last().unwrap();
    let mut trunk_out_grad = Tensor::zeros(trunk_out.shape().to_vec());
    let mut skip_grads: HashMap<usize, Tensor> = HashMap::new();

    for (name, g) in head_grads {
        let layers = spec.heads.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("gradient supplied for unknown head {:?}", name))
        })?;
        let acts = &cache.head_inputs[name];
        let out = acts.last().unwrap();
        g.check_same_shape(out, &format!("head {:?} gradient", name))?;
        let mut grad = g.clone();
        for (i, layer) in layers.iter().enumerate().rev() {
            let p = state.params.heads[name][i].as_ref();
            let (pg, ig) = layer_backward(layer, p, &acts[i], &grad, &mut skip_grads)?;
            if let Some(pg) = pg {
                let slot = grads.heads.get_mut(name).unwrap()[i].as_mut().unwrap();
                slot.weight.add_assign(&pg.weight)?;
                slot.bias.add_assign(&pg.bias)?;
            }
            grad = ig;
        }
        trunk_out_grad.add_assign(&grad)?;
    }

    let mut grad = trunk_out_grad;
    for (i, layer) in spec.trunk.iter().enumerate().rev() {
        let p = state.params.trunk[i].as_ref();
        let (pg, ig) = layer_backward(layer, p, &cache.trunk_inputs[i], &grad, &mut skip_grads)?;
        if let Some(pg) = pg {
            let slot = grads.trunk[i].as_mut().unwrap();
            slot.weight.add_assign(&pg.weight)?;
            slot.bias.add_assign(&pg.bias)?;
        }
        grad = ig;
    }
    Ok(Gradients {
        params: grads,
        input: grad,
    })
}

/// One Adam update with bias correction. Increments the step counter.
pub fn adam_step(
    state: &mut NetworkState,
    grads: &ParamSet,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("adam gradients".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let update = |p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor| {
        for i in 0..p.len() {
            let gv = g.data()[i];
            let mv = beta1 * m.data()[i] + (1.0 - beta1) * gv;
            let vv = beta2 * v.data()[i] + (1.0 - beta2) * gv * gv;
            m.data_mut()[i] = mv;
            v.data_mut()[i] = vv;
            p.data_mut()[i] -= lr * (mv / bc1) / ((vv / bc2).sqrt() + eps);
        }
    };
    let update_pair = |p: &mut ParamPair, g: &ParamPair, m: &mut ParamPair, v: &mut ParamPair| {
        update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight);
        update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
    };
    for (i, slot) in state.params.trunk.iter_mut().enumerate() {
        if let (Some(p), Some(g)) = (slot, grads.trunk[i].as_ref()) {
            let m = state.adam_m.trunk[i].as_mut().unwrap();
            let v = state.adam_v.trunk[i].as_mut().unwrap();
            update_pair(p, g, m, v);
        }
    }
    for (name, layers) in &mut state.params.heads {
        let glayers = &grads.heads[name];
        let mlayers = state.adam_m.heads.get_mut(name).unwrap();
        let vlayers = state.adam_v.heads.get_mut(name).unwrap();
        for (i, slot) in layers.iter_mut().enumerate() {
            if let (Some(p), Some(g)) = (slot, glayers[i].as_ref()) {
                update_pair(p, g, mlayers[i].as_mut().unwrap(), vlayers[i].as_mut().unwrap());
            }
        }
    }
    Ok(())
}

/// Central finite-difference gradient of `objective` w.r.t. every
/// parameter, for validating `backward`. The objective sees only
/// `forward` outputs, never the analytic gradients.
pub fn numeric_param_gradient(
    spec: &NetworkSpec,
    state: &NetworkState,
    input: &Tensor,
    eps: f64,
    objective: &dyn Fn(&BTreeMap<String, Tensor>) -> f64,
) -> Result<ParamSet> {
    let mut probe = state.clone();
    let mut grads = ParamSet::zeros_like_spec(spec)?;
    let mut names: Vec<(String, usize)> = Vec::new();
    state
        .params
        .for_each(|name, t| names.push((name.to_string(), t.len())));
    for (name, len) in names {
        for i in 0..len {
            let eval = |probe: &mut NetworkState, delta: f64, spec: &NetworkSpec| -> Result<f64> {
                probe.params.for_each_mut(|n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
                let cache = forward(spec, probe, input)?;
                probe.params.for_each_mut(|n, t| {
                    if n == name {
                        t.data_mut()[i] -= delta;
                    }
                });
                Ok(objective(&cache.outputs))
            };
            let hi = eval(&mut probe, eps, spec)?;
            let lo = eval(&mut probe, -eps, spec)?;
            let g = (hi - lo) / (2.0 * eps);
            grads.for_each_mut(|n, t| {
                if n == name {
                    t.data_mut()[i] = g;
                }
            });
        }
    }
    Ok(grads)
}
