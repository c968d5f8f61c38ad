//! Classifier container, the three built-in architectures, and the model file format.

use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

use super::layers::{Conv2d, Dense, Depthwise, Layer, Standardize};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Two conv blocks, then dense.
    A,
    /// Three conv blocks with 5x5 / 3x3 / 3x3 kernels, then dense.
    B,
    /// Depthwise-separable blocks, then dense.
    C,
    /// Hand-assembled layer stack.
    Custom,
}

impl Arch {
    pub fn id(self) -> u32 {
        match self {
            Arch::Custom => 0,
            Arch::A => 1,
            Arch::B => 2,
            Arch::C => 3,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Arch::Custom),
            1 => Some(Arch::A),
            2 => Some(Arch::B),
            3 => Some(Arch::C),
            _ => None,
        }
    }

    /// Untrained layer stack (zero parameters, unit standardization) for `channels` inputs.
    pub fn layers(self, channels: usize, num_classes: usize) -> Vec<Layer> {
        use Layer::*;
        match self {
            Arch::A => vec![
                Standardize(self::Standardize::unit(channels)),
                Conv2d(self::Conv2d::zeros(channels, 8, 3)),
                Relu,
                MaxPool2,
                Conv2d(self::Conv2d::zeros(8, 16, 3)),
                Relu,
                MaxPool2,
                GlobalAvgPool,
                Dense(self::Dense::zeros(16, num_classes)),
            ],
            Arch::B => vec![
                Standardize(self::Standardize::unit(channels)),
                Conv2d(self::Conv2d::zeros(channels, 6, 5)),
                Relu,
                MaxPool2,
                Conv2d(self::Conv2d::zeros(6, 12, 3)),
                Relu,
                MaxPool2,
                Conv2d(self::Conv2d::zeros(12, 16, 3)),
                Relu,
                GlobalAvgPool,
                Dense(self::Dense::zeros(16, num_classes)),
            ],
            Arch::C => vec![
                Standardize(self::Standardize::unit(channels)),
                Conv2d(self::Conv2d::zeros(channels, 8, 3)),
                Relu,
                MaxPool2,
                Depthwise(self::Depthwise::zeros(8, 3)),
                Relu,
                Conv2d(self::Conv2d::zeros(8, 16, 1)),
                Relu,
                MaxPool2,
                Depthwise(self::Depthwise::zeros(16, 3)),
                Relu,
                Conv2d(self::Conv2d::zeros(16, 16, 1)),
                Relu,
                GlobalAvgPool,
                Dense(self::Dense::zeros(16, num_classes)),
            ],
            Arch::Custom => Vec::new(),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arch::A => "a",
            Arch::B => "b",
            Arch::C => "c",
            Arch::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Arch::A),
            "b" => Ok(Arch::B),
            "c" => Ok(Arch::C),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Parameter gradients, one buffer per parameter tensor in layer order.
pub type ParamGrads = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: Arch,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    layers: Vec<Layer>,
}

impl Classifier {
    /// Builds a layer stack and checks that it maps the input to `num_classes` logits.
    pub fn from_layers(
        arch: Arch,
        (height, width, channels): (usize, usize, usize),
        num_classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        let mut shape = (channels, height, width);
        for layer in &layers {
            shape = layer.output_shape(shape)?;
        }
        if shape.0 * shape.1 * shape.2 != num_classes {
            return Err(Error::dim(format!(
                "layer stack produces {} outputs for {num_classes} classes",
                shape.0 * shape.1 * shape.2
            )));
        }
        Ok(Classifier {
            arch,
            height,
            width,
            channels,
            num_classes,
            layers,
        })
    }

    /// He-normal weights, zero biases, drawn deterministically from `seed`.
    pub fn new(arch: Arch, input: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::from_layers(arch, input, num_classes, arch.layers(input.2, num_classes))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let fan_in = layer.fan_in();
            if let Some(weight) = layer.params_mut().into_iter().next() {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                weight.iter_mut().for_each(|v| *v = normal.sample(&mut rng) as f32);
            }
        }
        Ok(model)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    /// Sets the leading standardization layer to per-channel `mean` and `std`.
    pub fn set_input_stats(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let layer = Standardize::new(
            mean.iter().map(|&v| v as f32).collect(),
            std.iter().map(|&v| v as f32).collect(),
        )?;
        if layer.mean.len() != self.channels {
            return Err(Error::dim(format!("{} channel stats for a {}-channel model", layer.mean.len(), self.channels)));
        }
        match self.layers.first_mut() {
            Some(Layer::Standardize(s)) => *s = layer,
            _ => self.layers.insert(0, Layer::Standardize(layer)),
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(height, width, channels)` of accepted images.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        if img.shape() != self.input_shape() {
            return Err(Error::dim(format!(
                "model expects {:?} input, got {:?}",
                self.input_shape(),
                img.shape()
            )));
        }
        Ok(())
    }

    /// Activations entering each layer, followed by the logits.
    fn activations(&self, img: &Image) -> Vec<Tensor> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(Tensor::from_image(img));
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }

    pub fn logits(&self, img: &Image) -> Result<Vec<f64>> {
        self.check_input(img)?;
        let mut x = Tensor::from_image(img);
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        Ok(x.data)
    }

    /// Softmax class probabilities.
    pub fn forward(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(img)?))
    }

    pub fn predict(&self, img: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(img)?))
    }

    /// Cross-entropy `-log p_label` and its gradient w.r.t. the input pixels.
    pub fn loss_and_input_gradient(&self, img: &Image, label: usize) -> Result<(f64, Image)> {
        let b = self.backprop(img, label, false)?;
        Ok((b.loss, b.input_grad))
    }

    /// Loss, input gradient and the logits they were computed from.
    pub fn evaluate(&self, img: &Image, label: usize) -> Result<Evaluation> {
        let b = self.backprop(img, label, false)?;
        Ok(Evaluation {
            loss: b.loss,
            gradient: b.input_grad,
            prediction: argmax(&b.logits),
            logits: b.logits,
        })
    }

    /// Loss, predicted class and parameter gradients, for training.
    pub fn loss_and_param_gradient(&self, img: &Image, label: usize) -> Result<(f64, usize, ParamGrads)> {
        let b = self.backprop(img, label, true)?;
        Ok((b.loss, argmax(&b.logits), b.param_grads.expect("requested")))
    }

    fn backprop(&self, img: &Image, label: usize, with_params: bool) -> Result<Backprop> {
        self.check_input(img)?;
        if label >= self.num_classes {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        let acts = self.activations(img);
        let logits = acts.last().expect("logits").data.clone();
        let (loss, dlogits) = softmax_cross_entropy(&logits, label);
        let mut grad = Tensor::vector(dlogits);
        let mut param_grads = with_params.then(|| self.zero_grads());
        // Parameter slots are laid out in layer order; walk them backwards alongside the layers.
        let mut slot_end = param_grads.as_ref().map_or(0, |g| g.len());
        for (layer, input) in self.layers.iter().zip(&acts).rev() {
            let n = layer.params().len();
            let slots = match param_grads.as_mut() {
                Some(g) if n > 0 => {
                    let start = slot_end - n;
                    slot_end = start;
                    Some(&mut g[start..start + n])
                }
                _ => None,
            };
            grad = layer.backward(input, &grad, slots);
        }
        Ok(Backprop {
            loss,
            input_grad: grad.to_image(),
            param_grads,
            logits,
        })
    }
}

struct Backprop {
    loss: f64,
    input_grad: Image,
    param_grads: Option<ParamGrads>,
    logits: Vec<f64>,
}

/// Result of [`Classifier::evaluate`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub gradient: Image,
    pub logits: Vec<f64>,
    pub prediction: usize,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Stable `-log softmax(z)[label]` and its gradient `softmax(z) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, &z)| (z - lse).exp() - if k == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

const MODEL_MAGIC: &[u8; 4] = b"EXNN";
const MODEL_VERSION: u32 = 1;

const TAG_CONV: u32 = 1;
const TAG_DEPTHWISE: u32 = 2;
const TAG_RELU: u32 = 3;
const TAG_MAXPOOL: u32 = 4;
const TAG_GAP: u32 = 5;
const TAG_DENSE: u32 = 6;
const TAG_STANDARDIZE: u32 = 7;

/// Serializes a classifier.
///
/// Layout, all little-endian: magic `EXNN`, `u32` version (1), `u32`
/// architecture id (0 custom, 1 A, 2 B, 3 C), `u32` height, width, channels,
/// classes, `u32` layer count, then one descriptor per layer (`u32` tag and
/// dims: conv `1 in out k`, depthwise `2 ch k`, relu `3`, max-pool `4`,
/// global-average-pool `5`, dense `6 in out`, standardize `7 ch` followed by
/// `ch` means and `ch` stds as `f32` bits), then `u32` parameter count and
/// the `f32` parameter blob in layer order (weight then bias).
pub fn save_model(model: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut words = vec![
        MODEL_VERSION,
        model.arch.id(),
        model.height as u32,
        model.width as u32,
        model.channels as u32,
        model.num_classes as u32,
        model.layers.len() as u32,
    ];
    for layer in &model.layers {
        match layer {
            Layer::Standardize(l) => {
                words.extend([TAG_STANDARDIZE, l.mean.len() as u32]);
                words.extend(l.mean.iter().chain(&l.std).map(|v| v.to_bits()));
            }
            Layer::Conv2d(l) => words.extend([TAG_CONV, l.in_channels as u32, l.out_channels as u32, l.kernel as u32]),
            Layer::Depthwise(l) => words.extend([TAG_DEPTHWISE, l.channels as u32, l.kernel as u32]),
            Layer::Relu => words.push(TAG_RELU),
            Layer::MaxPool2 => words.push(TAG_MAXPOOL),
            Layer::GlobalAvgPool => words.push(TAG_GAP),
            Layer::Dense(l) => words.extend([TAG_DENSE, l.inputs as u32, l.outputs as u32]),
        }
    }
    let params: Vec<f32> = model.params().into_iter().flatten().copied().collect();
    words.push(params.len() as u32);
    let mut buf = Vec::with_capacity(4 + 4 * words.len() + 4 * params.len());
    buf.extend_from_slice(MODEL_MAGIC);
    for w in words {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Classifier> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_model(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Like [`load_model`], but rejects a file whose header names a different architecture.
pub fn load_model_as(path: impl AsRef<Path>, expected: Arch) -> Result<Classifier> {
    let model = load_model(path.as_ref())?;
    if model.arch != expected {
        return Err(Error::Format(format!(
            "{}: header says architecture {}, expected {expected}",
            path.as_ref().display(),
            model.arch
        )));
    }
    Ok(model)
}

/// Equal layer kinds and dimensions, ignoring parameter and standardization values.
fn same_structure(a: &[Layer], b: &[Layer]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Layer::Standardize(p), Layer::Standardize(q)) => p.mean.len() == q.mean.len(),
            (Layer::Conv2d(p), Layer::Conv2d(q)) => {
                (p.in_channels, p.out_channels, p.kernel) == (q.in_channels, q.out_channels, q.kernel)
            }
            (Layer::Depthwise(p), Layer::Depthwise(q)) => (p.channels, p.kernel) == (q.channels, q.kernel),
            (Layer::Dense(p), Layer::Dense(q)) => (p.inputs, p.outputs) == (q.inputs, q.outputs),
            (p, q) => std::mem::discriminant(p) == std::mem::discriminant(q),
        })
}

fn parse_model(bytes: &[u8]) -> Result<Classifier> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let mut next = || -> Result<usize> {
        let mut b = [0u8; 4];
        cur.read_exact(&mut b).map_err(|_| Error::Format("truncated model file".into()))?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let version = next()?;
    if version != MODEL_VERSION as usize {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let arch = Arch::from_id(next()? as u32).ok_or_else(|| Error::Format("unknown architecture id".into()))?;
    let (height, width, channels, num_classes, n_layers) = (next()?, next()?, next()?, next()?, next()?);
    if n_layers > 1024 {
        return Err(Error::Format("implausible layer count".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer = match next()? as u32 {
            TAG_CONV => Layer::Conv2d(Conv2d::zeros(next()?, next()?, next()?)),
            TAG_DEPTHWISE => Layer::Depthwise(Depthwise::zeros(next()?, next()?)),
            TAG_RELU => Layer::Relu,
            TAG_MAXPOOL => Layer::MaxPool2,
            TAG_GAP => Layer::GlobalAvgPool,
            TAG_DENSE => Layer::Dense(Dense::zeros(next()?, next()?)),
            TAG_STANDARDIZE => {
                let c = next()?;
                if c > 4096 {
                    return Err(Error::Format("implausible channel count".into()));
                }
                let mut vals = Vec::with_capacity(2 * c);
                for _ in 0..2 * c {
                    vals.push(f32::from_bits(next()? as u32));
                }
                let std = vals.split_off(c);
                Layer::Standardize(Standardize::new(vals, std).map_err(|e| Error::Format(e.to_string()))?)
            }
            t => return Err(Error::Format(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    if arch != Arch::Custom && !same_structure(&layers, &arch.layers(channels, num_classes)) {
        return Err(Error::Format(format!("layer stack does not match architecture {arch}")));
    }
    let count = next()?;
    let mut model = Classifier::from_layers(arch, (height, width, channels), num_classes, layers)
        .map_err(|e| Error::Format(e.to_string()))?;
    let expected: usize = model.params().iter().map(|p| p.len()).sum();
    if count != expected {
        return Err(Error::Format(format!("parameter count {count}, layers need {expected}")));
    }
    for p in model.params_mut() {
        for v in p.iter_mut() {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b).map_err(|_| Error::Format("truncated parameter blob".into()))?;
            *v = f32::from_le_bytes(b);
        }
    }
    if cur.position() as usize != bytes.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok(model)
}
