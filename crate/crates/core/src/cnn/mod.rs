//! Compact convolutional binary classifier written from scratch.
//!
//! Each block is `conv(k x k, same padding, stride) -> ReLU -> optional 2x2
//! max-pool`. The flattened features feed an optional ReLU dense layer and a
//! two-way linear head producing logits. Samples in a batch are processed
//! independently; gradients are reduced in a fixed chunk order so results do
//! not depend on the number of worker threads.

mod adam;
mod checkpoint;
mod layers;
mod train;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, write_history_csv, EpochRecord, ImageSource, TrainConfig, TrainHistory, VecSource};

use crate::dataset::WindowClass;
use crate::gadf::GadfMatrix;

pub const CLASSES: usize = 2;
/// Samples per gradient chunk; fixed so the reduction order never changes.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),
    #[error("input shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("label {0} is not a class index")]
    BadLabel(usize),
    #[error("empty {0} set")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
}

/// Floating point type the network computes in.
pub trait Scalar: Float + NumAssign + Sum + Send + Sync + Debug + Default + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl ConvBlockConfig {
    pub fn new(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 1,
            pool: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockConfig>,
    /// Width of the hidden dense layer; 0 connects features straight to the logits.
    pub dense_width: usize,
    pub classes: usize,
}

/// Activation shape of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CnnConfig {
    /// Three 3x3 blocks of 8/16/32 channels with 2x2 pooling and a 32-wide head.
    pub fn compact(input_size: usize) -> Self {
        Self {
            input_size,
            in_channels: 1,
            blocks: vec![ConvBlockConfig::new(8), ConvBlockConfig::new(16), ConvBlockConfig::new(32)],
            dense_width: 32,
            classes: CLASSES,
        }
    }

    pub fn validate(&self) -> Result<(), CnnError> {
        let bad = |m: String| Err(CnnError::InvalidConfig(m));
        if self.classes != CLASSES {
            return bad(format!("class count must be {CLASSES}, got {}", self.classes));
        }
        if self.blocks.is_empty() {
            return bad("at least one convolution block is required".into());
        }
        if self.input_size == 0 || self.in_channels == 0 {
            return bad("input size and channel count must be positive".into());
        }
        let (mut h, mut w) = (self.input_size, self.input_size);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.stride == 0 || b.kernel % 2 == 0 {
                return bad(format!("block {i}: channels and stride must be positive and the kernel odd"));
            }
            h = (h - 1) / b.stride + 1;
            w = (w - 1) / b.stride + 1;
            if b.pool {
                if h < 2 || w < 2 {
                    return bad(format!("block {i}: {h}x{w} activation is too small to pool"));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// Input shape of every block followed by the final feature shape.
    pub fn activation_shapes(&self) -> Vec<Shape> {
        let mut shapes = vec![Shape {
            channels: self.in_channels,
            height: self.input_size,
            width: self.input_size,
        }];
        for b in &self.blocks {
            let prev = *shapes.last().expect("non-empty");
            let mut h = (prev.height - 1) / b.stride + 1;
            let mut w = (prev.width - 1) / b.stride + 1;
            if b.pool {
                h /= 2;
                w /= 2;
            }
            shapes.push(Shape {
                channels: b.out_channels,
                height: h,
                width: w,
            });
        }
        shapes
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input_size * self.input_size
    }

    pub fn feature_len(&self) -> usize {
        self.activation_shapes().last().expect("non-empty").len()
    }

    /// `(name, shape, fan_in)` of every tensor in storage order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut c = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            let fan_in = c * b.kernel * b.kernel;
            out.push((format!("conv{i}.weight"), vec![b.out_channels, c, b.kernel, b.kernel], fan_in));
            out.push((format!("conv{i}.bias"), vec![b.out_channels], fan_in));
            c = b.out_channels;
        }
        let mut width = self.feature_len();
        if self.dense_width > 0 {
            out.push(("dense.weight".into(), vec![self.dense_width, width], width));
            out.push(("dense.bias".into(), vec![self.dense_width], width));
            width = self.dense_width;
        }
        out.push(("head.weight".into(), vec![self.classes, width], width));
        out.push(("head.bias".into(), vec![self.classes], width));
        out
    }
}

/// Network weights, one flat tensor per entry of [`CnnConfig::tensor_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<F: Scalar = f64> {
    pub config: CnnConfig,
    pub params: Vec<Vec<F>>,
}

/// Same layout as [`CnnModel::params`].
pub type Gradients<F> = Vec<Vec<F>>;

impl<F: Scalar> CnnModel<F> {
    pub fn zeros(config: CnnConfig) -> Result<Self, CnnError> {
        config.validate()?;
        let params = config
            .tensor_layout()
            .iter()
            .map(|(_, shape, _)| vec![F::zero(); shape.iter().product()])
            .collect();
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Gradients<F> {
        self.params.iter().map(|p| vec![F::zero(); p.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|w| w.is_finite())
    }

    /// Same weights in another precision.
    pub fn cast<G: Scalar>(&self) -> CnnModel<G> {
        CnnModel {
            config: self.config.clone(),
            params: self.params.iter().map(|p| p.iter().map(|&w| G::of(w.f64())).collect()).collect(),
        }
    }

    fn check_batch(&self, images: &[F], batch: usize) -> Result<(), CnnError> {
        let expected = batch * self.config.input_len();
        if images.len() != expected {
            return Err(CnnError::ShapeMismatch {
                expected,
                got: images.len(),
            });
        }
        Ok(())
    }

    /// Logits for a batch of `batch` images laid out `B x C x H x W`.
    pub fn forward(&self, images: &[F], batch: usize) -> Result<Vec<[F; CLASSES]>, CnnError> {
        self.check_batch(images, batch)?;
        let n = self.config.input_len();
        Ok(images
            .par_chunks(n.max(1))
            .map(|img| layers::forward(self, img).logits)
            .collect())
    }

    /// Flattened output of the final block for one image.
    pub fn features(&self, image: &[F]) -> Result<Vec<F>, CnnError> {
        self.check_batch(image, 1)?;
        Ok(layers::forward(self, image).features().to_vec())
    }

    /// Mean cross-entropy and its exact gradient with respect to every weight.
    pub fn loss_and_grads(&self, images: &[F], labels: &[usize], batch: usize) -> Result<(F, Gradients<F>), CnnError> {
        self.check_batch(images, batch)?;
        if labels.len() != batch {
            return Err(CnnError::ShapeMismatch {
                expected: batch,
                got: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(CnnError::BadLabel(l));
        }
        let n = self.config.input_len();
        let scale = F::one() / F::of(batch as f64);
        let partials: Vec<(F, Gradients<F>)> = images
            .par_chunks(n * GRAD_CHUNK)
            .zip(labels.par_chunks(GRAD_CHUNK))
            .map(|(imgs, labs)| {
                let mut grads = self.zero_grads();
                let mut loss = F::zero();
                for (img, &label) in imgs.chunks(n).zip(labs) {
                    let cache = layers::forward(self, img);
                    let probs = softmax(&cache.logits);
                    loss += sample_loss(&cache.logits, label);
                    let mut dlogits = [F::zero(); CLASSES];
                    for c in 0..CLASSES {
                        let target = if c == label { F::one() } else { F::zero() };
                        dlogits[c] = (probs[c] - target) * scale;
                    }
                    layers::backward(self, img, &cache, dlogits, &mut grads);
                }
                (loss, grads)
            })
            .collect();

        let mut total = self.zero_grads();
        let mut loss = F::zero();
        for (l, g) in partials {
            loss += l;
            for (acc, part) in total.iter_mut().zip(g) {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += p;
                }
            }
        }
        Ok((loss * scale, total))
    }

    pub fn backward(&self, images: &[F], labels: &[usize], batch: usize) -> Result<Gradients<F>, CnnError> {
        self.loss_and_grads(images, labels, batch).map(|(_, g)| g)
    }

    /// Class and its softmax probability for one encoded window.
    pub fn predict(&self, image: &GadfMatrix) -> Result<(WindowClass, f64), CnnError> {
        let input: Vec<F> = image.data.iter().map(|&v| F::of(v)).collect();
        let logits = self.forward(&input, 1)?[0];
        Ok(class_of(&logits))
    }
}

/// Argmax class and its probability.
pub fn class_of<F: Scalar>(logits: &[F; CLASSES]) -> (WindowClass, f64) {
    let p = softmax(logits);
    let c = if p[1] > p[0] { 1 } else { 0 };
    (WindowClass::from_index(c), p[c].f64())
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init_model<F: Scalar>(config: CnnConfig, seed: u64) -> Result<CnnModel<F>, CnnError> {
    let mut model = CnnModel::<F>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ((name, _, fan_in), tensor) in model.config.tensor_layout().into_iter().zip(model.params.iter_mut()) {
        if name.ends_with(".bias") {
            continue;
        }
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for w in tensor.iter_mut() {
            *w = F::of(dist.sample(&mut rng));
        }
    }
    Ok(model)
}

pub fn softmax<F: Scalar>(logits: &[F; CLASSES]) -> [F; CLASSES] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

fn sample_loss<F: Scalar>(logits: &[F; CLASSES], label: usize) -> F {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label]
}

/// Mean of `-log softmax(logits)[label]`, stabilised by max subtraction.
pub fn cross_entropy<F: Scalar>(logits: &[[F; CLASSES]], labels: &[usize]) -> F {
    assert_eq!(logits.len(), labels.len(), "one label per row");
    if logits.is_empty() {
        return F::zero();
    }
    let total: F = logits.iter().zip(labels).map(|(l, &y)| sample_loss(l, y)).sum();
    total / F::of(logits.len() as f64)
}
