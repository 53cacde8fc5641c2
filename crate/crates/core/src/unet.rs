//! U-Net for stratum-corneum segmentation, trained on the dice objective.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::imaging::{hflip, images_to_tensor, resize_rgb};
use crate::kernels::FlushDenormals;
use crate::mask::SegMask;
use crate::modelfile::{self, header_usize, Arch};
use crate::optim::{Adam, AdamConfig};
use crate::params::{push_conv, ParamSet};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Smoothing constant added to both sides of the dice ratio.
pub const DICE_EPS: f64 = 1.0;
pub const SEG_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub kernel_size: usize,
    pub input_channels: usize,
    pub train_height: usize,
    pub train_width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_filters: 16,
            kernel_size: 3,
            input_channels: 3,
            train_height: 192,
            train_width: 256,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_filters == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "unet depth, base_filters and input_channels must be positive".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "unet kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        let unit = 1usize << self.depth;
        if self.train_height == 0
            || self.train_width == 0
            || !self.train_height.is_multiple_of(unit)
            || !self.train_width.is_multiple_of(unit)
        {
            return Err(Error::Config(format!(
                "train size {}x{} must be divisible by 2^{} = {unit}",
                self.train_height, self.train_width, self.depth
            )));
        }
        Ok(())
    }

    /// Filters at encoder stage `i` (stage `depth` is the bottleneck).
    pub fn filters_at(&self, stage: usize) -> usize {
        self.base_filters << stage
    }

    fn header(&self) -> Vec<f32> {
        [
            self.depth,
            self.base_filters,
            self.kernel_size,
            self.input_channels,
            self.train_height,
            self.train_width,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    fn from_header(h: &[f32]) -> Result<Self> {
        let cfg = UNetConfig {
            depth: header_usize(h, 0)?,
            base_filters: header_usize(h, 1)?,
            kernel_size: header_usize(h, 2)?,
            input_channels: header_usize(h, 3)?,
            train_height: header_usize(h, 4)?,
            train_width: header_usize(h, 5)?,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: UNetConfig,
    pub params: ParamSet<f32>,
}

/// Allocates He-initialised parameters in forward order.
pub fn build_params<T: Real>(config: &UNetConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut r = rng::seeded(seed);
    let k = config.kernel_size;
    let mut p = ParamSet::new();
    let mut in_ch = config.input_channels;
    for i in 0..config.depth {
        let f = config.filters_at(i);
        push_conv(&mut p, &format!("enc{i}.conv1"), in_ch, f, k, &mut r);
        push_conv(&mut p, &format!("enc{i}.conv2"), f, f, k, &mut r);
        in_ch = f;
    }
    let fb = config.filters_at(config.depth);
    push_conv(&mut p, "bottleneck.conv1", in_ch, fb, k, &mut r);
    push_conv(&mut p, "bottleneck.conv2", fb, fb, k, &mut r);
    let mut below = fb;
    for i in (0..config.depth).rev() {
        let f = config.filters_at(i);
        push_conv(&mut p, &format!("dec{i}.conv1"), below + f, f, k, &mut r);
        push_conv(&mut p, &format!("dec{i}.conv2"), f, f, k, &mut r);
        below = f;
    }
    push_conv(&mut p, "head", below, 1, 1, &mut r);
    Ok(p)
}

/// Intermediate handles of one forward pass.
pub struct UNetTrace {
    pub probs: Var,
    /// Encoder skip outputs, shallowest first.
    pub skips: Vec<Var>,
    /// Upsampled decoder inputs matching `skips`.
    pub ups: Vec<Var>,
}

/// Records the network on `tape`; `vars` are the attached parameters in build order.
pub fn forward<T: Real>(config: &UNetConfig, tape: &mut Tape<T>, vars: &[Var], input: Var) -> Result<UNetTrace> {
    let mut next = vars.iter().copied();
    let pad = config.kernel_size / 2;
    let mut conv_relu = |tape: &mut Tape<T>, x: Var, pad: usize| -> Result<Var> {
        let (w, b) = (next.next().expect("weight"), next.next().expect("bias"));
        let y = tape.conv2d(x, w, Some(b), 1, pad)?;
        tape.relu(y)
    };
    let mut x = input;
    let mut skips = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        x = conv_relu(tape, x, pad)?;
        x = conv_relu(tape, x, pad)?;
        skips.push(x);
        x = tape.maxpool2d(x, 2, 2)?;
    }
    x = conv_relu(tape, x, pad)?;
    x = conv_relu(tape, x, pad)?;
    let mut ups = vec![x; config.depth];
    for i in (0..config.depth).rev() {
        let up = tape.upsample2d_nearest(x, 2)?;
        ups[i] = up;
        x = tape.concat_channels(up, skips[i])?;
        x = conv_relu(tape, x, pad)?;
        x = conv_relu(tape, x, pad)?;
    }
    let (w, b) = (next.next().expect("head weight"), next.next().expect("head bias"));
    let logits = tape.conv2d(x, w, Some(b), 1, 0)?;
    let probs = tape.sigmoid(logits)?;
    Ok(UNetTrace { probs, skips, ups })
}

/// Plain dice coefficient with smoothing: `(2 sum(G S) + eps) / (sum G + sum S + eps)`.
pub fn dice_coefficient(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(dim_err!("dice: {} predictions vs {} targets", pred.len(), gt.len()));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let total: f64 = pred.iter().sum::<f64>() + gt.iter().sum::<f64>();
    Ok((2.0 * inter + DICE_EPS) / (total + DICE_EPS))
}

pub fn seg_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    Ok(1.0 - dice_coefficient(pred, gt)?)
}

impl SegModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        Ok(SegModel {
            params: build_params(&config, seed)?,
            config,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    /// Probability maps for images already at the training size.
    pub fn predict(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        let _ftz = FlushDenormals::new();
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let mut tape = Tape::new();
            let vars = self.params.attach(&mut tape, false);
            let x = tape.constant(images_to_tensor(&[*img])?);
            let trace = forward(&self.config, &mut tape, &vars, x)?;
            out.push(tape.value(trace.probs).data().to_vec());
        }
        Ok(out)
    }

    /// Native-resolution mask: downsample, predict, threshold at 0.5, nearest upscale.
    pub fn segment(&self, image: &RgbImage) -> Result<SegMask> {
        let (tw, th) = (self.config.train_width, self.config.train_height);
        let small = resize_rgb(image, tw, th);
        let probs = self.predict(&[&small])?.pop().expect("one map");
        let low = SegMask::from_probabilities(tw, th, &probs, SEG_THRESHOLD)?;
        Ok(low.resize_nearest(image.width() as usize, image.height() as usize))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        modelfile::save_model(path, Arch::UNet, &self.config.header(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        modelfile::encode_model(Arch::UNet, &self.config.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = modelfile::load_model(path, Arch::UNet)?;
        let config = UNetConfig::from_header(&header)?;
        let mut params = build_params(&config, 0)?;
        modelfile::fill_params(&mut params, tensors)?;
        Ok(SegModel { config, params })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Random horizontal flips of training pairs.
    pub hflip: bool,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 10,
            batch_size: 4,
            learning_rate: 3e-4,
            hflip: false,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean hard dice on the validation set at training resolution.
    pub val_dice: Option<f64>,
}

/// A training pair resized to the network input size.
struct Sample {
    image: RgbImage,
    mask: SegMask,
}

fn prepare(pairs: &[(RgbImage, SegMask)], config: &UNetConfig) -> Result<Vec<Sample>> {
    pairs
        .iter()
        .map(|(img, m)| {
            if img.width() as usize != m.width() || img.height() as usize != m.height() {
                return Err(dim_err!(
                    "image {}x{} with mask {}x{}",
                    img.width(),
                    img.height(),
                    m.width(),
                    m.height()
                ));
            }
            Ok(Sample {
                image: resize_rgb(img, config.train_width, config.train_height),
                mask: m.resize_nearest(config.train_width, config.train_height),
            })
        })
        .collect()
}

/// Mean thresholded dice of `model` over prepared samples.
fn mean_dice(model: &SegModel, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let probs = model.predict(&[&s.image])?.pop().expect("one map");
        let pred = SegMask::from_probabilities(s.mask.width(), s.mask.height(), &probs, SEG_THRESHOLD)?;
        total += pred.dice(&s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains with Adam on the dice loss; returns the snapshot with the best validation
/// dice (the last epoch when `val` is empty) and per-epoch history.
pub fn train_segmenter(
    train: &[(RgbImage, SegMask)],
    val: &[(RgbImage, SegMask)],
    config: &UNetConfig,
    tc: &SegTrainConfig,
) -> Result<(SegModel, Vec<SegEpoch>)> {
    if train.is_empty() {
        return Err(Error::Data("segmentation training set is empty".into()));
    }
    if tc.batch_size == 0 || tc.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let _ftz = FlushDenormals::new();
    let train = prepare(train, config)?;
    let val = prepare(val, config)?;
    let mut model = SegModel::new(*config, tc.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: tc.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut r = rng::derived(tc.seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(tc.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len() * config.train_width * config.train_height);
            for &i in chunk {
                let s = &train[i];
                if tc.hflip && r.gen_bool(0.5) {
                    images.push(hflip(&s.image));
                    let w = s.mask.width();
                    for row in s.mask.values().chunks(w) {
                        targets.extend(row.iter().rev().map(|&v| v as f32));
                    }
                } else {
                    images.push(s.image.clone());
                    targets.extend(s.mask.values().iter().map(|&v| v as f32));
                }
            }
            let refs: Vec<&RgbImage> = images.iter().collect();
            let mut tape = Tape::new();
            let vars = model.params.attach(&mut tape, true);
            let x = tape.constant(images_to_tensor(&refs)?);
            let trace = forward(config, &mut tape, &vars, x)?;
            let loss = tape.dice_loss(trace.probs, &targets, DICE_EPS as f32)?;
            loss_sum += tape.value(loss).data()[0] as f64;
            batches += 1;
            tape.backward(loss)?;
            let grads = model.params.collect_grads(&mut tape, &vars);
            adam.step(&mut model.params, &grads)?;
        }
        let val_dice = if val.is_empty() {
            None
        } else {
            Some(mean_dice(&model, &val)?)
        };
        history.push(SegEpoch {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            val_dice,
        });
        match val_dice {
            Some(d) if best.as_ref().is_none_or(|(b, _)| d > *b) => best = Some((d, model.params.clone())),
            _ => {}
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}
