//! CapsDeMM patch classifier: convolutional stem, primary convolutional capsules,
//! per-location routing by agreement to a single secondary capsule, capsule lengths as
//! a probability map, and top-K average pooling.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::imaging::{hflip, images_to_tensor};
use crate::kernels::FlushDenormals;
use crate::metrics::{choose_cutoff, roc_and_auc};
use crate::modelfile::{self, header_usize, Arch};
use crate::optim::{Adam, AdamConfig};
use crate::params::{he_uniform, push_conv, ParamSet};
use crate::rng;
use crate::tape::{Tape, Var, BCE_CLAMP};
use crate::tensor::{Real, Tensor};

/// Output capsules per location. Routing is over a singleton, so couplings stay 1.
pub const OUTPUT_CAPSULES: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemLayer {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsConfig {
    /// Unpadded conv + ReLU layers ahead of the primary capsules.
    pub stem: Vec<StemLayer>,
    pub capsule_types: usize,
    pub capsule_dim: usize,
    pub caps_kernel: usize,
    pub caps_stride: usize,
    pub secondary_dim: usize,
    pub routing_iterations: usize,
    /// Top-K pool size.
    pub k: usize,
    pub patch_size: usize,
}

impl Default for CapsConfig {
    fn default() -> Self {
        CapsConfig {
            stem: vec![
                StemLayer {
                    filters: 16,
                    kernel: 5,
                    stride: 2,
                },
                StemLayer {
                    filters: 32,
                    kernel: 5,
                    stride: 2,
                },
            ],
            capsule_types: 16,
            capsule_dim: 8,
            caps_kernel: 5,
            caps_stride: 2,
            secondary_dim: 16,
            routing_iterations: 3,
            k: 5,
            patch_size: 224,
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> Option<usize> {
    (size >= kernel).then(|| (size - kernel) / stride + 1)
}

impl CapsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.routing_iterations == 0 || self.capsule_dim == 0 {
            return Err(Error::Config(
                "caps k, routing_iterations and capsule_dim must be at least 1".into(),
            ));
        }
        if self.capsule_types == 0 || self.secondary_dim == 0 || self.caps_kernel == 0 || self.caps_stride == 0 {
            return Err(Error::Config("capsule geometry must be positive".into()));
        }
        if self
            .stem
            .iter()
            .any(|l| l.filters == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(Error::Config(
                "stem layers must have positive filters, kernel and stride".into(),
            ));
        }
        let (h, w) = self.map_size(self.patch_size)?;
        if self.k > h * w {
            return Err(Error::Config(format!(
                "k = {} exceeds the {h}x{w} probability map",
                self.k
            )));
        }
        Ok(())
    }

    /// Spatial size of the probability map for a square input of side `input`.
    pub fn map_size(&self, input: usize) -> Result<(usize, usize)> {
        let mut s = input;
        for l in &self.stem {
            s = conv_out(s, l.kernel, l.stride)
                .ok_or_else(|| dim_err!("stem kernel {} larger than its {s}px input", l.kernel))?;
        }
        let s = conv_out(s, self.caps_kernel, self.caps_stride)
            .ok_or_else(|| dim_err!("capsule kernel {} larger than {s}px stem output", self.caps_kernel))?;
        Ok((s, s))
    }

    fn stem_out_channels(&self) -> usize {
        self.stem.last().map_or(3, |l| l.filters)
    }

    fn header(&self, cutoff: f64) -> Vec<f32> {
        let mut h = vec![self.patch_size as f32, self.stem.len() as f32];
        for l in &self.stem {
            h.extend([l.filters as f32, l.kernel as f32, l.stride as f32]);
        }
        h.extend(
            [
                self.capsule_types,
                self.capsule_dim,
                self.caps_kernel,
                self.caps_stride,
                self.secondary_dim,
                self.routing_iterations,
                self.k,
            ]
            .map(|v| v as f32),
        );
        h.push(cutoff as f32);
        h
    }

    fn from_header(h: &[f32]) -> Result<(Self, f64)> {
        let n = header_usize(h, 1)?;
        let stem = (0..n)
            .map(|i| {
                Ok(StemLayer {
                    filters: header_usize(h, 2 + 3 * i)?,
                    kernel: header_usize(h, 3 + 3 * i)?,
                    stride: header_usize(h, 4 + 3 * i)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let b = 2 + 3 * n;
        let cfg = CapsConfig {
            patch_size: header_usize(h, 0)?,
            stem,
            capsule_types: header_usize(h, b)?,
            capsule_dim: header_usize(h, b + 1)?,
            caps_kernel: header_usize(h, b + 2)?,
            caps_stride: header_usize(h, b + 3)?,
            secondary_dim: header_usize(h, b + 4)?,
            routing_iterations: header_usize(h, b + 5)?,
            k: header_usize(h, b + 6)?,
        };
        let cutoff = *h
            .get(b + 7)
            .ok_or_else(|| Error::Format("model header lacks cutoff".into()))?;
        if h.len() != b + 8 {
            return Err(Error::Format("model header has trailing fields".into()));
        }
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok((cfg, cutoff as f64))
    }
}

pub fn build_params<T: Real>(config: &CapsConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut r = rng::seeded(seed);
    let mut p = ParamSet::new();
    let mut in_ch = 3;
    for (i, l) in config.stem.iter().enumerate() {
        push_conv(&mut p, &format!("stem{i}"), in_ch, l.filters, l.kernel, &mut r);
        in_ch = l.filters;
    }
    push_conv(
        &mut p,
        "primary",
        in_ch,
        config.capsule_types * config.capsule_dim,
        config.caps_kernel,
        &mut r,
    );
    let (i, d) = (config.capsule_types, config.capsule_dim);
    p.push(
        "route.weight",
        he_uniform(&[i, OUTPUT_CAPSULES, d, config.secondary_dim], i * d, &mut r),
    );
    Ok(p)
}

/// Handles recorded by one forward pass.
pub struct CapsTrace {
    /// Squashed primary capsules `[N*H*W, types, dim]`.
    pub primary: Var,
    /// Coupling coefficients `[N*H*W, types, 1]`, one per routing iteration.
    pub couplings: Vec<Var>,
    /// Secondary capsules `[N*H*W, 1, secondary_dim]`.
    pub secondary: Var,
    /// Capsule lengths `[N, H*W]`.
    pub map: Var,
    /// Top-K average per patch `[N]`.
    pub pooled: Var,
    pub grid: (usize, usize),
}

pub fn forward<T: Real>(config: &CapsConfig, tape: &mut Tape<T>, vars: &[Var], input: Var) -> Result<CapsTrace> {
    let mut next = vars.iter().copied();
    let mut x = input;
    for l in &config.stem {
        let (w, b) = (next.next().expect("stem weight"), next.next().expect("stem bias"));
        x = tape.conv2d(x, w, Some(b), l.stride, 0)?;
        x = tape.relu(x)?;
    }
    let (w, b) = (next.next().expect("primary weight"), next.next().expect("primary bias"));
    let [n, c, h, wd] = match *tape.shape(x) {
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!("conv output is rank 4"),
    };
    if h < config.caps_kernel || wd < config.caps_kernel || c != config.stem_out_channels() {
        return Err(dim_err!("stem output {h}x{wd}x{c} cannot feed the capsule layer"));
    }
    let caps = tape.conv2d(x, w, Some(b), config.caps_stride, 0)?;
    let grid = (tape.shape(caps)[2], tape.shape(caps)[3]);
    let u = tape.to_capsules(caps, config.capsule_types, config.capsule_dim)?;
    let primary = tape.squash(u)?;
    let route_w = next.next().expect("routing weight");
    let uhat = tape.capsule_predict(primary, route_w)?;
    let m = n * grid.0 * grid.1;
    let mut logits = tape.constant(Tensor::zeros(&[m, config.capsule_types, OUTPUT_CAPSULES]));
    let mut couplings = Vec::with_capacity(config.routing_iterations);
    let mut v = None;
    for it in 0..config.routing_iterations {
        let cpl = tape.softmax(logits, 2)?;
        couplings.push(cpl);
        let s = tape.weighted_sum(cpl, uhat)?;
        let vi = tape.squash(s)?;
        v = Some(vi);
        if it + 1 < config.routing_iterations {
            let a = tape.agreement(uhat, vi)?;
            logits = tape.add(logits, a)?;
        }
    }
    let secondary = v.expect("at least one routing iteration");
    let lengths = tape.norm_last(secondary)?;
    let map = tape.reshape(lengths, &[n, grid.0 * grid.1 * OUTPUT_CAPSULES])?;
    let pooled = tape.topk_mean(map, config.k)?;
    Ok(CapsTrace {
        primary,
        couplings,
        secondary,
        map,
        pooled,
        grid,
    })
}

/// `v = |s|^2 / (1 + |s|^2) * s / |s|`, with `squash(0) = 0`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let r2: f64 = s.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let f = r2 / (1.0 + r2) / r2.sqrt();
    s.iter().map(|v| v * f).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Output capsules `[J][E]` after the last iteration.
    pub v: Vec<Vec<f64>>,
    /// Coupling coefficients `[iteration][I][J]`.
    pub couplings: Vec<Vec<Vec<f64>>>,
}

/// Routing by agreement over predictions `uhat[i][j]` (each of length E).
pub fn route(uhat: &[Vec<Vec<f64>>], iterations: usize) -> Result<Routing> {
    if iterations == 0 {
        return Err(Error::Parameter("routing needs at least one iteration".into()));
    }
    let ni = uhat.len();
    let nj = uhat.first().map_or(0, Vec::len);
    let e = uhat.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if ni == 0 || nj == 0 || uhat.iter().any(|r| r.len() != nj || r.iter().any(|p| p.len() != e)) {
        return Err(dim_err!("route: ragged or empty prediction array"));
    }
    let mut b = vec![vec![0.0; nj]; ni];
    let mut couplings = Vec::with_capacity(iterations);
    let mut v = vec![vec![0.0; e]; nj];
    for it in 0..iterations {
        let c: Vec<Vec<f64>> = b
            .iter()
            .map(|row| {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                ex.iter().map(|x| x / z).collect()
            })
            .collect();
        for j in 0..nj {
            let mut s = vec![0.0; e];
            for i in 0..ni {
                for (acc, &p) in s.iter_mut().zip(&uhat[i][j]) {
                    *acc += c[i][j] * p;
                }
            }
            v[j] = squash(&s);
        }
        couplings.push(c);
        if it + 1 < iterations {
            for i in 0..ni {
                for j in 0..nj {
                    b[i][j] += uhat[i][j].iter().zip(&v[j]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    Ok(Routing { v, couplings })
}

/// Mean of the `k` largest values.
pub fn topk_average(map: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > map.len() {
        return Err(Error::Parameter(format!(
            "top-K size {k} must lie in 1..={}",
            map.len()
        )));
    }
    let mut sorted = map.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapsModel {
    pub config: CapsConfig,
    pub params: ParamSet<f32>,
    /// Patch decision threshold on the pooled probability.
    pub cutoff: f64,
}

/// Patches per inference batch.
const INFER_BATCH: usize = 16;

impl CapsModel {
    pub fn new(config: CapsConfig, seed: u64) -> Result<Self> {
        Ok(CapsModel {
            params: build_params(&config, seed)?,
            config,
            cutoff: 0.5,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_patches(&self, patches: &[&RgbImage]) -> Result<()> {
        let s = self.config.patch_size as u32;
        match patches.iter().find(|p| p.width() != s || p.height() != s) {
            Some(p) => Err(dim_err!("patch is {}x{}, model expects {s}x{s}", p.width(), p.height())),
            None => Ok(()),
        }
    }

    /// Probability maps (row-major, one per patch).
    pub fn probability_maps(&self, patches: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let _ftz = FlushDenormals::new();
        self.check_patches(patches)?;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFER_BATCH) {
            let mut tape = Tape::new();
            let vars = self.params.attach(&mut tape, false);
            let x = tape.constant(images_to_tensor(chunk)?);
            let trace = forward(&self.config, &mut tape, &vars, x)?;
            let cells = trace.grid.0 * trace.grid.1;
            for row in tape.value(trace.map).data().chunks(cells) {
                out.push(row.iter().map(|&v| v as f64).collect());
            }
        }
        Ok(out)
    }

    /// Pooled patch probabilities at the configured K.
    pub fn predict(&self, patches: &[&RgbImage]) -> Result<Vec<f64>> {
        self.probability_maps(patches)?
            .iter()
            .map(|m| topk_average(m, self.config.k))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        modelfile::save_model(path, Arch::CapsDeMM, &self.config.header(self.cutoff), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        modelfile::encode_model(Arch::CapsDeMM, &self.config.header(self.cutoff), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = modelfile::load_model(path, Arch::CapsDeMM)?;
        let (config, cutoff) = CapsConfig::from_header(&header)?;
        let mut params = build_params(&config, 0)?;
        modelfile::fill_params(&mut params, tensors)?;
        Ok(CapsModel { config, params, cutoff })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for CapsTrainConfig {
    fn default() -> Self {
        CapsTrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 2e-3,
            hflip: true,
            seed: 11,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapsEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Training accuracy at probability 0.5, measured during the epoch's updates.
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

pub type LabeledPatch = (RgbImage, bool);

fn eval_split(model: &CapsModel, data: &[LabeledPatch]) -> Result<(Vec<f64>, Vec<bool>)> {
    let refs: Vec<&RgbImage> = data.iter().map(|(p, _)| p).collect();
    let scores = model.predict(&refs)?;
    Ok((scores, data.iter().map(|(_, l)| *l).collect()))
}

fn has_both(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

/// Trains with Adam on the pooled-probability BCE. Returns the snapshot with the best
/// validation AUC (last epoch if validation lacks a class) with its Youden cutoff set
/// from the validation ROC (training ROC as a fallback, else 0.5).
pub fn train_patch_classifier(
    train: &[LabeledPatch],
    val: &[LabeledPatch],
    config: &CapsConfig,
    tc: &CapsTrainConfig,
) -> Result<(CapsModel, Vec<CapsEpoch>)> {
    if train.is_empty() {
        return Err(Error::Data("patch training set is empty".into()));
    }
    if tc.batch_size == 0 || tc.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let _ftz = FlushDenormals::new();
    let mut model = CapsModel::new(config.clone(), tc.seed)?;
    {
        let refs: Vec<&RgbImage> = train.iter().chain(val).map(|(p, _)| p).collect();
        model.check_patches(&refs)?;
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: tc.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let val_labels: Vec<bool> = val.iter().map(|(_, l)| *l).collect();
    let use_val = has_both(&val_labels);
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut r = rng::derived(tc.seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut r);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let flipped: Vec<Option<RgbImage>> = chunk
                .iter()
                .map(|&i| (tc.hflip && r.gen_bool(0.5)).then(|| hflip(&train[i].0)))
                .collect();
            let refs: Vec<&RgbImage> = chunk
                .iter()
                .zip(&flipped)
                .map(|(&i, f)| f.as_ref().unwrap_or(&train[i].0))
                .collect();
            let targets: Vec<f32> = chunk.iter().map(|&i| train[i].1 as u8 as f32).collect();
            let mut tape = Tape::new();
            let vars = model.params.attach(&mut tape, true);
            let x = tape.constant(images_to_tensor(&refs)?);
            let trace = forward(&model.config, &mut tape, &vars, x)?;
            let loss = tape.bce(trace.pooled, &targets)?;
            loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            correct += tape
                .value(trace.pooled)
                .data()
                .iter()
                .zip(&targets)
                .filter(|(&p, &y)| (p >= 0.5) == (y == 1.0))
                .count();
            tape.backward(loss)?;
            let grads = model.params.collect_grads(&mut tape, &vars);
            adam.step(&mut model.params, &grads)?;
        }
        let (val_loss, val_auc) = if val.is_empty() {
            (None, None)
        } else {
            let (scores, labels) = eval_split(&model, val)?;
            let loss = scores
                .iter()
                .zip(&labels)
                .map(|(&p, &l)| bce_loss(p, l as u8 as f64))
                .sum::<f64>()
                / scores.len() as f64;
            let auc = if use_val {
                Some(roc_and_auc(&scores, &labels)?.auc)
            } else {
                None
            };
            (Some(loss), auc)
        };
        history.push(CapsEpoch {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_auc,
        });
        if let Some(a) = val_auc {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, model.params.clone()));
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    model.cutoff = if use_val {
        let (scores, labels) = eval_split(&model, val)?;
        choose_cutoff(&roc_and_auc(&scores, &labels)?)
    } else {
        let (scores, labels) = eval_split(&model, train)?;
        if has_both(&labels) {
            choose_cutoff(&roc_and_auc(&scores, &labels)?)
        } else {
            0.5
        }
    };
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v = squash(&[0.6, 0.8]);
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.4).abs() < 1e-15);
        let v = squash(&[3.0, 0.0, 0.0]);
        assert!((v[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn topk_examples() {
        assert!((topk_average(&[0.9, 0.8, 0.1], 2).unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(topk_average(&[0.2, 0.7, 0.4], 1).unwrap(), 0.7);
        assert!((topk_average(&[0.2, 0.7, 0.3], 3).unwrap() - 0.4).abs() < 1e-15);
        assert!(topk_average(&[0.2], 2).is_err());
    }

    #[test]
    fn bce_at_half() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0 - 1e-12, 1.0) < 1e-6);
    }

    #[test]
    fn default_map_is_25_by_25() {
        let cfg = CapsConfig::default();
        assert_eq!(cfg.map_size(224).unwrap(), (25, 25));
        let no_stem = CapsConfig {
            stem: vec![],
            ..CapsConfig::default()
        };
        assert_eq!(no_stem.map_size(56).unwrap(), (26, 26));
    }

    #[test]
    fn zero_input_gives_zero_probability() {
        let cfg = CapsConfig {
            patch_size: 64,
            k: 3,
            ..CapsConfig::default()
        };
        // Biases start at zero, so a zero input stays zero through every layer.
        let params = build_params::<f32>(&cfg, 4).unwrap();
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let tr = forward(&cfg, &mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(tr.pooled).data(), &[0.0]);
        let model = CapsModel::new(cfg, 4).unwrap();
        assert!(model.predict(&[&RgbImage::new(63, 64)]).is_err());
    }

    #[test]
    fn model_round_trip() {
        let cfg = CapsConfig {
            patch_size: 48,
            ..CapsConfig::default()
        };
        let mut model = CapsModel::new(cfg, 9).unwrap();
        model.cutoff = 0.375;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("caps.cdmm");
        model.save(&p).unwrap();
        assert_eq!(CapsModel::load(&p).unwrap(), model);
        assert!(matches!(crate::unet::SegModel::load(&p), Err(Error::Format(_))));
    }
}
