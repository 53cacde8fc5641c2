//! Synthetic biopsy images: a white slide with a tissue section whose top layer is a
//! pale stratum-corneum band. Positive images carry clusters of small dark-blue round
//! neutrophils inside the band; both classes carry light-blue oval nuclei there and
//! purple nuclei in the epidermis below.
//!
//! Every record is a pure function of `(config, index, label)`: all randomness comes
//! from `rng::derived(config.seed, index)` (xoshiro256++ seeded through SplitMix64).

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::patches::PatchSpec;
use crate::rng::{self, Rng64};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Band thickness range as fractions of the image height.
    pub band_thickness: (f64, f64),
    /// Neutrophils per positive image.
    pub neutrophils: (usize, usize),
    /// Light-blue nuclei inside the band.
    pub sc_nuclei: (usize, usize),
    pub neutrophil_radius: (usize, usize),
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise: f64,
    /// Maximum relative per-channel colour scaling per image.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 646,
            height: 484,
            band_thickness: (0.06, 0.10),
            neutrophils: (5, 12),
            sc_nuclei: (6, 20),
            neutrophil_radius: (3, 6),
            noise: 6.0,
            color_jitter: 0.06,
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.band_thickness;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(Error::Config(format!(
                "band thickness range ({lo}, {hi}) must satisfy 0 < min <= max < 0.5 of the height"
            )));
        }
        if self.width < 64 || self.height < 64 {
            return Err(Error::Config("synthetic images must be at least 64x64".into()));
        }
        let (rlo, rhi) = self.neutrophil_radius;
        if rlo == 0 || rlo > rhi || (2 * rhi) as f64 >= lo * self.height as f64 {
            return Err(Error::Config(format!(
                "neutrophil radius range ({rlo}, {rhi}) does not fit the band"
            )));
        }
        for (name, (a, b)) in [("neutrophils", self.neutrophils), ("sc_nuclei", self.sc_nuclei)] {
            if a > b {
                return Err(Error::Config(format!("{name} range ({a}, {b}) is inverted")));
            }
        }
        if self.neutrophils.0 == 0 {
            return Err(Error::Config("positive images need at least one neutrophil".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.color_jitter) {
            return Err(Error::Config("noise must be >= 0 and color_jitter in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub index: usize,
    pub image: RgbImage,
    pub sc_mask: SegMask,
    /// Pixel centres `(x, y)` of the neutrophils.
    pub neutrophils: Vec<(usize, usize)>,
    pub positive: bool,
}

/// Smooth random curve: a sum of two sinusoids around `base`.
struct Wave {
    base: f64,
    terms: [(f64, f64, f64); 2],
}

impl Wave {
    fn new(r: &mut Rng64, base: f64, amp: f64, width: f64) -> Self {
        let mut term = |a: f64| {
            (
                amp * a * r.gen_range(0.5..1.0),
                2.0 * PI / (width * r.gen_range(0.6..1.6)),
                r.gen_range(0.0..2.0 * PI),
            )
        };
        Wave {
            base,
            terms: [term(1.0), term(0.4)],
        }
    }

    fn at(&self, x: f64) -> f64 {
        self.base + self.terms.iter().map(|(a, f, p)| a * (f * x + p).sin()).sum::<f64>()
    }
}

#[derive(Clone, Copy)]
enum Layer {
    Slide,
    Corneum,
    Epidermis,
    Dermis,
}

fn jitter(c: [f64; 3], scale: &[f64; 3]) -> [f64; 3] {
    [c[0] * scale[0], c[1] * scale[1], c[2] * scale[2]]
}

fn fill_ellipse(
    buf: &mut [[f64; 3]],
    w: usize,
    h: usize,
    centre: (f64, f64),
    axes: (f64, f64),
    angle: f64,
    color: [f64; 3],
) {
    let reach = axes.0.max(axes.1).ceil() as isize + 1;
    let (cs, sn) = (angle.cos(), angle.sin());
    let (cx, cy) = centre;
    for y in (cy as isize - reach).max(0)..=(cy as isize + reach).min(h as isize - 1) {
        for x in (cx as isize - reach).max(0)..=(cx as isize + reach).min(w as isize - 1) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = (dx * cs + dy * sn) / axes.0;
            let v = (-dx * sn + dy * cs) / axes.1;
            if u * u + v * v <= 1.0 {
                buf[y as usize * w + x as usize] = color;
            }
        }
    }
}

pub fn generate_wsi(config: &SynthConfig, index: usize, positive: bool) -> Result<SynthRecord> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let (wf, hf) = (w as f64, h as f64);
    let mut r = rng::derived(config.seed, index as u64);

    let top_base = hf * r.gen_range(0.18..0.28);
    let top = Wave::new(&mut r, top_base, hf * 0.06, wf);
    let (tlo, thi) = config.band_thickness;
    let thick_mid = hf * r.gen_range(tlo..=thi);
    let thick = Wave::new(
        &mut r,
        thick_mid,
        (thick_mid - tlo * hf).min(thi * hf - thick_mid) * 0.9,
        wf,
    );
    let dermis_base = hf * r.gen_range(0.55..0.7);
    let dermis = Wave::new(&mut r, dermis_base, hf * 0.05, wf);
    let tops: Vec<f64> = (0..w).map(|x| top.at(x as f64).max(2.0)).collect();
    let bottoms: Vec<f64> = (0..w)
        .map(|x| (tops[x] + thick.at(x as f64).clamp(tlo * hf, thi * hf)).min(hf - 2.0))
        .collect();
    let dermis_y: Vec<f64> = (0..w).map(|x| dermis.at(x as f64).max(bottoms[x] + 0.1 * hf)).collect();

    let j = config.color_jitter;
    let scale = [
        1.0 + r.gen_range(-j..=j),
        1.0 + r.gen_range(-j..=j),
        1.0 + r.gen_range(-j..=j),
    ];
    let slide = [242.0, 240.0, 244.0];
    let corneum = jitter([236.0, 186.0, 206.0], &scale);
    let epidermis = jitter([196.0, 118.0, 168.0], &scale);
    let dermis_c = jitter([228.0, 168.0, 196.0], &scale);
    let sc_nucleus = jitter([150.0, 176.0, 222.0], &scale);
    let epi_nucleus = jitter([122.0, 66.0, 146.0], &scale);
    let neutrophil = jitter([38.0, 40.0, 132.0], &scale);
    let streak_phase = r.gen_range(0.0..2.0 * PI);
    let mottle = Wave::new(&mut r, 0.0, 1.0, 90.0);

    let mut mask = SegMask::zeros(w, h);
    let mut buf = vec![[0.0f64; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let yf = y as f64;
            let layer = if yf < tops[x] {
                Layer::Slide
            } else if yf < bottoms[x] {
                Layer::Corneum
            } else if yf < dermis_y[x] {
                Layer::Epidermis
            } else {
                Layer::Dermis
            };
            let texture = 1.0 + 0.03 * mottle.at(x as f64 + 0.7 * yf);
            buf[y * w + x] = match layer {
                Layer::Slide => slide,
                Layer::Corneum => {
                    mask.set(x, y, true);
                    let streak = 1.0 - 0.035 * (0.9 * (yf - tops[x]) + streak_phase).sin().abs();
                    corneum.map(|c| c * streak)
                }
                Layer::Epidermis => epidermis.map(|c| c * texture),
                Layer::Dermis => dermis_c.map(|c| c * texture),
            };
        }
    }

    let in_band = |x: f64, y: f64, margin: f64| {
        let xi = (x.round() as usize).min(w - 1);
        y >= tops[xi] + margin && y <= bottoms[xi] - 1.0 - margin
    };

    // Epidermal nuclei: purple ovals below the band.
    let epi_count = (w * h) / 1400;
    for _ in 0..epi_count {
        let x = r.gen_range(0.0..wf);
        let xi = x as usize;
        if dermis_y[xi] - bottoms[xi] < 8.0 {
            continue;
        }
        let y = r.gen_range(bottoms[xi] + 4.0..dermis_y[xi] - 2.0);
        let a = r.gen_range(4.0..7.0);
        let b = a * r.gen_range(0.55..0.8);
        fill_ellipse(&mut buf, w, h, (x, y), (a, b), r.gen_range(0.0..PI), epi_nucleus);
    }
    // Parakeratotic nuclei: light-blue ovals inside the band.
    for _ in 0..r.gen_range(config.sc_nuclei.0..=config.sc_nuclei.1) {
        for _attempt in 0..20 {
            let x = r.gen_range(0.0..wf);
            let xi = x as usize;
            let y = r.gen_range(tops[xi]..bottoms[xi]);
            if in_band(x, y, 3.0) {
                let a = r.gen_range(5.0..8.0);
                let b = a * r.gen_range(0.45..0.65);
                fill_ellipse(&mut buf, w, h, (x, y), (a, b), r.gen_range(-0.4..0.4), sc_nucleus);
                break;
            }
        }
    }
    // Neutrophils: one or two clusters of dark-blue discs, centres inside the band.
    let mut neutrophils = Vec::new();
    if positive {
        let n = r.gen_range(config.neutrophils.0..=config.neutrophils.1);
        let clusters = if n >= 6 && r.gen_bool(0.5) { 2 } else { 1 };
        let centres: Vec<f64> = (0..clusters).map(|_| r.gen_range(0.08 * wf..0.92 * wf)).collect();
        let (rlo, rhi) = config.neutrophil_radius;
        let mut attempts = 0;
        while neutrophils.len() < n && attempts < 400 * n {
            attempts += 1;
            let cx = centres[neutrophils.len() % clusters];
            let x = (cx + r.gen_range(-28.0..28.0)).clamp(0.0, wf - 1.0).round();
            let xi = x as usize;
            let y = r.gen_range(tops[xi]..bottoms[xi]).round();
            let rad = r.gen_range(rlo..=rhi) as f64;
            if !in_band(x, y, (rad - 1.0).max(1.0)) || !mask.get(xi, y as usize) {
                continue;
            }
            fill_ellipse(&mut buf, w, h, (x, y), (rad, rad), 0.0, neutrophil);
            // Lighter lobe speckle keeps the discs from being flat colour.
            let lobe = neutrophil.map(|c| c * 1.35);
            fill_ellipse(
                &mut buf,
                w,
                h,
                (x - rad * 0.3, y - rad * 0.3),
                (rad * 0.3, rad * 0.3),
                0.0,
                lobe,
            );
            neutrophils.push((xi, y as usize));
        }
        if neutrophils.is_empty() {
            return Err(Error::Config("could not place any neutrophil inside the band".into()));
        }
    }

    let noise = Normal::new(0.0, config.noise.max(1e-12)).expect("finite sigma");
    let mut image = RgbImage::new(w as u32, h as u32);
    for (px, c) in image.pixels_mut().zip(&buf) {
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let v = c[ch] + if config.noise > 0.0 { noise.sample(&mut r) } else { 0.0 };
            out[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(out);
    }
    Ok(SynthRecord {
        index,
        image,
        sc_mask: mask,
        neutrophils,
        positive,
    })
}

/// Number of positives for `n` images at `positive_fraction`.
pub fn positive_count(n: usize, positive_fraction: f64) -> Result<usize> {
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "positive fraction {positive_fraction} must lie strictly between 0 and 1"
        )));
    }
    let pos = (n as f64 * positive_fraction).round() as usize;
    if pos == 0 || pos == n {
        return Err(Error::Parameter(format!(
            "{n} images at fraction {positive_fraction} cannot contain both classes"
        )));
    }
    Ok(pos)
}

/// Shuffled labels with exactly `round(n * positive_fraction)` positives.
pub fn dataset_labels(seed: u64, n: usize, positive_fraction: f64) -> Result<Vec<bool>> {
    let pos = positive_count(n, positive_fraction)?;
    let mut labels: Vec<bool> = (0..n).map(|i| i < pos).collect();
    labels.shuffle(&mut rng::seeded(rng::mix(seed, u64::MAX)));
    Ok(labels)
}

pub fn generate_dataset(config: &SynthConfig, n: usize, positive_fraction: f64) -> Result<Vec<SynthRecord>> {
    dataset_labels(config.seed, n, positive_fraction)?
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_wsi(config, i, label))
        .collect()
}

/// A patch is positive iff at least one neutrophil centre lies inside its window
/// (bounds inclusive).
pub fn derive_patch_labels(neutrophils: &[(usize, usize)], patches: &[PatchSpec]) -> Vec<bool> {
    patches
        .iter()
        .map(|p| neutrophils.iter().any(|&(x, y)| p.window.contains(x as f64, y as f64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{connected_components, Connectivity};
    use crate::patches::Window;

    fn small() -> SynthConfig {
        SynthConfig {
            width: 200,
            height: 160,
            neutrophil_radius: (3, 4),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn records_are_deterministic_and_consistent() {
        let cfg = small();
        let a = generate_wsi(&cfg, 3, true).unwrap();
        assert_eq!(a, generate_wsi(&cfg, 3, true).unwrap());
        assert!(!a.neutrophils.is_empty());
        assert!(a.neutrophils.iter().all(|&(x, y)| a.sc_mask.get(x, y)));
        assert_eq!(connected_components(&a.sc_mask, Connectivity::Eight).count, 1);
        let n = generate_wsi(&cfg, 4, false).unwrap();
        assert!(n.neutrophils.is_empty());
        assert_ne!(a.image, generate_wsi(&cfg, 5, true).unwrap().image);
    }

    #[test]
    fn class_counts() {
        let labels = dataset_labels(1, 10, 0.3).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l).count(), 3);
        assert!(dataset_labels(1, 2, 0.1).is_err());
        assert!(dataset_labels(1, 10, 1.0).is_err());
    }

    #[test]
    fn thick_band_rejected() {
        let cfg = SynthConfig {
            band_thickness: (0.2, 0.6),
            ..SynthConfig::default()
        };
        assert!(matches!(generate_wsi(&cfg, 0, false), Err(Error::Config(_))));
    }

    #[test]
    fn inclusive_patch_labels() {
        let spec = |left, top| PatchSpec {
            center: (0, 0),
            window: Window {
                left,
                top,
                width: 10,
                height: 10,
            },
            superpixel: 0,
        };
        let pts = [(9, 9)];
        assert_eq!(
            derive_patch_labels(&pts, &[spec(0, 0), spec(9, 9), spec(10, 0)]),
            vec![true, true, false]
        );
        assert_eq!(derive_patch_labels(&[], &[spec(0, 0)]), vec![false]);
    }
}
