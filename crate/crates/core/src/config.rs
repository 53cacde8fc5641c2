//! Run configuration: one flat table of documented keys, read from TOML (or JSON when
//! the file name ends in `.json`). Unknown keys are rejected; missing keys keep their
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsnet::{CapsConfig, CapsTrainConfig, StemLayer};
use crate::error::{Error, Result};
use crate::slic::{SlicParams, SUPERPIXEL_PRESETS};
use crate::synth::SynthConfig;
use crate::unet::{SegTrainConfig, UNetConfig};
use crate::wsi::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub unet_depth: usize,
    pub unet_base_filters: usize,
    pub unet_kernel_size: usize,
    pub unet_train_height: usize,
    pub unet_train_width: usize,
    pub seg_epochs: usize,
    pub seg_batch_size: usize,
    pub seg_learning_rate: f64,
    pub seg_hflip: bool,
    /// Fraction of training slides held out to pick the best segmentation epoch.
    pub seg_val_fraction: f64,
    pub min_area_fraction: f64,

    /// `[filters, kernel, stride]` per stem layer.
    pub caps_stem: Vec<[usize; 3]>,
    pub caps_types: usize,
    pub caps_dim: usize,
    pub caps_kernel: usize,
    pub caps_stride: usize,
    pub caps_secondary_dim: usize,
    pub caps_routing_iterations: usize,
    pub caps_k: usize,
    pub patch_size: usize,
    pub caps_epochs: usize,
    pub caps_batch_size: usize,
    pub caps_learning_rate: f64,
    pub caps_hflip: bool,
    /// Fraction of training patches held out for model selection and the cutoff.
    pub caps_val_fraction: f64,

    pub slic_compactness: f64,
    pub slic_iterations: usize,
    /// Superpixel count used to cut training patches.
    pub train_superpixels: usize,
    /// Superpixel counts evaluated at slide level.
    pub superpixel_sweep: Vec<usize>,
    /// Pool sizes compared on the validation patches.
    pub k_sweep: Vec<usize>,
    /// Use the best-AUC pool size from `k_sweep` instead of `caps_k`.
    pub select_k: bool,
    /// Strategy reported by `diagnose` when choosing among thresholds.
    pub strategy: String,

    pub synth_width: usize,
    pub synth_height: usize,
    pub synth_band_min: f64,
    pub synth_band_max: f64,
    pub synth_neutrophils_min: usize,
    pub synth_neutrophils_max: usize,
    pub synth_nuclei_min: usize,
    pub synth_nuclei_max: usize,
    pub synth_radius_min: usize,
    pub synth_radius_max: usize,
    pub synth_noise: f64,
    pub synth_color_jitter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        let st = SegTrainConfig::default();
        let c = CapsConfig::default();
        let ct = CapsTrainConfig::default();
        let s = SynthConfig::default();
        let sp = SlicParams::new(SUPERPIXEL_PRESETS[0]);
        RunConfig {
            seed: 7,
            unet_depth: u.depth,
            unet_base_filters: u.base_filters,
            unet_kernel_size: u.kernel_size,
            unet_train_height: u.train_height,
            unet_train_width: u.train_width,
            seg_epochs: st.epochs,
            seg_batch_size: st.batch_size,
            seg_learning_rate: st.learning_rate,
            seg_hflip: st.hflip,
            seg_val_fraction: 0.1,
            min_area_fraction: crate::morphology::DEFAULT_MIN_AREA_FRACTION,
            caps_stem: c.stem.iter().map(|l| [l.filters, l.kernel, l.stride]).collect(),
            caps_types: c.capsule_types,
            caps_dim: c.capsule_dim,
            caps_kernel: c.caps_kernel,
            caps_stride: c.caps_stride,
            caps_secondary_dim: c.secondary_dim,
            caps_routing_iterations: c.routing_iterations,
            caps_k: c.k,
            patch_size: c.patch_size,
            caps_epochs: ct.epochs,
            caps_batch_size: ct.batch_size,
            caps_learning_rate: ct.learning_rate,
            caps_hflip: ct.hflip,
            caps_val_fraction: 0.2,
            slic_compactness: sp.compactness,
            slic_iterations: sp.iterations,
            train_superpixels: SUPERPIXEL_PRESETS[0],
            superpixel_sweep: SUPERPIXEL_PRESETS.to_vec(),
            k_sweep: vec![1, 3, 5, 7, 9],
            select_k: true,
            strategy: "I".into(),
            synth_width: s.width,
            synth_height: s.height,
            synth_band_min: s.band_thickness.0,
            synth_band_max: s.band_thickness.1,
            synth_neutrophils_min: s.neutrophils.0,
            synth_neutrophils_max: s.neutrophils.1,
            synth_nuclei_min: s.sc_nuclei.0,
            synth_nuclei_max: s.sc_nuclei.1,
            synth_radius_min: s.neutrophil_radius.0,
            synth_radius_max: s.neutrophil_radius.1,
            synth_noise: s.noise,
            synth_color_jitter: s.color_jitter,
        }
    }
}

impl RunConfig {
    pub fn from_str_as(text: &str, json: bool) -> Result<Self> {
        let cfg: RunConfig = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_str_as(&text, json).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.unet_config().validate()?;
        self.caps_config().validate()?;
        self.synth_config().validate()?;
        self.strategy()?;
        let frac_ok = |f: f64| (0.0..1.0).contains(&f);
        if !frac_ok(self.seg_val_fraction) || !frac_ok(self.caps_val_fraction) {
            return Err(Error::Config("validation fractions must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.min_area_fraction) {
            return Err(Error::Config("min_area_fraction must lie in [0, 1]".into()));
        }
        if self.superpixel_sweep.is_empty() || self.superpixel_sweep.contains(&0) || self.train_superpixels == 0 {
            return Err(Error::Config("superpixel counts must be positive".into()));
        }
        if self.slic_iterations == 0 || !(self.slic_compactness > 0.0) {
            return Err(Error::Config("slic needs iterations >= 1 and compactness > 0".into()));
        }
        let (mh, mw) = self.caps_config().map_size(self.patch_size)?;
        if self.k_sweep.iter().any(|&k| k == 0 || k > mh * mw) {
            return Err(Error::Config(format!("k_sweep values must lie in 1..={}", mh * mw)));
        }
        for (name, v) in [
            ("seg_epochs", self.seg_epochs),
            ("seg_batch_size", self.seg_batch_size),
            ("caps_epochs", self.caps_epochs),
            ("caps_batch_size", self.caps_batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            depth: self.unet_depth,
            base_filters: self.unet_base_filters,
            kernel_size: self.unet_kernel_size,
            input_channels: 3,
            train_height: self.unet_train_height,
            train_width: self.unet_train_width,
        }
    }

    pub fn seg_train_config(&self) -> SegTrainConfig {
        SegTrainConfig {
            epochs: self.seg_epochs,
            batch_size: self.seg_batch_size,
            learning_rate: self.seg_learning_rate,
            hflip: self.seg_hflip,
            seed: self.seed,
        }
    }

    pub fn caps_config(&self) -> CapsConfig {
        CapsConfig {
            stem: self
                .caps_stem
                .iter()
                .map(|&[filters, kernel, stride]| StemLayer {
                    filters,
                    kernel,
                    stride,
                })
                .collect(),
            capsule_types: self.caps_types,
            capsule_dim: self.caps_dim,
            caps_kernel: self.caps_kernel,
            caps_stride: self.caps_stride,
            secondary_dim: self.caps_secondary_dim,
            routing_iterations: self.caps_routing_iterations,
            k: self.caps_k,
            patch_size: self.patch_size,
        }
    }

    pub fn caps_train_config(&self) -> CapsTrainConfig {
        CapsTrainConfig {
            epochs: self.caps_epochs,
            batch_size: self.caps_batch_size,
            learning_rate: self.caps_learning_rate,
            hflip: self.caps_hflip,
            seed: self.seed,
        }
    }

    pub fn slic_params(&self, n_superpixels: usize) -> SlicParams {
        SlicParams {
            n_superpixels,
            compactness: self.slic_compactness,
            iterations: self.slic_iterations,
        }
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            width: self.synth_width,
            height: self.synth_height,
            band_thickness: (self.synth_band_min, self.synth_band_max),
            neutrophils: (self.synth_neutrophils_min, self.synth_neutrophils_max),
            sc_nuclei: (self.synth_nuclei_min, self.synth_nuclei_max),
            neutrophil_radius: (self.synth_radius_min, self.synth_radius_max),
            noise: self.synth_noise,
            color_jitter: self.synth_color_jitter,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_str_as(&cfg.to_toml(), false).unwrap(), cfg);
        assert_eq!(cfg.caps_config(), CapsConfig::default());
        assert_eq!(cfg.unet_config(), UNetConfig::default());
    }

    #[test]
    fn partial_and_json() {
        let cfg = RunConfig::from_str_as("seg_epochs = 3\ncaps_k = 7\n", false).unwrap();
        assert_eq!((cfg.seg_epochs, cfg.caps_k), (3, 7));
        let cfg = RunConfig::from_str_as(r#"{"unet_depth": 2, "superpixel_sweep": [300]}"#, true).unwrap();
        assert_eq!(cfg.unet_depth, 2);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::from_str_as("unet_dpeth = 3", false),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_str_as("unet_train_height = 100", false).is_err());
        assert!(RunConfig::from_str_as("strategy = \"III\"", false).is_err());
        assert!(RunConfig::from_str_as("caps_k = 0", false).is_err());
    }
}
