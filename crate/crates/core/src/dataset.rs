//! On-disk datasets: `images/NNNN.png`, `masks/NNNN.png` and `manifest.json`.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic_str;
use crate::mask::SegMask;
use crate::synth::{dataset_labels, generate_wsi, SynthConfig};
use crate::wsi::stratified_folds;

pub const MANIFEST: &str = "manifest.json";
pub const DEFAULT_FOLDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideLabel {
    Positive,
    Negative,
}

impl SlideLabel {
    pub fn is_positive(self) -> bool {
        self == SlideLabel::Positive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub label: SlideLabel,
    /// Neutrophil centres as `[x, y]` pixels.
    pub neutrophils: Vec<[usize; 2]>,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub folds: usize,
    pub images: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// One loaded slide.
#[derive(Clone, Debug)]
pub struct Slide {
    pub id: String,
    pub image: RgbImage,
    pub mask: SegMask,
    pub neutrophils: Vec<(usize, usize)>,
    pub positive: bool,
    pub fold: usize,
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Renders `n` synthetic slides into `dir` and writes the manifest last.
pub fn write_synthetic(
    dir: &Path,
    config: &SynthConfig,
    n: usize,
    positive_fraction: f64,
    force: bool,
) -> Result<Manifest> {
    config.validate()?;
    if !force && dir_is_nonempty(dir)? {
        return Err(Error::Usage(format!(
            "{} exists and is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    let labels = dataset_labels(config.seed, n, positive_fraction)?;
    let folds = stratified_folds(&labels, DEFAULT_FOLDS, config.seed)?;
    let mut images = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let rec = generate_wsi(config, i, label)?;
        let id = format!("{i:04}");
        let image = format!("images/{id}.png");
        let mask = format!("masks/{id}.png");
        crate::io::save_png(&dir.join(&image), &rec.image)?;
        rec.sc_mask.save_png(&dir.join(&mask))?;
        images.push(ManifestEntry {
            id,
            image,
            mask,
            label: if label {
                SlideLabel::Positive
            } else {
                SlideLabel::Negative
            },
            neutrophils: rec.neutrophils.iter().map(|&(x, y)| [x, y]).collect(),
            fold: folds[i],
        });
    }
    let manifest = Manifest {
        seed: config.seed,
        width: config.width,
        height: config.height,
        folds: DEFAULT_FOLDS,
        images,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_atomic_str(&dir.join(MANIFEST), &(text + "\n"))?;
    Ok(manifest)
}

impl Dataset {
    /// Reads the manifest and checks that every referenced file exists.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.images.is_empty() {
            return Err(Error::Data(format!("{} lists no images", path.display())));
        }
        for e in &manifest.images {
            if e.fold >= manifest.folds {
                return Err(Error::Data(format!(
                    "image {} has fold {} of {}",
                    e.id, e.fold, manifest.folds
                )));
            }
            for f in [&e.image, &e.mask] {
                if !root.join(f).is_file() {
                    return Err(Error::Data(format!("missing file {}", root.join(f).display())));
                }
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.manifest.images.iter().map(|e| e.label.is_positive()).collect()
    }

    pub fn load(&self, i: usize) -> Result<Slide> {
        let e = &self.manifest.images[i];
        let image = image::open(self.root.join(&e.image))?.to_rgb8();
        let mask = SegMask::load_png(&self.root.join(&e.mask))?;
        if mask.width() != image.width() as usize || mask.height() != image.height() as usize {
            return Err(Error::Data(format!("mask and image sizes differ for {}", e.id)));
        }
        Ok(Slide {
            id: e.id.clone(),
            image,
            mask,
            neutrophils: e.neutrophils.iter().map(|p| (p[0], p[1])).collect(),
            positive: e.label.is_positive(),
            fold: e.fold,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Slide>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
