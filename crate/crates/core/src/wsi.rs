//! Whole-slide decisions: patch extraction from a segmented image, positive-patch
//! counting, the two threshold strategies for `T`, and stratified fold assignment.

use image::RgbImage;
use rand::seq::SliceRandom;

use crate::capsnet::CapsModel;
use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::metrics::Confusion;
use crate::morphology;
use crate::patches::{crop, select_patches, PatchSpec};
use crate::rng;
use crate::slic::{slic, SlicParams, SuperpixelLabeling};
use crate::unet::SegModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Smallest `T` with the best training accuracy.
    MaxAccuracy,
    /// Smallest `T` with the best training TNR among those that still flag a positive.
    MaxTnr,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::MaxAccuracy => "I",
            Strategy::MaxTnr => "II",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" | "accuracy" => Ok(Strategy::MaxAccuracy),
            "II" | "2" | "tnr" => Ok(Strategy::MaxTnr),
            _ => Err(Error::Parameter(format!("unknown strategy {s:?} (use I or II)"))),
        }
    }
}

/// A slide is positive when it has more than `t` positive patches.
pub fn decide(count: usize, t: usize) -> bool {
    count > t
}

fn confusion_at(counts: &[usize], labels: &[bool], t: usize) -> Confusion {
    let pred: Vec<bool> = counts.iter().map(|&c| decide(c, t)).collect();
    Confusion::from_labels(&pred, labels).expect("non-empty, equal lengths")
}

/// Picks `T` from training-slide counts by scanning `0..=max(counts)`.
///
/// Strategy II falls back to the plain TNR maximiser when no `T` yields a true
/// positive (or there are no negatives to measure TNR on).
pub fn select_threshold(counts: &[usize], labels: &[bool], strategy: Strategy) -> Result<usize> {
    if counts.is_empty() || counts.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} counts for {} slide labels",
            counts.len(),
            labels.len()
        )));
    }
    let max = *counts.iter().max().expect("non-empty");
    let stats: Vec<Confusion> = (0..=max).map(|t| confusion_at(counts, labels, t)).collect();
    let argmax_first = |score: &dyn Fn(&Confusion) -> Option<f64>| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (t, c) in stats.iter().enumerate() {
            if let Some(s) = score(c) {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((t, s));
                }
            }
        }
        best.map(|(t, _)| t)
    };
    let t = match strategy {
        Strategy::MaxAccuracy => argmax_first(&|c| Some(c.metrics().accuracy)),
        Strategy::MaxTnr => argmax_first(&|c| if c.tp > 0 { c.tnr().ok() } else { None })
            .or_else(|| argmax_first(&|c| c.tnr().ok()))
            .or(Some(0)),
    };
    Ok(t.expect("scan over a non-empty range"))
}

/// Assigns each item to one of `folds` folds, stratified by label. Each class is
/// shuffled with the seed and dealt round-robin, the negatives continuing where the
/// positives stopped so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Parameter(format!("need at least 2 folds, got {folds}")));
    }
    let mut out = vec![usize::MAX; labels.len()];
    let mut next = 0;
    for (k, class) in [true, false].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(Error::Data(format!(
                "{} {} items cannot be stratified into {folds} folds",
                idx.len(),
                if class { "positive" } else { "negative" }
            )));
        }
        idx.shuffle(&mut rng::derived(seed, 0xF01D + k as u64));
        for i in idx {
            out[i] = next % folds;
            next += 1;
        }
    }
    Ok(out)
}

/// Patch candidates of one slide.
pub struct SlidePatches {
    pub mask: SegMask,
    pub superpixels: SuperpixelLabeling,
    pub patches: Vec<PatchSpec>,
}

pub fn slide_patches(
    image: &RgbImage,
    mask: SegMask,
    slic_params: SlicParams,
    patch_size: usize,
) -> Result<SlidePatches> {
    let superpixels = slic(image, slic_params)?;
    let patches = select_patches(&superpixels, &mask, patch_size)?;
    Ok(SlidePatches {
        mask,
        superpixels,
        patches,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WsiDiagnosis {
    pub id: String,
    pub positive_patch_count: usize,
    pub threshold: usize,
    pub positive: bool,
    pub patches: Vec<PatchSpec>,
    pub patch_probabilities: Vec<f64>,
    /// Segmentation produced no stratum corneum, so no patches were examined.
    pub empty_sc: bool,
}

impl WsiDiagnosis {
    /// `id=<id> count=<n> decision=<positive|negative> patches=<n> T=<t>` plus
    /// ` flag=empty_sc` when the mask was empty.
    pub fn summary_line(&self) -> String {
        let mut s = format!(
            "id={} count={} decision={} patches={} T={}",
            self.id,
            self.positive_patch_count,
            if self.positive { "positive" } else { "negative" },
            self.patches.len(),
            self.threshold
        );
        if self.empty_sc {
            s.push_str(" flag=empty_sc");
        }
        s
    }
}

/// Settings for turning a slide into a decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnoseParams {
    pub slic: SlicParams,
    pub min_area_fraction: f64,
    pub cutoff: f64,
    pub threshold: usize,
}

/// Classifies the given patches and applies the count rule.
pub fn diagnose_with_mask(
    id: &str,
    image: &RgbImage,
    mask: SegMask,
    caps: &CapsModel,
    params: &DiagnoseParams,
) -> Result<WsiDiagnosis> {
    let empty_sc = mask.is_empty();
    let (patches, probs) = if empty_sc {
        (Vec::new(), Vec::new())
    } else {
        let sp = slide_patches(image, mask, params.slic, caps.config.patch_size)?;
        let crops = sp
            .patches
            .iter()
            .map(|p| crop(image, &p.window))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&RgbImage> = crops.iter().collect();
        let probs = caps.predict(&refs)?;
        (sp.patches, probs)
    };
    let count = probs.iter().filter(|&&p| p >= params.cutoff).count();
    Ok(WsiDiagnosis {
        id: id.to_string(),
        positive_patch_count: count,
        threshold: params.threshold,
        positive: decide(count, params.threshold),
        patches,
        patch_probabilities: probs,
        empty_sc,
    })
}

/// Segment, post-process, extract superpixel patches, classify and count.
pub fn diagnose_wsi(
    id: &str,
    image: &RgbImage,
    seg: &SegModel,
    caps: &CapsModel,
    params: &DiagnoseParams,
) -> Result<WsiDiagnosis> {
    let mask = morphology::postprocess_with(&seg.segment(image)?, params.min_area_fraction)?;
    diagnose_with_mask(id, image, mask, caps, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_counts() {
        let counts = [0, 1, 2, 2, 5, 6, 9];
        let labels = [false, false, false, false, true, true, true];
        assert_eq!(select_threshold(&counts, &labels, Strategy::MaxAccuracy).unwrap(), 2);
        assert_eq!(select_threshold(&counts, &labels, Strategy::MaxTnr).unwrap(), 2);
    }

    #[test]
    fn tnr_guard_keeps_a_positive() {
        // Without the guard T = 7 would give TNR 1 with no positives at all.
        let counts = [3, 7, 0, 5];
        let labels = [false, true, false, false];
        let t = select_threshold(&counts, &labels, Strategy::MaxTnr).unwrap();
        assert_eq!(t, 5);
        assert!(decide(7, t));
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let f = stratified_folds(&labels, 3, 9).unwrap();
        for k in 0..3 {
            let members: Vec<usize> = (0..30).filter(|&i| f[i] == k).collect();
            assert_eq!(members.len(), 10);
            assert_eq!(
                members.iter().filter(|&&i| labels[i]).count(),
                10 / 3 + (k == 0) as usize
            );
        }
        assert!(stratified_folds(&[true, false, false], 3, 0).is_err());
    }

    #[test]
    fn summary_line_grammar() {
        let d = WsiDiagnosis {
            id: "0007".into(),
            positive_patch_count: 3,
            threshold: 2,
            positive: true,
            patches: vec![],
            patch_probabilities: vec![],
            empty_sc: true,
        };
        assert_eq!(
            d.summary_line(),
            "id=0007 count=3 decision=positive patches=0 T=2 flag=empty_sc"
        );
    }
}
