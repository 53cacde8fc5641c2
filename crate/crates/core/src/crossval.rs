//! Three-fold cross-validation of the full pipeline: per fold, train the segmenter
//! and the patch classifier on the other folds, compare pool sizes on validation
//! patches, score held-out patches, then pick slide thresholds on the training slides
//! and score the held-out slides for every superpixel count.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;

use crate::capsnet::{topk_average, train_patch_classifier, CapsEpoch, CapsModel, LabeledPatch};
use crate::config::RunConfig;
use crate::dataset::Slide;
use crate::error::{Error, Result};
use crate::io::{save_png, write_atomic_str};
use crate::mask::SegMask;
use crate::metrics::{choose_cutoff, roc_and_auc, ClassMetrics, Confusion, RocCurve};
use crate::morphology::postprocess_with;
use crate::patches::crop;
use crate::plot::roc_plot;
use crate::rng;
use crate::synth::derive_patch_labels;
use crate::unet::{train_segmenter, SegEpoch, SegModel};
use crate::wsi::{decide, diagnose_with_mask, select_threshold, slide_patches, DiagnoseParams, Strategy};

/// Ground-truth-mask patches of one slide with geometric labels.
pub fn labeled_patches(slide: &Slide, cfg: &RunConfig, n_superpixels: usize) -> Result<Vec<LabeledPatch>> {
    let sp = slide_patches(
        &slide.image,
        slide.mask.clone(),
        cfg.slic_params(n_superpixels),
        cfg.patch_size,
    )?;
    let labels = derive_patch_labels(&slide.neutrophils, &sp.patches);
    sp.patches
        .iter()
        .zip(labels)
        .map(|(p, l)| Ok((crop(&slide.image, &p.window)?, l)))
        .collect()
}

/// Splits indices into (train, held-out) with `fraction` of each label held out
/// (at least one per label when that label has two or more members).
pub fn stratified_holdout(labels: &[bool], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (k, class) in [true, false].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng::derived(seed, 0x5EED + k as u64));
        let mut n = (idx.len() as f64 * fraction).round() as usize;
        if fraction > 0.0 && n == 0 && idx.len() >= 2 {
            n = 1;
        }
        held.extend_from_slice(&idx[..n]);
        train.extend_from_slice(&idx[n..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSweepEntry {
    pub k: usize,
    pub roc: RocCurve,
}

/// ROC of the same probability maps pooled at each `k`; returns the entries and the
/// best-AUC `k` (smaller `k` on ties).
pub fn k_sweep(maps: &[Vec<f64>], labels: &[bool], ks: &[usize]) -> Result<(Vec<KSweepEntry>, usize)> {
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let scores = maps.iter().map(|m| topk_average(m, k)).collect::<Result<Vec<_>>>()?;
        out.push(KSweepEntry {
            k,
            roc: roc_and_auc(&scores, labels)?,
        });
    }
    let best = out
        .iter()
        .fold(None::<&KSweepEntry>, |b, e| match b {
            Some(b) if b.roc.auc > e.roc.auc || (b.roc.auc == e.roc.auc && b.k <= e.k) => Some(b),
            _ => Some(e),
        })
        .ok_or_else(|| Error::Config("k_sweep is empty".into()))?
        .k;
    Ok((out, best))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchScores {
    pub metrics: ClassMetrics,
    pub auc: f64,
    pub cutoff: f64,
    pub k: usize,
    pub patches: usize,
    pub positives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WsiRow {
    pub superpixels: usize,
    pub t_i: usize,
    pub strategy_i: ClassMetrics,
    pub t_ii: usize,
    pub strategy_ii: ClassMetrics,
    pub tnr_ii: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideCount {
    pub superpixels: usize,
    pub id: String,
    pub positive: bool,
    pub held_out: bool,
    pub patches: usize,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub seg: SegModel,
    pub seg_history: Vec<SegEpoch>,
    /// Mean post-processed dice on the held-out slides.
    pub seg_dice: f64,
    pub caps: CapsModel,
    pub caps_history: Vec<CapsEpoch>,
    pub k_sweep: Vec<KSweepEntry>,
    pub selected_k: usize,
    pub patch_scores: PatchScores,
    pub wsi: Vec<WsiRow>,
    pub counts: Vec<SlideCount>,
}

fn collect_patches(slides: &[&Slide], cfg: &RunConfig) -> Result<Vec<LabeledPatch>> {
    let mut out = Vec::new();
    for s in slides {
        out.extend(labeled_patches(s, cfg, cfg.train_superpixels)?);
    }
    Ok(out)
}

fn maps_of(caps: &CapsModel, patches: &[LabeledPatch]) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&RgbImage> = patches.iter().map(|(p, _)| p).collect();
    caps.probability_maps(&refs)
}

/// Trains the segmenter on `slides`, holding out `seg_val_fraction` of them
/// (stratified by slide label) to pick the best epoch.
pub fn fit_segmenter(slides: &[&Slide], cfg: &RunConfig, seed: u64) -> Result<(SegModel, Vec<SegEpoch>)> {
    let labels: Vec<bool> = slides.iter().map(|s| s.positive).collect();
    let (tr, val) = stratified_holdout(&labels, cfg.seg_val_fraction, seed);
    let pairs = |idx: &[usize]| -> Vec<(RgbImage, SegMask)> {
        idx.iter()
            .map(|&i| (slides[i].image.clone(), slides[i].mask.clone()))
            .collect()
    };
    let mut tc = cfg.seg_train_config();
    tc.seed = seed;
    train_segmenter(&pairs(&tr), &pairs(&val), &cfg.unet_config(), &tc)
}

pub struct PatchFit {
    pub model: CapsModel,
    pub history: Vec<CapsEpoch>,
    /// Empty when the validation patches hold a single class.
    pub k_sweep: Vec<KSweepEntry>,
    /// Best-AUC pool size of the sweep, whether or not it was adopted.
    pub best_k: Option<usize>,
    pub train_patches: usize,
    pub val_patches: usize,
}

/// Trains the patch classifier on ground-truth-mask patches of `slides`. Validation
/// patches come from `caps_val_fraction` of the slides; they choose the epoch, the
/// pool size (when `select_k` is set) and the probability cutoff.
pub fn fit_patch_classifier(slides: &[&Slide], cfg: &RunConfig, seed: u64) -> Result<PatchFit> {
    let labels: Vec<bool> = slides.iter().map(|s| s.positive).collect();
    let (tr, val) = stratified_holdout(&labels, cfg.caps_val_fraction, seed ^ 0xCA75);
    let pick = |idx: &[usize]| idx.iter().map(|&i| slides[i]).collect::<Vec<_>>();
    let tr_patches = collect_patches(&pick(&tr), cfg)?;
    let val_patches = collect_patches(&pick(&val), cfg)?;
    let mut tc = cfg.caps_train_config();
    tc.seed = seed;
    let (mut model, history) = train_patch_classifier(&tr_patches, &val_patches, &cfg.caps_config(), &tc)?;

    let val_labels: Vec<bool> = val_patches.iter().map(|(_, l)| *l).collect();
    if !(val_labels.iter().any(|&l| l) && val_labels.iter().any(|&l| !l)) {
        return Ok(PatchFit {
            model,
            history,
            k_sweep: Vec::new(),
            best_k: None,
            train_patches: tr_patches.len(),
            val_patches: val_patches.len(),
        });
    }
    let val_maps = maps_of(&model, &val_patches)?;
    let (sweep, best_k) = k_sweep(&val_maps, &val_labels, &cfg.k_sweep)?;
    if cfg.select_k && best_k != model.config.k {
        model.config.k = best_k;
        let scores = val_maps
            .iter()
            .map(|m| topk_average(m, best_k))
            .collect::<Result<Vec<_>>>()?;
        model.cutoff = choose_cutoff(&roc_and_auc(&scores, &val_labels)?);
    }
    Ok(PatchFit {
        model,
        history,
        k_sweep: sweep,
        best_k: Some(best_k),
        train_patches: tr_patches.len(),
        val_patches: val_patches.len(),
    })
}

pub fn run_fold(slides: &[Slide], fold: usize, cfg: &RunConfig) -> Result<FoldResult> {
    let train: Vec<&Slide> = slides.iter().filter(|s| s.fold != fold).collect();
    let test: Vec<&Slide> = slides.iter().filter(|s| s.fold == fold).collect();
    if train.len() < 2 || test.is_empty() {
        return Err(Error::Data(format!(
            "fold {fold} has {} training and {} held-out slides",
            train.len(),
            test.len()
        )));
    }
    let fold_seed = rng::mix(cfg.seed, fold as u64);
    let (seg, seg_history) = fit_segmenter(&train, cfg, fold_seed)?;
    let fit = fit_patch_classifier(&train, cfg, fold_seed)?;
    let (caps, caps_history, sweep) = (fit.model, fit.history, fit.k_sweep);
    let selected_k = caps.config.k;

    // Held-out patch metrics.
    let test_patches = collect_patches(&test, cfg)?;
    let test_labels: Vec<bool> = test_patches.iter().map(|(_, l)| *l).collect();
    let test_scores = {
        let refs: Vec<&RgbImage> = test_patches.iter().map(|(p, _)| p).collect();
        caps.predict(&refs)?
    };
    let pred: Vec<bool> = test_scores.iter().map(|&p| p >= caps.cutoff).collect();
    let auc = roc_and_auc(&test_scores, &test_labels).map_or(f64::NAN, |r| r.auc);
    let patch_scores = PatchScores {
        metrics: Confusion::from_labels(&pred, &test_labels)?.metrics(),
        auc,
        cutoff: caps.cutoff,
        k: selected_k,
        patches: test_patches.len(),
        positives: test_labels.iter().filter(|&&l| l).count(),
    };

    // Predicted masks for every slide of the fold's universe.
    let mut masks = Vec::with_capacity(slides.len());
    let mut dice_sum = 0.0;
    for s in slides {
        let m = postprocess_with(&seg.segment(&s.image)?, cfg.min_area_fraction)?;
        if s.fold == fold {
            dice_sum += m.dice(&s.mask)?;
        }
        masks.push(m);
    }
    let seg_dice = dice_sum / test.len() as f64;

    let mut wsi = Vec::new();
    let mut counts = Vec::new();
    for &n_sp in &cfg.superpixel_sweep {
        let (mut tr_counts, mut tr_labels, mut te_counts, mut te_labels) = (vec![], vec![], vec![], vec![]);
        for (s, m) in slides.iter().zip(&masks) {
            let params = DiagnoseParams {
                slic: cfg.slic_params(n_sp),
                min_area_fraction: cfg.min_area_fraction,
                cutoff: caps.cutoff,
                threshold: 0,
            };
            let d = diagnose_with_mask(&s.id, &s.image, m.clone(), &caps, &params)?;
            let (patches, count) = (d.patches.len(), d.positive_patch_count);
            let held_out = s.fold == fold;
            if held_out {
                te_counts.push(count);
                te_labels.push(s.positive);
            } else {
                tr_counts.push(count);
                tr_labels.push(s.positive);
            }
            counts.push(SlideCount {
                superpixels: n_sp,
                id: s.id.clone(),
                positive: s.positive,
                held_out,
                patches,
                count,
            });
        }
        let t_i = select_threshold(&tr_counts, &tr_labels, Strategy::MaxAccuracy)?;
        let t_ii = select_threshold(&tr_counts, &tr_labels, Strategy::MaxTnr)?;
        let at = |t: usize| -> Result<Confusion> {
            let pred: Vec<bool> = te_counts.iter().map(|&c| decide(c, t)).collect();
            Confusion::from_labels(&pred, &te_labels)
        };
        let c_ii = at(t_ii)?;
        wsi.push(WsiRow {
            superpixels: n_sp,
            t_i,
            strategy_i: at(t_i)?.metrics(),
            t_ii,
            strategy_ii: c_ii.metrics(),
            tnr_ii: c_ii.tnr().unwrap_or(f64::NAN),
        });
    }

    Ok(FoldResult {
        fold,
        seg,
        seg_history,
        seg_dice,
        caps,
        caps_history,
        k_sweep: sweep,
        selected_k,
        patch_scores,
        wsi,
        counts,
    })
}

/// Runs every fold, `jobs` at a time on scoped threads. Results are in fold order and
/// do not depend on `jobs`.
pub fn crossval(slides: &[Slide], cfg: &RunConfig, folds: usize, jobs: usize) -> Result<Vec<FoldResult>> {
    if folds < 2 {
        return Err(Error::Data("cross-validation needs at least two folds".into()));
    }
    let jobs = jobs.max(1);
    let mut results = Vec::with_capacity(folds);
    let order: Vec<usize> = (0..folds).collect();
    for batch in order.chunks(jobs) {
        let out: Vec<Result<FoldResult>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&f| scope.spawn(move || run_fold(slides, f, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect()
        });
        for r in out {
            results.push(r?);
        }
    }
    Ok(results)
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn mean(vals: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = vals.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn seg_history_csv(history: &[SegEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,val_dice\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{}",
            h.epoch,
            f6(h.train_loss),
            h.val_dice.map(f6).unwrap_or_default()
        );
    }
    s
}

pub fn caps_history_csv(history: &[CapsEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_auc\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            h.epoch,
            f6(h.train_loss),
            f6(h.train_acc),
            h.val_loss.map(f6).unwrap_or_default(),
            h.val_auc.map(f6).unwrap_or_default()
        );
    }
    s
}

/// Patch-level table: one row per fold plus the mean.
pub fn table1_csv(results: &[FoldResult]) -> String {
    let mut s = String::from("fold,seg_dice,precision,recall,f1,accuracy,auc,cutoff,k,patches,positives\n");
    for r in results {
        let p = &r.patch_scores;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.fold + 1,
            f6(r.seg_dice),
            f6(p.metrics.precision),
            f6(p.metrics.recall),
            f6(p.metrics.f1),
            f6(p.metrics.accuracy),
            f6(p.auc),
            f6(p.cutoff),
            p.k,
            p.patches,
            p.positives
        );
    }
    let m = |f: &dyn Fn(&FoldResult) -> f64| f6(mean(results.iter().map(f)));
    let _ = writeln!(
        s,
        "mean,{},{},{},{},{},{},{},{},{},{}",
        m(&|r| r.seg_dice),
        m(&|r| r.patch_scores.metrics.precision),
        m(&|r| r.patch_scores.metrics.recall),
        m(&|r| r.patch_scores.metrics.f1),
        m(&|r| r.patch_scores.metrics.accuracy),
        m(&|r| r.patch_scores.auc),
        m(&|r| r.patch_scores.cutoff),
        m(&|r| r.patch_scores.k as f64),
        m(&|r| r.patch_scores.patches as f64),
        m(&|r| r.patch_scores.positives as f64)
    );
    s
}

/// Slide-level table: per superpixel count, one row per fold plus the mean.
pub fn table2_csv(results: &[FoldResult]) -> String {
    let mut s = String::from(
        "superpixels,fold,T_I,accuracy_I,precision_I,recall_I,f1_I,T_II,tnr_II,precision_II,recall_II,accuracy_II\n",
    );
    let sweep: Vec<usize> = results
        .first()
        .map_or(vec![], |r| r.wsi.iter().map(|w| w.superpixels).collect());
    for (i, &n_sp) in sweep.iter().enumerate() {
        let row = |w: &WsiRow| {
            [
                w.t_i as f64,
                w.strategy_i.accuracy,
                w.strategy_i.precision,
                w.strategy_i.recall,
                w.strategy_i.f1,
                w.t_ii as f64,
                w.tnr_ii,
                w.strategy_ii.precision,
                w.strategy_ii.recall,
                w.strategy_ii.accuracy,
            ]
        };
        for r in results {
            let w = &r.wsi[i];
            let v = row(w);
            let _ = writeln!(
                s,
                "{n_sp},{},{},{},{},{},{},{},{},{},{},{}",
                r.fold + 1,
                w.t_i,
                f6(v[1]),
                f6(v[2]),
                f6(v[3]),
                f6(v[4]),
                w.t_ii,
                f6(v[6]),
                f6(v[7]),
                f6(v[8]),
                f6(v[9])
            );
        }
        let cols: Vec<String> = (0..10)
            .map(|c| f6(mean(results.iter().map(|r| row(&r.wsi[i])[c]))))
            .collect();
        let _ = writeln!(s, "{n_sp},mean,{}", cols.join(","));
    }
    s
}

pub fn ksweep_csv(results: &[FoldResult]) -> String {
    let mut s = String::from("fold,k,auc,selected\n");
    for r in results {
        for e in &r.k_sweep {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.fold + 1,
                e.k,
                f6(e.roc.auc),
                (e.k == r.selected_k) as u8
            );
        }
    }
    s
}

pub fn roc_csv(roc: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &roc.points {
        let t = if p.threshold.is_finite() {
            format!("{:.9}", p.threshold)
        } else {
            "inf".into()
        };
        let _ = writeln!(s, "{t},{},{}", f6(p.fpr), f6(p.tpr));
    }
    s
}

pub fn counts_csv(results: &[FoldResult]) -> String {
    let mut s = String::from("fold,superpixels,id,label,split,patches,count\n");
    for r in results {
        for c in &r.counts {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.fold + 1,
                c.superpixels,
                c.id,
                if c.positive { "positive" } else { "negative" },
                if c.held_out { "test" } else { "train" },
                c.patches,
                c.count
            );
        }
    }
    s
}

/// Writes tables, ROC curves and plots, models and training histories under `out`.
pub fn write_reports(results: &[FoldResult], out: &Path) -> Result<()> {
    write_atomic_str(&out.join("table1.csv"), &table1_csv(results))?;
    write_atomic_str(&out.join("table2.csv"), &table2_csv(results))?;
    write_atomic_str(&out.join("ksweep.csv"), &ksweep_csv(results))?;
    write_atomic_str(&out.join("wsi_counts.csv"), &counts_csv(results))?;
    for r in results {
        let f = r.fold + 1;
        for e in &r.k_sweep {
            write_atomic_str(&out.join(format!("roc/fold{f}_k{}.csv", e.k)), &roc_csv(&e.roc))?;
        }
        if !r.k_sweep.is_empty() {
            let curves: Vec<&RocCurve> = r.k_sweep.iter().map(|e| &e.roc).collect();
            save_png(&out.join(format!("roc/fold{f}.png")), &roc_plot(&curves, 480))?;
        }
        r.seg.save(&out.join(format!("models/seg_fold{f}.cdmm")))?;
        r.caps.save(&out.join(format!("models/caps_fold{f}.cdmm")))?;
        write_atomic_str(
            &out.join(format!("models/seg_fold{f}.history.csv")),
            &seg_history_csv(&r.seg_history),
        )?;
        write_atomic_str(
            &out.join(format!("models/caps_fold{f}.history.csv")),
            &caps_history_csv(&r.caps_history),
        )?;
    }
    Ok(())
}
