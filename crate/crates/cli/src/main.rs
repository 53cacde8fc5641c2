use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capsdemm_core::capsnet::CapsModel;
use capsdemm_core::config::RunConfig;
use capsdemm_core::crossval::{self, caps_history_csv, seg_history_csv};
use capsdemm_core::dataset::{write_synthetic, Dataset, Slide};
use capsdemm_core::io::{save_png, write_atomic_str};
use capsdemm_core::plot::overlay;
use capsdemm_core::slic::SUPERPIXEL_PRESETS;
use capsdemm_core::unet::SegModel;
use capsdemm_core::wsi::{diagnose_wsi, DiagnoseParams};
use capsdemm_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Stratum-corneum segmentation and capsule-network microabscess detection.
#[derive(Parser)]
#[command(name = "capsdemm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic biopsy dataset.
    Synth(SynthArgs),
    /// Train the stratum-corneum segmenter on a dataset.
    TrainSeg(TrainArgs),
    /// Train the patch classifier on ground-truth-mask patches of a dataset.
    TrainCaps(TrainArgs),
    /// Diagnose one slide image with trained models.
    Diagnose(DiagnoseArgs),
    /// Three-fold cross-validation of the whole pipeline.
    Crossval(CrossvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 90)]
    num: usize,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    positive_frac: f64,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Image size and appearance settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file; the training history goes next to it as `<out>.history.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    seg: PathBuf,
    #[arg(long)]
    caps: PathBuf,
    #[arg(long, default_value_t = SUPERPIXEL_PRESETS[0])]
    superpixels: usize,
    /// Pool size; defaults to the one stored in the model.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Patch probability cutoff; defaults to the one stored in the model.
    #[arg(long)]
    cutoff: Option<f64>,
    /// The slide is positive with more than T positive patches.
    #[arg(long = "T")]
    t: usize,
    /// Write the image with the SC outline and positive patches boxed.
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// SLIC and post-processing settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Identifier printed in the result; defaults to the image file stem.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Folds run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn check_output_file(path: &Path) -> Result<()> {
    if path.is_dir() {
        return Err(Error::Usage(format!("{} is a directory", path.display())));
    }
    Ok(())
}

fn history_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn load_slides(data: &Path) -> Result<Vec<Slide>> {
    let ds = Dataset::open(data)?;
    ds.load_all()
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    if a.num == 0 {
        return Err(Error::Usage("--num must be positive".into()));
    }
    let m = write_synthetic(&a.out, &cfg.synth_config(), a.num, a.positive_frac, a.force)?;
    let pos = m.images.iter().filter(|e| e.label.is_positive()).count();
    eprintln!(
        "wrote {} slides ({pos} positive) to {}",
        m.images.len(),
        a.out.display()
    );
    Ok(())
}

fn train_seg(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    check_output_file(&a.out)?;
    let slides = load_slides(&a.data)?;
    let refs: Vec<&Slide> = slides.iter().collect();
    let (model, history) = crossval::fit_segmenter(&refs, &cfg, cfg.seed)?;
    for h in &history {
        eprintln!(
            "epoch {} loss {:.4} val_dice {}",
            h.epoch,
            h.train_loss,
            h.val_dice.map_or("-".into(), |d| format!("{d:.4}"))
        );
    }
    model.save(&a.out)?;
    write_atomic_str(&history_path(&a.out), &seg_history_csv(&history))
}

fn train_caps(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    check_output_file(&a.out)?;
    let slides = load_slides(&a.data)?;
    let refs: Vec<&Slide> = slides.iter().collect();
    let fit = crossval::fit_patch_classifier(&refs, &cfg, cfg.seed)?;
    for h in &fit.history {
        eprintln!(
            "epoch {} loss {:.4} acc {:.4} val_auc {}",
            h.epoch,
            h.train_loss,
            h.train_acc,
            h.val_auc.map_or("-".into(), |d| format!("{d:.4}"))
        );
    }
    for e in &fit.k_sweep {
        eprintln!("K={} val_auc {:.4}", e.k, e.roc.auc);
    }
    eprintln!("K={} cutoff {:.6}", fit.model.config.k, fit.model.cutoff);
    fit.model.save(&a.out)?;
    write_atomic_str(&history_path(&a.out), &caps_history_csv(&fit.history))
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    if a.superpixels == 0 {
        return Err(Error::Usage("--superpixels must be positive".into()));
    }
    if let Some(c) = a.cutoff {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Usage(format!("--cutoff {c} is outside [0, 1]")));
        }
    }
    if let Some(o) = &a.overlay {
        check_output_file(o)?;
    }
    let image = image::open(&a.image)?.to_rgb8();
    let seg = SegModel::load(&a.seg)?;
    let mut caps = CapsModel::load(&a.caps)?;
    if let Some(k) = a.k {
        let (h, w) = caps.config.map_size(caps.config.patch_size)?;
        if k == 0 || k > h * w {
            return Err(Error::Usage(format!("--K must lie in 1..={}", h * w)));
        }
        caps.config.k = k;
    }
    let params = DiagnoseParams {
        slic: cfg.slic_params(a.superpixels),
        min_area_fraction: cfg.min_area_fraction,
        cutoff: a.cutoff.unwrap_or(caps.cutoff),
        threshold: a.t,
    };
    let id = a.id.clone().unwrap_or_else(|| {
        a.image
            .file_stem()
            .map_or("image".into(), |s| s.to_string_lossy().into_owned())
    });
    let d = diagnose_wsi(&id, &image, &seg, &caps, &params)?;
    if let Some(o) = &a.overlay {
        let mask = capsdemm_core::morphology::postprocess_with(&seg.segment(&image)?, params.min_area_fraction)?;
        let boxes: Vec<_> = d
            .patches
            .iter()
            .zip(&d.patch_probabilities)
            .filter(|(_, &p)| p >= params.cutoff)
            .map(|(p, _)| p.window)
            .collect();
        save_png(o, &overlay(&image, &mask, &boxes))?;
    }
    println!("{}", d.summary_line());
    Ok(())
}

fn run_crossval(a: CrossvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    if a.jobs == 0 {
        return Err(Error::Usage("--jobs must be positive".into()));
    }
    if a.out.is_file() {
        return Err(Error::Usage(format!("{} is a file", a.out.display())));
    }
    let ds = Dataset::open(&a.data)?;
    let folds = ds.manifest.folds;
    let slides = ds.load_all()?;
    let results = crossval::crossval(&slides, &cfg, folds, a.jobs)?;
    crossval::write_reports(&results, &a.out)?;
    for r in &results {
        let p = &r.patch_scores;
        eprintln!(
            "fold {}: seg dice {:.4}, patch acc {:.4} auc {:.4} (K={})",
            r.fold + 1,
            r.seg_dice,
            p.metrics.accuracy,
            p.auc,
            p.k
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainSeg(a) => train_seg(a),
        Command::TrainCaps(a) => train_caps(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Crossval(a) => run_crossval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("capsdemm: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
