use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crackseg_core::data::{load_image, scan_dataset, DatasetManifest};
use crackseg_core::extractor::visualize_pyramid;
use crackseg_core::fusion::FusionMode;
use crackseg_core::metrics::{compute_metrics, Aggregation, ConfusionCounts, MetricReport};
use crackseg_core::model::{build_model, SegmentationModel};
use crackseg_core::nn::{resize_bilinear, Parameterized};
use crackseg_core::profile::{profile_model, ProfileReport};
use crackseg_core::train::{
    evaluate, fit_from, load_checkpoint, resume, FitOptions, TrainState, BEST_CHECKPOINT, PREDICTION_THRESHOLD,
};
use crackseg_core::{par, report, Error, Result};

use crate::config::RunConfig;
use crate::render::{crop, mask_image, overlay_image, pad_to_divisor};

pub const MICRO_REPORT: &str = "metrics_micro.txt";
pub const MACRO_REPORT: &str = "metrics_macro.txt";
pub const PER_IMAGE_TABLE: &str = "per_image.tsv";
pub const PROFILE_REPORT: &str = "profile.txt";
pub const ABLATION_TABLE: &str = "ablation.tsv";

fn setup(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    par::set_sequential(cfg.deterministic);
    cfg.write_resolved(&cfg.out)?;
    Ok(())
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
}

fn split(cfg: &RunConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    let root = require(&cfg.data_root, "data_root")?;
    Ok(scan_dataset(root, cfg.input_size)?.split_holdout(cfg.val_fraction))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainState> {
    setup(cfg)?;
    let (train, val) = split(cfg)?;
    train.write_tsv(&cfg.out.join("train_manifest.tsv"))?;
    val.write_tsv(&cfg.out.join("val_manifest.tsv"))?;
    let opts = FitOptions {
        stop_after_epoch: cfg.stop_after_epoch,
    };
    if let Some(ckpt) = &cfg.resume {
        return resume(ckpt, &train, &val, &cfg.out, &opts).map(|(_, s)| s);
    }
    let backend = Arc::new(cfg.backend.build()?);
    let mut model = build_model(&cfg.model, backend, cfg.train.seed)?;
    log::info!(
        "training {} trainable parameters, fusion {}",
        model.num_params(),
        cfg.model.fusion_mode
    );
    fit_from(&mut model, TrainState::new(&cfg.train), &train, &val, &cfg.train, &cfg.out, &opts)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub micro: MetricReport,
    pub macro_: MetricReport,
    pub per_image: Vec<(String, ConfusionCounts)>,
}

pub fn evaluate_manifest(model: &SegmentationModel, manifest: &DatasetManifest) -> Result<EvalOutcome> {
    let counts = evaluate(model, manifest)?;
    Ok(EvalOutcome {
        micro: compute_metrics(&counts, Aggregation::Micro)?,
        macro_: compute_metrics(&counts, Aggregation::Macro)?,
        per_image: manifest.pairs.iter().map(|p| p.stem.clone()).zip(counts).collect(),
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    setup(cfg)?;
    let (model, _, _) = load_checkpoint(require(&cfg.checkpoint, "checkpoint")?)?;
    let root = require(&cfg.data_root, "data_root")?;
    let manifest = scan_dataset(root, cfg.input_size)?;
    let out = evaluate_manifest(&model, &manifest)?;
    let dataset = format!("dataset: {}", root.display());
    let threshold = format!("threshold: {PREDICTION_THRESHOLD} (pixel predicted positive when p >= threshold)");
    let notes = [dataset.as_str(), threshold.as_str()];
    report::write(&cfg.out.join(MICRO_REPORT), "metric report", &notes, &out.micro)?;
    report::write(&cfg.out.join(MACRO_REPORT), "metric report", &notes, &out.macro_)?;
    let mut t = String::from("id\ttp\tfp\tfn\ttn\tf1\tiou\tdice\n");
    for (id, c) in &out.per_image {
        let _ = writeln!(
            t,
            "{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            c.f1(),
            c.iou(),
            c.dice()
        );
    }
    let path = cfg.out.join(PER_IMAGE_TABLE);
    std::fs::write(&path, t).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no files in {}", input.display())));
    }
    Ok(files)
}

fn predict_one(model: &SegmentationModel, path: &Path, out_dir: &Path) -> Result<[PathBuf; 2]> {
    let image = load_image(path)?;
    let (h, w) = image.hw();
    let mask = crop(&model.predict_mask(&pad_to_divisor(&image), PREDICTION_THRESHOLD)?, h, w);
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mask_path = out_dir.join(format!("{stem}_mask.png"));
    let overlay_path = out_dir.join(format!("{stem}_overlay.png"));
    let save_err = |p: &Path, e: image::ImageError| Error::Decode {
        path: p.to_path_buf(),
        msg: e.to_string(),
    };
    mask_image(&mask).save(&mask_path).map_err(|e| save_err(&mask_path, e))?;
    overlay_image(&image, &mask)
        .save(&overlay_path)
        .map_err(|e| save_err(&overlay_path, e))?;
    Ok([mask_path, overlay_path])
}

/// Writes `<stem>_mask.png` and `<stem>_overlay.png` per input. Files that fail
/// are reported and skipped; the call fails only when every file fails.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    setup(cfg)?;
    let (model, _, _) = load_checkpoint(require(&cfg.checkpoint, "checkpoint")?)?;
    let inputs = list_inputs(require(&cfg.input, "input")?)?;
    let mut written = Vec::new();
    let mut last_err = None;
    for path in &inputs {
        match predict_one(&model, path, &cfg.out) {
            Ok(files) => written.extend(files),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                last_err = Some(e);
            }
        }
    }
    match last_err {
        Some(e) if written.is_empty() => Err(e),
        _ => Ok(written),
    }
}

pub fn cmd_visualize(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    setup(cfg)?;
    let backend = cfg.backend.build()?;
    let image = load_image(require(&cfg.input, "input")?)?;
    let (h, w) = cfg.input_size;
    let pyramid = backend.extract(&resize_bilinear(&image, h, w))?;
    visualize_pyramid(&pyramid, cfg.n_maps, &cfg.out)
}

pub fn cmd_profile(cfg: &RunConfig) -> Result<ProfileReport> {
    setup(cfg)?;
    let model = match &cfg.checkpoint {
        Some(ckpt) => load_checkpoint(ckpt)?.0,
        None => build_model(&cfg.model, Arc::new(cfg.backend.build()?), cfg.train.seed)?,
    };
    let r = profile_model(&model, cfg.input_size)?;
    let notes = r.notes(cfg.input_size);
    let notes: Vec<&str> = notes.iter().map(String::as_str).collect();
    report::write(&cfg.out.join(PROFILE_REPORT), "profile report", &notes, &r)?;
    Ok(r)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: FusionMode,
    pub params_millions: f64,
    pub parameter_names: Vec<String>,
    /// `(split name, micro metrics)`
    pub metrics: Vec<(String, MetricReport)>,
    pub data_order: String,
}

/// Table row order.
pub const ABLATION_MODES: [FusionMode; 3] = [FusionMode::Off, FusionMode::Concat, FusionMode::Gated];

/// Train and evaluate every fusion mode under one config and seed.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    setup(cfg)?;
    let (train, val) = split(cfg)?;
    let mut splits = vec![("train".to_string(), train), ("val".to_string(), val)];
    for (name, root) in &cfg.test_roots {
        splits.push((name.clone(), scan_dataset(root, cfg.input_size)?));
    }
    let mut rows = Vec::new();
    for mode in ABLATION_MODES {
        let mut sub = cfg.with_fusion_mode(mode);
        sub.out = cfg.out.join(mode.as_str());
        sub.resume = None;
        sub.stop_after_epoch = None;
        let state = cmd_train(&sub)?;
        let (model, _, _) = load_checkpoint(&sub.out.join(BEST_CHECKPOINT))?;
        let metrics = splits
            .iter()
            .map(|(name, m)| Ok((name.clone(), evaluate_manifest(&model, m)?.micro)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            mode,
            params_millions: model.num_params() as f64 / 1e6,
            parameter_names: model.param_names(""),
            metrics,
            data_order: state.data_order,
        });
    }
    let path = cfg.out.join(ABLATION_TABLE);
    std::fs::write(&path, ablation_tsv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("fusion_mode\tparams_millions");
    if let Some(first) = rows.first() {
        for (split, _) in &first.metrics {
            let _ = write!(s, "\t{split}_f1\t{split}_iou\t{split}_dice");
        }
    }
    s.push_str("\tdata_order\n");
    for r in rows {
        let _ = write!(s, "{}\t{:.6}", r.mode, r.params_millions);
        for (_, m) in &r.metrics {
            let _ = write!(s, "\t{:.6}\t{:.6}\t{:.6}", m.f1, m.iou, m.dice);
        }
        let _ = writeln!(s, "\t{}", r.data_order);
    }
    s
}
