//! AdamW training loop with per-epoch cosine decay, checkpointing and resume.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{hex, Container, NamedTensor};
use crate::data::{batch_iter, batch_iter_epoch, AugmentPolicy, Batch, DatasetManifest};
use crate::error::{Error, Result};
use crate::extractor::ExtractorBackend;
use crate::loss::{total_loss_with_grad, LossValue};
use crate::metrics::{compute_metrics, confusion_per_image, Aggregation, ConfusionCounts};
use crate::model::{build_model, threshold_mask, ModelConfig, SegmentationModel};
use crate::nn::{sigmoid_backward, Parameterized};

pub const LOG_FILE: &str = "train_log.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_HEADER: &str = "epoch\tlr\ttrain_bce\ttrain_dice_loss\ttrain_total\tval_dice";
pub const PREDICTION_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Its `seed` field is replaced by `seed` above during `fit`.
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-4,
            epochs: 100,
            batch_size: 2,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 1,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay must be >= 0 and adam_eps > 0");
        }
        Ok(())
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * epoch / epochs))`, epoch clamped to `[0, epochs]`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let t = epoch.min(cfg.epochs) as f64 / cfg.epochs as f64;
    (cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    /// One decoupled-weight-decay Adam update using the gradients stored in `params`.
    pub fn step<P: Parameterized<f32> + ?Sized>(&mut self, params: &mut P, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        params.visit_mut("", &mut |name, p| {
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            for i in 0..p.value.len() {
                let g = p.grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let w = p.value[i] as f64;
                let update = (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
                p.value[i] = (w - lr * cfg.weight_decay * w - lr * update) as f32;
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_bce: f64,
    pub train_dice_loss: f64,
    pub train_total: f64,
    pub val_dice: f64,
}

impl EpochLog {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.lr, self.train_bce, self.train_dice_loss, self.train_total, self.val_dice
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub optimizer: AdamW,
    /// `(seed, next epoch)`: data order and augmentation are pure functions of these.
    pub rng_state: (u64, u64),
    pub best_val_dice: Option<f64>,
    pub history: Vec<EpochLog>,
    /// Running hash chain over the sample ids of every batch trained on.
    pub data_order: String,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            optimizer: AdamW::default(),
            rng_state: (cfg.seed, 0),
            best_val_dice: None,
            history: Vec::new(),
            data_order: String::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    step: u64,
    optimizer_step: u64,
    rng_state: (u64, u64),
    best_val_dice: Option<f64>,
    history: Vec<EpochLog>,
    data_order: String,
}

/// Forward, loss, backward and one optimizer update on `batch`.
pub fn train_step(model: &mut SegmentationModel, batch: &Batch, opt: &mut AdamW, lr: f64, cfg: &TrainConfig) -> Result<LossValue> {
    let (out, cache) = model.forward_train(&batch.images)?;
    if !out.logits.is_finite() {
        return Err(Error::NonFiniteLoss { tensor: "logits".into() });
    }
    let (loss, d_probs) = total_loss_with_grad(&out.probabilities, &batch.masks)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { tensor: "loss".into() });
    }
    let d_logits = sigmoid_backward(&out.probabilities, &d_probs);
    model.zero_grad();
    model.backward(&cache, &d_logits);
    let mut bad = None;
    model.visit("", &mut |n, p| {
        if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
            bad = Some(format!("{n}.grad"));
        }
    });
    if let Some(tensor) = bad {
        return Err(Error::NonFiniteLoss { tensor });
    }
    opt.step(model, lr, cfg);
    Ok(loss)
}

/// Per-image confusion counts at the prediction threshold, in manifest order.
pub fn evaluate(model: &SegmentationModel, manifest: &DatasetManifest) -> Result<Vec<ConfusionCounts>> {
    let mut counts = Vec::with_capacity(manifest.len());
    for batch in batch_iter(manifest, 1, None, None) {
        let batch = batch?;
        let probs = model.forward(&batch.images)?.probabilities;
        counts.extend(confusion_per_image(&threshold_mask(&probs, PREDICTION_THRESHOLD), &batch.masks)?);
    }
    Ok(counts)
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Return (after writing `last.ckpt`) once this many epochs have completed.
    pub stop_after_epoch: Option<usize>,
}

pub fn fit(
    model: &mut SegmentationModel,
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainState> {
    let state = TrainState::new(cfg);
    fit_from(model, state, train, val, cfg, out_dir, &FitOptions::default())
}

/// Continue training from `state`; the log is appended to, not truncated, when `state.epoch > 0`.
pub fn fit_from(
    model: &mut SegmentationModel,
    mut state: TrainState,
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &FitOptions,
) -> Result<TrainState> {
    cfg.validate()?;
    for m in [train, val] {
        if m.is_empty() {
            return Err(Error::EmptyDataset { root: m.root.clone() });
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    if state.epoch == 0 {
        std::fs::write(&log_path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
    }
    let policy = AugmentPolicy {
        seed: cfg.seed,
        ..cfg.augment.clone()
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_schedule(cfg, epoch);
        let (mut bce, mut dice, mut total, mut n) = (0.0, 0.0, 0.0, 0usize);
        for batch in batch_iter_epoch(train, cfg.batch_size, Some(cfg.seed), Some(&policy), epoch as u64) {
            let batch = batch?;
            state.data_order = chain_digest(&state.data_order, &batch.ids);
            let loss = train_step(model, &batch, &mut state.optimizer, lr, cfg)?;
            state.step += 1;
            let b = batch.len();
            bce += loss.bce * b as f64;
            dice += loss.dice_loss * b as f64;
            total += loss.total * b as f64;
            n += b;
        }
        let val_dice = compute_metrics(&evaluate(model, val)?, Aggregation::Micro)?.dice;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_bce: bce / n as f64,
            train_dice_loss: dice / n as f64,
            train_total: total / n as f64,
            val_dice,
        };
        append_line(&log_path, &entry.tsv_line())?;
        log::info!("{}", entry.tsv_line());
        state.history.push(entry);
        state.epoch = epoch + 1;
        state.rng_state = (cfg.seed, state.epoch as u64);
        if state.best_val_dice.is_none_or(|b| val_dice > b) {
            state.best_val_dice = Some(val_dice);
            save_checkpoint(&out_dir.join(BEST_CHECKPOINT), model, &state, cfg)?;
        }
        let stopping = opts.stop_after_epoch == Some(state.epoch);
        if state.epoch.is_multiple_of(cfg.checkpoint_every) || state.epoch == cfg.epochs || stopping {
            save_checkpoint(&out_dir.join(LAST_CHECKPOINT), model, &state, cfg)?;
        }
        if stopping {
            break;
        }
    }
    Ok(state)
}

/// Load `checkpoint` and train until its configured epoch count.
pub fn resume(
    checkpoint: &Path,
    train: &DatasetManifest,
    val: &DatasetManifest,
    out_dir: &Path,
    opts: &FitOptions,
) -> Result<(SegmentationModel, TrainState)> {
    let (mut model, state, cfg) = load_checkpoint(checkpoint)?;
    let state = fit_from(&mut model, state, train, val, &cfg, out_dir, opts)?;
    Ok((model, state))
}

fn chain_digest(prev: &str, ids: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    for id in ids {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
    }
    hex(h.finalize().as_slice())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn parse_log(text: &str) -> Result<Vec<EpochLog>> {
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("malformed log line: {line}")))
        };
        out.push(EpochLog {
            epoch: num(0)? as usize,
            lr: num(1)?,
            train_bce: num(2)?,
            train_dice_loss: num(3)?,
            train_total: num(4)?,
            val_dice: num(5)?,
        });
    }
    Ok(out)
}

const MODEL_PREFIX: &str = "model.";
const EXTRACTOR_PREFIX: &str = "extractor.";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

pub fn save_checkpoint(path: &Path, model: &SegmentationModel, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let mut tensors = Vec::new();
    model.visit("", &mut |n, p| {
        tensors.push(NamedTensor {
            name: format!("{MODEL_PREFIX}{n}"),
            shape: p.shape.clone(),
            data: p.value.clone(),
        })
    });
    for (n, (m, v)) in &state.optimizer.moments {
        tensors.push(NamedTensor {
            name: format!("{M_PREFIX}{n}"),
            shape: vec![m.len()],
            data: m.clone(),
        });
        tensors.push(NamedTensor {
            name: format!("{V_PREFIX}{n}"),
            shape: vec![v.len()],
            data: v.clone(),
        });
    }
    tensors.extend(model.extractor().to_tensors(EXTRACTOR_PREFIX));
    let state_header = StateHeader {
        epoch: state.epoch,
        step: state.step,
        optimizer_step: state.optimizer.step,
        rng_state: state.rng_state,
        best_val_dice: state.best_val_dice,
        history: state.history.clone(),
        data_order: state.data_order.clone(),
    };
    let header = json!({
        "kind": "model",
        "model_config": model.config(),
        "train_config": cfg,
        "state": state_header,
        "backend": model.extractor().header(),
    });
    let container = Container { header, tensors };
    // Write-then-rename so an interrupted save never leaves a torn file behind.
    let tmp = tmp_path(path);
    container.write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn header_field<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    let v = c
        .header
        .get(key)
        .ok_or_else(|| Error::CorruptWeights(format!("checkpoint header lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::CorruptWeights(format!("checkpoint `{key}`: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(SegmentationModel, TrainState, TrainConfig)> {
    let c = Container::read(path)?;
    if c.header.get("kind").and_then(|k| k.as_str()) != Some("model") {
        return Err(Error::CorruptWeights(format!("{} is not a model checkpoint", path.display())));
    }
    let model_cfg: ModelConfig = header_field(&c, "model_config")?;
    let train_cfg: TrainConfig = header_field(&c, "train_config")?;
    let sh: StateHeader = header_field(&c, "state")?;
    let extractor = Arc::new(ExtractorBackend::from_container(&c, EXTRACTOR_PREFIX)?);
    let mut model = build_model(&model_cfg, extractor, 0)?;
    let by_name: BTreeMap<&str, &NamedTensor> = c.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    model.load_parameters(&|n| {
        by_name
            .get(format!("{MODEL_PREFIX}{n}").as_str())
            .map(|t| (t.shape.clone(), t.data.clone()))
    })?;
    let mut moments = BTreeMap::new();
    for t in &c.tensors {
        if let Some(n) = t.name.strip_prefix(M_PREFIX) {
            let v = by_name
                .get(format!("{V_PREFIX}{n}").as_str())
                .ok_or_else(|| Error::CorruptWeights(format!("missing second moment for {n}")))?;
            moments.insert(n.to_string(), (t.data.clone(), v.data.clone()));
        }
    }
    let state = TrainState {
        epoch: sh.epoch,
        step: sh.step,
        optimizer: AdamW {
            step: sh.optimizer_step,
            moments,
        },
        rng_state: sh.rng_state,
        best_val_dice: sh.best_val_dice,
        history: sh.history,
        data_order: sh.data_order,
    };
    Ok((model, state, train_cfg))
}

/// Render the per-epoch history as the tab-separated log format.
pub fn history_tsv(history: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in history {
        let _ = writeln!(s, "{}", e.tsv_line());
    }
    s
}
