//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected, both in
//! files and in `--key value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crackseg_core::data::Rotation;
use crackseg_core::extractor::{load_pretrained_backend, make_stub_backend, ExtractorBackend, DEFAULT_STAGE_CHANNELS};
use crackseg_core::fusion::FusionMode;
use crackseg_core::model::ModelConfig;
use crackseg_core::train::TrainConfig;
use crackseg_core::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved.cfg";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Stub(u64),
    Pretrained(PathBuf),
}

impl BackendSpec {
    pub fn build(&self) -> Result<ExtractorBackend> {
        match self {
            BackendSpec::Stub(seed) => Ok(make_stub_backend(*seed, DEFAULT_STAGE_CHANNELS)),
            BackendSpec::Pretrained(path) => load_pretrained_backend(path),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Stub(seed) => write!(f, "stub:{seed}"),
            BackendSpec::Pretrained(p) => write!(f, "pretrained:{}", p.display()),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("stub", seed)) => Ok(BackendSpec::Stub(parse_num("backend", seed)?)),
            Some(("pretrained", path)) if !path.is_empty() => Ok(BackendSpec::Pretrained(path.into())),
            _ => Err(Error::Config(format!("backend must be stub:<seed> or pretrained:<path>, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    /// Extra evaluation datasets, `name=path`.
    pub test_roots: Vec<(String, PathBuf)>,
    pub val_fraction: f64,
    pub out: PathBuf,
    pub input_size: (usize, usize),
    pub backend: BackendSpec,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub n_maps: usize,
    pub resume: Option<PathBuf>,
    pub stop_after_epoch: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: None,
            test_roots: Vec::new(),
            val_fraction: 0.1,
            out: PathBuf::from("runs/default"),
            input_size: (256, 256),
            backend: BackendSpec::Stub(0),
            deterministic: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            input: None,
            n_maps: 9,
            resume: None,
            stop_after_epoch: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data_root",
    "test_roots",
    "val_fraction",
    "out",
    "input_size",
    "backend",
    "deterministic",
    "base_channels",
    "fusion_mode",
    "mask_groups",
    "lr0",
    "epochs",
    "batch_size",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "checkpoint_every",
    "flip_h_prob",
    "flip_v_prob",
    "rotations",
    "checkpoint",
    "input",
    "n_maps",
    "resume",
    "stop_after_epoch",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn opt_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// `HxW`, e.g. `256x320`.
pub fn parse_size(v: &str) -> Result<(usize, usize)> {
    let (h, w) = v
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("size must be HxW, got `{v}`")))?;
    Ok((parse_num("input_size", h)?, parse_num("input_size", w)?))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data_root" => self.data_root = opt_path(v),
            "test_roots" => {
                self.test_roots = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .split_once('=')
                            .map(|(n, p)| (n.trim().to_string(), PathBuf::from(p.trim())))
                            .ok_or_else(|| Error::Config(format!("test_roots entry `{s}` is not name=path")))
                    })
                    .collect::<Result<_>>()?
            }
            "val_fraction" => self.val_fraction = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "input_size" => self.input_size = parse_size(v)?,
            "backend" => self.backend = v.parse()?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "base_channels" => self.model.base_channels = parse_num(key, v)?,
            "fusion_mode" => self.model.fusion_mode = v.parse()?,
            "mask_groups" => self.model.mask_groups = parse_num(key, v)?,
            "lr0" => self.train.lr0 = parse_num(key, v)?,
            "epochs" => self.train.epochs = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "beta1" => self.train.betas.0 = parse_num(key, v)?,
            "beta2" => self.train.betas.1 = parse_num(key, v)?,
            "adam_eps" => self.train.adam_eps = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "flip_h_prob" => self.train.augment.flip_h_prob = parse_num(key, v)?,
            "flip_v_prob" => self.train.augment.flip_v_prob = parse_num(key, v)?,
            "rotations" => {
                self.train.augment.rotation_choices = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        let d: u32 = parse_num(key, s)?;
                        Rotation::from_degrees(d)
                            .ok_or_else(|| Error::Config(format!("rotation {d} is not a multiple of 90 below 360")))
                    })
                    .collect::<Result<_>>()?
            }
            "checkpoint" => self.checkpoint = opt_path(v),
            "input" => self.input = opt_path(v),
            "n_maps" => self.n_maps = parse_num(key, v)?,
            "resume" => self.resume = opt_path(v),
            "stop_after_epoch" => {
                self.stop_after_epoch = if v.is_empty() { None } else { Some(parse_num(key, v)?) }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "data_root" => opt_str(&self.data_root),
            "test_roots" => self
                .test_roots
                .iter()
                .map(|(n, p)| format!("{n}={}", p.display()))
                .collect::<Vec<_>>()
                .join(","),
            "val_fraction" => self.val_fraction.to_string(),
            "out" => self.out.display().to_string(),
            "input_size" => format!("{}x{}", self.input_size.0, self.input_size.1),
            "backend" => self.backend.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "base_channels" => self.model.base_channels.to_string(),
            "fusion_mode" => self.model.fusion_mode.to_string(),
            "mask_groups" => self.model.mask_groups.to_string(),
            "lr0" => t.lr0.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "beta1" => t.betas.0.to_string(),
            "beta2" => t.betas.1.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "seed" => t.seed.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "flip_h_prob" => t.augment.flip_h_prob.to_string(),
            "flip_v_prob" => t.augment.flip_v_prob.to_string(),
            "rotations" => t
                .augment
                .rotation_choices
                .iter()
                .map(|r| r.degrees().to_string())
                .collect::<Vec<_>>()
                .join(","),
            "checkpoint" => opt_str(&self.checkpoint),
            "input" => opt_str(&self.input),
            "n_maps" => self.n_maps.to_string(),
            "resume" => opt_str(&self.resume),
            "stop_after_epoch" => self.stop_after_epoch.map(|e| e.to_string()).unwrap_or_default(),
            _ => return None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `--key value` pairs. A bare `--deterministic` means `true`.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let key = args[i]
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got `{}`", args[i])))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                i += 1;
                continue;
            }
            let value = args.get(i + 1).filter(|v| !v.starts_with("--"));
            match (key, value) {
                ("deterministic", None) => {
                    self.deterministic = true;
                    i += 1;
                }
                (_, Some(v)) => {
                    self.set(key, v)?;
                    i += 2;
                }
                (_, None) => {
                    // Surface unknown keys before complaining about the value.
                    if self.get(key).is_none() {
                        return Err(Error::Config(format!("unknown key `{key}`")));
                    }
                    return Err(Error::Config(format!("`--{key}` needs a value")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        crackseg_core::data::check_target_size(self.input_size)?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.n_maps == 0 {
            return Err(Error::Config("n_maps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k).unwrap()));
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn with_fusion_mode(&self, mode: FusionMode) -> Self {
        let mut c = self.clone();
        c.model.fusion_mode = mode;
        c
    }
}
