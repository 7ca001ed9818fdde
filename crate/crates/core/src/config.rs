//! Run configuration: a flat file of `key = value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DecoySpec;
use crate::error::{Result, XblError};
use crate::exemplar::ExemplarPolicy;
use crate::io::{read_file, sha256_hex};
use crate::losses::LossWeights;
use crate::metrics::DEFAULT_TAU;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    CeOnly,
    Exbl,
    Rrr,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::CeOnly => "ce_only",
            LossMode::Exbl => "exbl",
            LossMode::Rrr => "rrr",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = XblError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce_only" => Ok(LossMode::CeOnly),
            "exbl" => Ok(LossMode::Exbl),
            "rrr" => Ok(LossMode::Rrr),
            other => Err(XblError::Config(format!(
                "loss_mode must be ce_only, exbl or rrr, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub decoy: DecoySpec,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub lr_decay_factor: f64,
    pub lr_decay_patience: usize,
    pub batch_size: usize,
    pub epochs_unrefined: usize,
    pub epochs_refine: usize,
    pub early_stop_patience: usize,
    pub loss: LossWeights,
    pub tau: f64,
    pub loss_mode: LossMode,
    pub exemplar_policy: ExemplarPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data_dir: None,
            decoy: DecoySpec::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            lr_decay_factor: 0.5,
            lr_decay_patience: 3,
            batch_size: 32,
            epochs_unrefined: 60,
            epochs_refine: 100,
            early_stop_patience: 5,
            loss: LossWeights::default(),
            tau: DEFAULT_TAU,
            loss_mode: LossMode::Exbl,
            exemplar_policy: ExemplarPolicy::Auto,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| XblError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    /// Model settings with the input geometry and class count taken from
    /// the dataset settings and the seed from the run.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_height: self.decoy.height,
            input_width: self.decoy.width,
            num_classes: self.decoy.num_classes,
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut manual = (None, None);
        let mut policy = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| XblError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(XblError::Config(format!("line {}: {key} given twice", n + 1)));
            }
            match key {
                "exemplar_policy" => policy = Some(value.to_string()),
                "exemplar_good" => manual.0 = Some(parse::<usize>(key, value)?),
                "exemplar_bad" => manual.1 = Some(parse::<usize>(key, value)?),
                _ => cfg.set(key, value).map_err(|e| match e {
                    XblError::Config(m) => XblError::Config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?,
            }
        }
        cfg.exemplar_policy = match (policy.as_deref(), manual) {
            (None | Some("auto"), (None, None)) => ExemplarPolicy::Auto,
            (None | Some("manual"), (Some(good), Some(bad))) => ExemplarPolicy::Manual { good, bad },
            (Some("manual"), _) => {
                return Err(XblError::Config(
                    "exemplar_policy = manual needs exemplar_good and exemplar_bad".into(),
                ))
            }
            (Some("auto"), _) => {
                return Err(XblError::Config(
                    "exemplar_good/exemplar_bad conflict with exemplar_policy = auto".into(),
                ))
            }
            (None, _) => {
                return Err(XblError::Config("exemplar_good and exemplar_bad go together".into()))
            }
            (Some(other), _) => {
                return Err(XblError::Config(format!(
                    "exemplar_policy must be auto or manual, got {other:?}"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path).map_err(|e| XblError::Config(e.to_string()))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| XblError::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse_str(&text).map_err(|e| match e {
            XblError::Config(m) => XblError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.decoy;
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "num_classes" => d.num_classes = parse(key, v)?,
            "image_height" => d.height = parse(key, v)?,
            "image_width" => d.width = parse(key, v)?,
            "bar_half_length" => d.bar_half_length = parse(key, v)?,
            "bar_sigma" => d.bar_sigma = parse(key, v)?,
            "bar_amplitude_min" => d.bar_amplitude.0 = parse(key, v)?,
            "bar_amplitude_max" => d.bar_amplitude.1 = parse(key, v)?,
            "bar_jitter" => d.bar_jitter = parse(key, v)?,
            "mask_level" => d.mask_level = parse(key, v)?,
            "patch_size" => d.patch_size = parse(key, v)?,
            "patch_margin" => d.patch_margin = parse(key, v)?,
            "rho" => d.rho = parse(key, v)?,
            "train_per_class" => d.train_per_class = parse(key, v)?,
            "validation_per_class" => d.validation_per_class = parse(key, v)?,
            "test_clean_per_class" => d.test_clean_per_class = parse(key, v)?,
            "test_swapped_per_class" => d.test_swapped_per_class = parse(key, v)?,
            "noise_sigma" => d.noise_sigma = parse(key, v)?,
            "conv_widths" => m.conv_widths = parse_list(key, v)?,
            "kernel_size" => m.kernel_size = parse(key, v)?,
            "pooled_blocks" => m.pooled_blocks = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "feature_block" => m.feature_block = Some(parse(key, v)?),
            "frozen_layers" => m.frozen_layers = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "lr_decay_patience" => self.lr_decay_patience = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs_unrefined" => self.epochs_unrefined = parse(key, v)?,
            "epochs_refine" => self.epochs_refine = parse(key, v)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, v)?,
            "margin" => self.loss.margin = parse(key, v)?,
            "lambda_l2" => self.loss.lambda_l2 = parse(key, v)?,
            "expl_scale" => self.loss.expl_scale = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "loss_mode" => self.loss_mode = v.parse()?,
            _ => return Err(XblError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.decoy.validate()?;
        crate::model::build_classifier(&self.model_config())?;
        self.adam.validate()?;
        self.loss.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs_unrefined", self.epochs_unrefined),
            ("epochs_refine", self.epochs_refine),
            ("early_stop_patience", self.early_stop_patience),
            ("lr_decay_patience", self.lr_decay_patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(XblError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(XblError::Config(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if !(self.tau > 0.0 && self.tau < 100.0) {
            return Err(XblError::Config(format!("tau must be in (0, 100), got {}", self.tau)));
        }
        Ok(())
    }

    /// Every setting as `key = value` lines in a fixed order. Parsing the
    /// result gives back an equal config.
    pub fn to_text(&self) -> String {
        let d = &self.decoy;
        let m = &self.model;
        let widths: Vec<String> = m.conv_widths.iter().map(|w| w.to_string()).collect();
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("output_dir = {}", self.output_dir.display()),
        ];
        if let Some(dd) = &self.data_dir {
            lines.push(format!("data_dir = {}", dd.display()));
        }
        lines.extend([
            format!("num_classes = {}", d.num_classes),
            format!("image_height = {}", d.height),
            format!("image_width = {}", d.width),
            format!("bar_half_length = {}", d.bar_half_length),
            format!("bar_sigma = {}", d.bar_sigma),
            format!("bar_amplitude_min = {}", d.bar_amplitude.0),
            format!("bar_amplitude_max = {}", d.bar_amplitude.1),
            format!("bar_jitter = {}", d.bar_jitter),
            format!("mask_level = {}", d.mask_level),
            format!("patch_size = {}", d.patch_size),
            format!("patch_margin = {}", d.patch_margin),
            format!("rho = {}", d.rho),
            format!("train_per_class = {}", d.train_per_class),
            format!("validation_per_class = {}", d.validation_per_class),
            format!("test_clean_per_class = {}", d.test_clean_per_class),
            format!("test_swapped_per_class = {}", d.test_swapped_per_class),
            format!("noise_sigma = {}", d.noise_sigma),
            format!("conv_widths = {}", widths.join(",")),
            format!("kernel_size = {}", m.kernel_size),
            format!("pooled_blocks = {}", m.pooled_blocks),
            format!("hidden = {}", m.hidden),
            format!("dropout = {}", m.dropout),
        ]);
        if let Some(fb) = m.feature_block {
            lines.push(format!("feature_block = {fb}"));
        }
        lines.extend([
            format!("frozen_layers = {}", m.frozen_layers),
            format!("lr = {}", self.adam.lr),
            format!("beta1 = {}", self.adam.beta1),
            format!("beta2 = {}", self.adam.beta2),
            format!("adam_eps = {}", self.adam.eps),
            format!("lr_decay_factor = {}", self.lr_decay_factor),
            format!("lr_decay_patience = {}", self.lr_decay_patience),
            format!("batch_size = {}", self.batch_size),
            format!("epochs_unrefined = {}", self.epochs_unrefined),
            format!("epochs_refine = {}", self.epochs_refine),
            format!("early_stop_patience = {}", self.early_stop_patience),
            format!("margin = {}", self.loss.margin),
            format!("lambda_l2 = {}", self.loss.lambda_l2),
            format!("expl_scale = {}", self.loss.expl_scale),
            format!("tau = {}", self.tau),
            format!("loss_mode = {}", self.loss_mode),
        ]);
        match self.exemplar_policy {
            ExemplarPolicy::Auto => lines.push("exemplar_policy = auto".into()),
            ExemplarPolicy::Manual { good, bad } => lines.extend([
                "exemplar_policy = manual".into(),
                format!("exemplar_good = {good}"),
                format!("exemplar_bad = {bad}"),
            ]),
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`], with
    /// `output_dir` and `data_dir` blanked so relocating a run keeps its hash.
    pub fn hash(&self) -> String {
        let located = RunConfig {
            output_dir: PathBuf::new(),
            data_dir: None,
            ..self.clone()
        };
        sha256_hex(located.to_text().as_bytes())[..16].to_string()
    }
}
