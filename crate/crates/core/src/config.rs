//! Flat `key=value` run configuration.
//!
//! One setting per line; blank lines and `#` comments are ignored. Lists
//! are comma-separated. [`RunConfig::to_text`] writes every key in a fixed
//! order, so two equal configs serialize to identical bytes.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::loss::DiceMode;
use crate::nn::{BlockSpec, NetworkConfig};
use crate::qire::QireConfig;
use crate::qivconv::{Activation, LayerConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldGrouping {
    Segment,
    Recording,
}

impl FoldGrouping {
    pub fn name(self) -> &'static str {
        match self {
            FoldGrouping::Segment => "segment",
            FoldGrouping::Recording => "recording",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub k: usize,
    pub p: f64,
    pub rescale: bool,
    pub lambda: f64,
    pub prior_var: f64,

    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub pool: bool,
    pub dense: usize,
    pub activation: Activation,

    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub folds: usize,
    /// Train only the first `max_folds` folds (0 = all).
    pub max_folds: usize,
    /// Fold a checkpoint belongs to; evaluation commands use its test split.
    pub fold: usize,
    pub val_fraction: f64,
    pub adaptive_weights: bool,
    pub ema_decay: f64,
    pub dice: DiceMode,
    pub seed: u64,
    pub grouping: FoldGrouping,
    pub jobs: usize,

    pub snr_levels: Vec<f64>,
    pub noise_trials: usize,
    pub noise_shape: Vec<usize>,
    pub noise_ks: Vec<usize>,
    pub noise_ps: Vec<f64>,

    pub synth_recordings: usize,
    pub synth_windows: usize,
    pub synth_rate: f64,
    pub synth_snr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            cache: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            k: 5,
            p: 0.05,
            rescale: false,
            lambda: 1e-5,
            prior_var: 0.01,
            filters: vec![16, 32],
            kernels: vec![7, 7],
            pool: true,
            dense: 32,
            activation: Activation::Relu,
            lr: 1e-3,
            batch: 256,
            epochs: 500,
            patience: 50,
            folds: 5,
            max_folds: 0,
            fold: 0,
            val_fraction: 0.1,
            adaptive_weights: true,
            ema_decay: 0.9,
            dice: DiceMode::AllTerms,
            seed: 0,
            grouping: FoldGrouping::Segment,
            jobs: 1,
            snr_levels: vec![25.0, 20.0, 15.0, 10.0, 5.0],
            noise_trials: 1000,
            noise_shape: vec![7, 1, 16],
            noise_ks: vec![1, 3, 5, 7, 9],
            noise_ps: vec![0.0, 0.05, 0.2],
            synth_recordings: 125,
            synth_windows: 4,
            synth_rate: 2000.0,
            synth_snr: 25.0,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::invalid(format!("config {key}={value}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e| bad(key, v, e))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| num(key, s)).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "manifest" => self.manifest = path(v),
            "cache" => self.cache = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "k" => self.k = num(key, v)?,
            "p" => self.p = num(key, v)?,
            "rescale" => self.rescale = boolean(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "prior_var" => self.prior_var = num(key, v)?,
            "filters" => self.filters = list(key, v)?,
            "kernels" => self.kernels = list(key, v)?,
            "pool" => self.pool = boolean(key, v)?,
            "dense" => self.dense = num(key, v)?,
            "activation" => self.activation = Activation::parse(v)?,
            "lr" => self.lr = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "folds" => self.folds = num(key, v)?,
            "max_folds" => self.max_folds = num(key, v)?,
            "fold" => self.fold = num(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "loss_weighting" => {
                self.adaptive_weights = match v {
                    "adaptive" => true,
                    "fixed" => false,
                    _ => return Err(bad(key, v, "expected adaptive or fixed")),
                }
            }
            "ema_decay" => self.ema_decay = num(key, v)?,
            "dice" => self.dice = DiceMode::parse(v)?,
            "seed" => self.seed = num(key, v)?,
            "grouping" => {
                self.grouping = match v {
                    "segment" => FoldGrouping::Segment,
                    "recording" => FoldGrouping::Recording,
                    _ => return Err(bad(key, v, "expected segment or recording")),
                }
            }
            "jobs" => self.jobs = num(key, v)?,
            "snr_levels" => self.snr_levels = list(key, v)?,
            "noise_trials" => self.noise_trials = num(key, v)?,
            "noise_shape" => self.noise_shape = list(key, v)?,
            "noise_ks" => self.noise_ks = list(key, v)?,
            "noise_ps" => self.noise_ps = list(key, v)?,
            "synth_recordings" => self.synth_recordings = num(key, v)?,
            "synth_windows" => self.synth_windows = num(key, v)?,
            "synth_rate" => self.synth_rate = num(key, v)?,
            "synth_snr" => self.synth_snr = num(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let pairs: Vec<(&str, String)> = vec![
            ("manifest", show(&self.manifest)),
            ("cache", show(&self.cache)),
            ("checkpoint", show(&self.checkpoint)),
            ("out_dir", self.out_dir.display().to_string()),
            ("k", self.k.to_string()),
            ("p", self.p.to_string()),
            ("rescale", self.rescale.to_string()),
            ("lambda", self.lambda.to_string()),
            ("prior_var", self.prior_var.to_string()),
            ("filters", join(&self.filters)),
            ("kernels", join(&self.kernels)),
            ("pool", self.pool.to_string()),
            ("dense", self.dense.to_string()),
            ("activation", self.activation.name().to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("folds", self.folds.to_string()),
            ("max_folds", self.max_folds.to_string()),
            ("fold", self.fold.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("loss_weighting", if self.adaptive_weights { "adaptive" } else { "fixed" }.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("dice", self.dice.name().to_string()),
            ("seed", self.seed.to_string()),
            ("grouping", self.grouping.name().to_string()),
            ("jobs", self.jobs.to_string()),
            ("snr_levels", join(&self.snr_levels)),
            ("noise_trials", self.noise_trials.to_string()),
            ("noise_shape", join(&self.noise_shape)),
            ("noise_ks", join(&self.noise_ks)),
            ("noise_ps", join(&self.noise_ps)),
            ("synth_recordings", self.synth_recordings.to_string()),
            ("synth_windows", self.synth_windows.to_string()),
            ("synth_rate", self.synth_rate.to_string()),
            ("synth_snr", self.synth_snr.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Architecture part only; stored in checkpoints.
    pub fn network_config(&self) -> Result<NetworkConfig> {
        let kernels = match self.kernels.len() {
            1 => vec![self.kernels[0]; self.filters.len()],
            n if n == self.filters.len() => self.kernels.clone(),
            n => {
                return Err(Error::invalid(format!(
                    "kernels lists {n} sizes for {} blocks",
                    self.filters.len()
                )))
            }
        };
        let cfg = NetworkConfig {
            in_channels: 1,
            blocks: self
                .filters
                .iter()
                .zip(&kernels)
                .map(|(&filters, &kernel)| BlockSpec { filters, kernel })
                .collect(),
            pool_between: self.pool,
            dense_width: self.dense,
            layer: LayerConfig {
                qire: QireConfig {
                    k: self.k,
                    p: self.p,
                    rescale_sqrt_n: self.rescale,
                },
                kl_scale: self.lambda,
                activation: Activation::Identity,
                stride: 1,
            },
            prior_var: self.prior_var,
            activation: self.activation,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            patience: self.patience,
            val_fraction: self.val_fraction,
            adaptive_weights: self.adaptive_weights,
            ema_decay: self.ema_decay,
            dice: self.dice,
        }
    }

    /// Checks every precondition before work starts.
    pub fn validate(&self) -> Result<()> {
        self.network_config()?;
        self.train_config().validate()?;
        if self.folds < 2 {
            return Err(Error::invalid(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.fold >= self.folds {
            return Err(Error::invalid(format!("fold {} out of range for {} folds", self.fold, self.folds)));
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs must be positive"));
        }
        if self.noise_shape.is_empty() || self.noise_shape.contains(&0) {
            return Err(Error::invalid("noise_shape extents must be positive"));
        }
        if self.snr_levels.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("snr_levels must be numbers"));
        }
        if !(self.synth_rate > 0.0) {
            return Err(Error::invalid("synth_rate must be positive"));
        }
        Ok(())
    }
}
