//! Experiment configuration.
//!
//! A flat `key = value` text file (`#` comments allowed) over desk-scale
//! defaults, with the same keys accepted as CLI overrides. The resolved
//! config is hashed (SHA-256 over its canonical JSON) and that hash is
//! stamped into every output artifact so a results directory is traceable
//! to the exact settings that produced it.

use crate::data::Regime;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Which corpus the experiment runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

/// Protocol variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full protocol: KL consistency, credibility promotion, cosine gate.
    Fedil,
    /// Plain delta averaging with naive pseudo-labeling: gate forced open,
    /// KL and credibility disabled.
    Fedavg,
    /// Supervised training on the server's labeled set only.
    ServerOnly,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Fedil => write!(f, "fedil"),
            Mode::Fedavg => write!(f, "fedavg"),
            Mode::ServerOnly => write!(f, "server-only"),
        }
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub gamma: f64,
    /// Total client count K.
    pub clients: usize,
    /// Clients selected per round.
    pub clients_per_round: usize,
    pub rounds: usize,
    pub regime: Regime,
    pub class_fraction: f64,

    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Consecutive-hit promotion threshold; 0 disables promotion.
    pub promote_t: u32,
    /// Agreement-count threshold; 0 means "same as promote_t".
    pub agree_t: u32,
    pub local_epochs: usize,
    pub server_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Cosine gate threshold; -1 opens every gate.
    pub gate_threshold: f64,
    pub coef_unsup_ce: f64,
    pub coef_kl: f64,
    pub coef_pseudo: f64,

    pub weak_noise: f64,
    pub strong_noise: f64,
    pub mask_fraction: f64,
    pub shift_pixels: usize,

    pub hidden_dims: Vec<usize>,

    pub seed: u64,
    pub mode: Mode,
    pub eval_every: usize,

    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,

    pub mnist_train_images: Option<PathBuf>,
    pub mnist_train_labels: Option<PathBuf>,
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            gamma: 0.1,
            clients: 10,
            clients_per_round: 5,
            rounds: 200,
            regime: Regime::Iid,
            class_fraction: 0.34,
            tau: 0.95,
            promote_t: 7,
            agree_t: 0,
            local_epochs: 5,
            server_epochs: 1,
            lr: 0.15,
            batch_size: 8,
            gate_threshold: 0.0,
            coef_unsup_ce: 1.0,
            coef_kl: 1.0,
            coef_pseudo: 1.0,
            weak_noise: 0.1,
            strong_noise: 0.5,
            mask_fraction: 0.2,
            shift_pixels: 0,
            hidden_dims: vec![32],
            seed: 42,
            mode: Mode::Fedil,
            eval_every: 5,
            synth_classes: 3,
            synth_per_class: 200,
            synth_test_per_class: 200,
            synth_dim: 20,
            synth_separation: 2.5,
            mnist_train_images: None,
            mnist_train_labels: None,
            mnist_test_images: None,
            mnist_test_labels: None,
        }
    }
}

impl ExperimentConfig {
    /// Loads defaults overlaid with a flat `key = value` file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}: line {}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )));
            };
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Applies one override; the same names work in config files and on the
    /// command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "mnist" => DatasetKind::Mnist,
                    other => {
                        return Err(Error::Config(format!(
                            "dataset must be synthetic|mnist, got {other}"
                        )))
                    }
                }
            }
            "gamma" => self.gamma = parse(key, value)?,
            "clients" => self.clients = parse(key, value)?,
            "clients_per_round" => self.clients_per_round = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "regime" => {
                self.regime = match value {
                    "iid" => Regime::Iid,
                    "non-iid" | "noniid" => Regime::NonIid,
                    other => {
                        return Err(Error::Config(format!(
                            "regime must be iid|non-iid, got {other}"
                        )))
                    }
                }
            }
            "class_fraction" => self.class_fraction = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "promote_t" => self.promote_t = parse(key, value)?,
            "agree_t" => self.agree_t = parse(key, value)?,
            "local_epochs" => self.local_epochs = parse(key, value)?,
            "server_epochs" => self.server_epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "gate_threshold" => self.gate_threshold = parse(key, value)?,
            "coef_unsup_ce" => self.coef_unsup_ce = parse(key, value)?,
            "coef_kl" => self.coef_kl = parse(key, value)?,
            "coef_pseudo" => self.coef_pseudo = parse(key, value)?,
            "weak_noise" => self.weak_noise = parse(key, value)?,
            "strong_noise" => self.strong_noise = parse(key, value)?,
            "mask_fraction" => self.mask_fraction = parse(key, value)?,
            "shift_pixels" => self.shift_pixels = parse(key, value)?,
            "hidden_dims" => {
                let dims: std::result::Result<Vec<usize>, _> = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse())
                    .collect();
                self.hidden_dims = dims
                    .map_err(|_| Error::Config(format!("bad hidden_dims `{value}`")))?;
            }
            "seed" => self.seed = parse(key, value)?,
            "mode" => {
                self.mode = match value {
                    "fedil" => Mode::Fedil,
                    "fedavg" => Mode::Fedavg,
                    "server-only" => Mode::ServerOnly,
                    other => {
                        return Err(Error::Config(format!(
                            "mode must be fedil|fedavg|server-only, got {other}"
                        )))
                    }
                }
            }
            "eval_every" => self.eval_every = parse(key, value)?,
            "synth_classes" => self.synth_classes = parse(key, value)?,
            "synth_per_class" => self.synth_per_class = parse(key, value)?,
            "synth_test_per_class" => self.synth_test_per_class = parse(key, value)?,
            "synth_dim" => self.synth_dim = parse(key, value)?,
            "synth_separation" => self.synth_separation = parse(key, value)?,
            "mnist_train_images" => self.mnist_train_images = Some(PathBuf::from(value)),
            "mnist_train_labels" => self.mnist_train_labels = Some(PathBuf::from(value)),
            "mnist_test_images" => self.mnist_test_images = Some(PathBuf::from(value)),
            "mnist_test_labels" => self.mnist_test_labels = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Range checks over the resolved settings.
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, msg: String) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg))
            }
        }
        check(
            self.gamma > 0.0 && self.gamma < 1.0,
            format!("gamma must be in (0,1), got {}", self.gamma),
        )?;
        check(self.clients >= 1, "clients must be >= 1".into())?;
        check(
            self.clients_per_round >= 1 && self.clients_per_round <= self.clients,
            format!(
                "clients_per_round must be in 1..={}, got {}",
                self.clients, self.clients_per_round
            ),
        )?;
        check(
            self.tau > 0.0 && self.tau < 1.0,
            format!("tau must be in (0,1), got {}", self.tau),
        )?;
        check(
            self.class_fraction > 0.0 && self.class_fraction <= 1.0,
            format!("class_fraction must be in (0,1], got {}", self.class_fraction),
        )?;
        check(
            self.lr.is_finite() && self.lr >= 0.0,
            format!("lr must be >= 0, got {}", self.lr),
        )?;
        check(self.batch_size >= 1, "batch_size must be >= 1".into())?;
        check(self.eval_every >= 1, "eval_every must be >= 1".into())?;
        check(
            self.gate_threshold.is_finite()
                && (-1.0..=1.0).contains(&self.gate_threshold),
            format!(
                "gate_threshold must be in [-1,1], got {}",
                self.gate_threshold
            ),
        )?;
        for (name, v) in [
            ("coef_unsup_ce", self.coef_unsup_ce),
            ("coef_kl", self.coef_kl),
            ("coef_pseudo", self.coef_pseudo),
            ("weak_noise", self.weak_noise),
            ("strong_noise", self.strong_noise),
        ] {
            check(v.is_finite() && v >= 0.0, format!("{name} must be >= 0, got {v}"))?;
        }
        check(
            (0.0..=1.0).contains(&self.mask_fraction),
            format!("mask_fraction must be in [0,1], got {}", self.mask_fraction),
        )?;
        if self.dataset == DatasetKind::Synthetic {
            check(self.synth_classes >= 2, "synth_classes must be >= 2".into())?;
            check(self.synth_dim >= 2, "synth_dim must be >= 2".into())?;
            check(
                self.synth_per_class >= 1 && self.synth_test_per_class >= 1,
                "synthetic class sizes must be >= 1".into(),
            )?;
            check(
                self.synth_separation.is_finite() && self.synth_separation >= 0.0,
                format!("synth_separation must be >= 0, got {}", self.synth_separation),
            )?;
        } else {
            check(
                self.mnist_train_images.is_some()
                    && self.mnist_train_labels.is_some()
                    && self.mnist_test_images.is_some()
                    && self.mnist_test_labels.is_some(),
                "mnist dataset needs all four mnist_* paths".into(),
            )?;
        }
        Ok(())
    }

    /// Canonical JSON of the config itself (no hash field).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
