//! Run configuration, loaded from TOML, with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::DspConfig;
use crate::error::{HmicError, Result};
use crate::evaluation::DEFAULT_PAUC_P;
use crate::model::{Ablation, ModelConfig, TrainConfig};
use crate::scoring::{CovarianceMode, Shrinkage};

/// Environment variable naming the feature cache directory.
pub const CACHE_ENV: &str = "HMIC_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Attribute-group centres.
    #[default]
    Agc,
    /// Domain centres.
    Dc,
}

impl FromStr for ScoringMode {
    type Err = HmicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agc" => Ok(ScoringMode::Agc),
            "dc" => Ok(ScoringMode::Dc),
            other => Err(HmicError::Config(format!("unknown scoring mode `{other}`"))),
        }
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMode::Agc => "agc",
            ScoringMode::Dc => "dc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Corpus root; the manifest is `<corpus>/manifest.csv`.
    pub corpus: PathBuf,
    /// Synthetic corpus spec; the built-in default corpus when absent.
    pub synth_spec: Option<PathBuf>,
    /// Feature cache; `HMIC_CACHE_DIR` takes precedence.
    pub cache: Option<PathBuf>,
    pub checkpoint: PathBuf,
    /// Directory for per-machine training logs.
    pub train_logs: PathBuf,
    pub scores: PathBuf,
    /// Evaluation report; a CSV export is written next to it.
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        let root = PathBuf::from("hmic-run");
        PathsConfig {
            corpus: root.join("corpus"),
            synth_spec: None,
            cache: None,
            checkpoint: root.join("model.ckpt"),
            train_logs: root.join("logs"),
            scores: root.join("scores.csv"),
            report: root.join("report.json"),
        }
    }
}

impl PathsConfig {
    pub fn manifest(&self) -> PathBuf {
        self.corpus.join("manifest.csv")
    }

    /// Sidecar holding the provenance of a scores file.
    pub fn scores_meta(&self) -> PathBuf {
        self.scores.with_extension("meta.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.report.with_extension("csv")
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => self.cache.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub lambda: f64,
    /// λ per machine type, overriding `lambda`.
    pub lambda_per_machine: BTreeMap<String, f64>,
    pub backbone_channels: Vec<usize>,
    pub head_channels: usize,
    pub block_gain: f64,
    pub ablation: Ablation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            lambda: 0.5,
            lambda_per_machine: BTreeMap::new(),
            backbone_channels: vec![8, 16, 64],
            head_channels: 64,
            block_gain: 6f64.sqrt(),
            ablation: Ablation::Hmic,
        }
    }
}

/// Optimizer settings; the seed comes from [`RunConfig::seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_min: t.lr_min,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    pub mode: ScoringMode,
    pub covariance: CovarianceMode,
    pub shrinkage: Shrinkage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub pauc_p: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { pauc_p: DEFAULT_PAUC_P }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds training and, when no spec file is given, the default corpus.
    pub seed: u64,
    /// Worker threads for per-clip stages; all cores when absent.
    pub jobs: Option<usize>,
    pub paths: PathsConfig,
    pub dsp: DspConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub scoring: ScoringSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            jobs: None,
            paths: PathsConfig::default(),
            dsp: DspConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            scoring: ScoringSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub scoring: Option<ScoringMode>,
    pub ablation: Option<Ablation>,
    pub pauc_p: Option<f64>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HmicError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config is always representable as TOML")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(j) = o.jobs {
            self.jobs = Some(j);
        }
        if let Some(m) = o.scoring {
            self.scoring.mode = m;
        }
        if let Some(a) = o.ablation {
            self.model.ablation = a;
        }
        if let Some(p) = o.pauc_p {
            self.eval.pauc_p = p;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.train_config().validate()?;
        let lambdas = std::iter::once(&self.model.lambda).chain(self.model.lambda_per_machine.values());
        for l in lambdas {
            if !(0.0..=1.0).contains(l) {
                return Err(HmicError::Config(format!("lambda {l} outside [0, 1]")));
            }
        }
        if self.jobs == Some(0) {
            return Err(HmicError::Config("jobs must be at least 1".into()));
        }
        if !(self.eval.pauc_p > 0.0 && self.eval.pauc_p <= 1.0) {
            return Err(HmicError::Config(format!("pauc_p {} outside (0, 1]", self.eval.pauc_p)));
        }
        let m = &self.model;
        if m.backbone_channels.is_empty() || m.backbone_channels.contains(&0) || m.head_channels == 0 {
            return Err(HmicError::Config("model channel counts must be positive".into()));
        }
        if !(m.block_gain.is_finite() && m.block_gain > 0.0) {
            return Err(HmicError::Config("block_gain must be positive".into()));
        }
        if self.dsp.n_mels >> m.backbone_channels.len() == 0 {
            return Err(HmicError::Config(format!(
                "{} mel bands are too few for {} pooling blocks",
                self.dsp.n_mels,
                m.backbone_channels.len()
            )));
        }
        Ok(())
    }

    pub fn lambda_for(&self, machine_type: &str) -> f64 {
        self.model.lambda_per_machine.get(machine_type).copied().unwrap_or(self.model.lambda)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_min: t.lr_min,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, machine_type: &str, n_sections: usize, n_groups: usize, n_frames: usize) -> ModelConfig {
        ModelConfig {
            n_mels: self.dsp.n_mels,
            n_frames,
            backbone_channels: self.model.backbone_channels.clone(),
            head_channels: self.model.head_channels,
            block_gain: self.model.block_gain,
            n_sections,
            n_groups,
            lambda: self.lambda_for(machine_type),
            ablation: self.model.ablation,
        }
    }

    /// The settings that determine a checkpoint. Paths, worker count,
    /// scoring mode and pAUC range are excluded because they do not change
    /// trained parameters or fitted centres.
    pub fn training_view(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "dsp": self.dsp,
            "model": self.model,
            "train": self.train,
            "covariance": self.scoring.covariance,
            "shrinkage": self.scoring.shrinkage,
        })
    }

    pub fn digest(&self) -> [u8; 32] {
        let text = serde_json::to_string(&self.training_view()).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}
