//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramNormalization;
use crate::coattention::HeadConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::harness::cv::CvStrategy;
use crate::pretrain::{ContinuousTargetConfig, CtcConfig, GumbelSchedule};

pub const CACHE_ENV: &str = "MFAS_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Continuous,
    Quantized,
    Ctc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub cv: CvStrategy,
    /// Fold whose held-out records every stage keeps out of training.
    pub fold: usize,
    pub val_fraction: f64,
    pub segment_seconds: f64,
    pub normalization: SpectrogramNormalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            cache_dir: None,
            cv: CvStrategy::LeaveOneSession,
            fold: 0,
            val_fraction: 0.2,
            segment_seconds: 3.0,
            normalization: SpectrogramNormalization::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub optim: OptimConfig,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub n_books: usize,
    pub n_words: usize,
    pub n_negatives: usize,
    pub diversity_weight: f64,
    pub gumbel: GumbelSchedule,
    pub continuous: ContinuousTargetConfig,
    pub ctc: CtcConfig,
    /// Starting weights (required for CTC fine-tuning).
    pub init: Option<PathBuf>,
    pub output: PathBuf,
    /// Train the detached emotion probe alongside.
    pub probe: bool,
    pub probe_optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Continuous,
            optim: OptimConfig::default(),
            mask_prob: 0.065,
            mask_span: 10,
            n_books: 2,
            n_words: 8,
            n_negatives: 10,
            diversity_weight: 0.1,
            gumbel: GumbelSchedule::default(),
            continuous: ContinuousTargetConfig::default(),
            ctc: CtcConfig::default(),
            init: None,
            output: PathBuf::from("encoder.safetensors"),
            probe: false,
            probe_optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Continuous-objective extractor for the speech taps.
    pub speech_checkpoint: PathBuf,
    /// Quantized/CTC extractor whose last layer gives the text stream.
    pub text_checkpoint: PathBuf,
    pub optim: OptimConfig,
    pub alpha_lr: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            speech_checkpoint: PathBuf::from("speech.safetensors"),
            text_checkpoint: PathBuf::from("text.safetensors"),
            optim: OptimConfig::default(),
            alpha_lr: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeriveConfig {
    pub optim: OptimConfig,
    /// Folds to retrain and evaluate; empty means every fold.
    pub folds: Vec<usize>,
}

impl Default for DeriveConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            folds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub fusion: FusionConfig,
    pub pretrain: PretrainConfig,
    pub search: SearchConfig,
    pub derive: DeriveConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            encoder: EncoderConfig::desk(),
            head: HeadConfig::default(),
            fusion: FusionConfig::default(),
            pretrain: PretrainConfig::default(),
            search: SearchConfig::default(),
            derive: DeriveConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.manifest);
        if let Some(c) = self.data.cache_dir.as_mut() {
            fix(c);
        }
        fix(&mut self.pretrain.output);
        if let Some(i) = self.pretrain.init.as_mut() {
            fix(i);
        }
        fix(&mut self.search.speech_checkpoint);
        fix(&mut self.search.text_checkpoint);
    }

    /// Cache directory from the config, else from the environment.
    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.data
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        for o in [&self.pretrain.optim, &self.pretrain.probe_optim, &self.search.optim, &self.derive.optim] {
            if o.batch_size == 0 || !(o.lr > 0.0) {
                return Err(Error::config("batch_size and lr must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        if !(self.search.alpha_lr > 0.0) {
            return Err(Error::config("alpha_lr must be positive"));
        }
        if self.fusion.attention_heads == 0 || self.encoder.model_dim % self.fusion.attention_heads != 0 {
            return Err(Error::config("attention_heads must divide model_dim"));
        }
        Ok(())
    }

    /// Settings that train in minutes on the synthetic corpus. Learning rates
    /// are raised from the full-scale defaults.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        let fast = |lr: f64, epochs: usize| OptimConfig {
            lr,
            weight_decay: 0.01,
            batch_size: 8,
            epochs,
        };
        cfg.pretrain.optim = fast(1e-3, 3);
        cfg.pretrain.probe_optim = fast(1e-3, 3);
        cfg.search.optim = fast(1e-3, 6);
        cfg.derive.optim = fast(1e-3, 10);
        cfg
    }
}
