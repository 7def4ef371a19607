use std::fs;
use std::path::{Path, PathBuf};

use mscl_segment::SegmenterConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::objectives::LabelMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Disease topics `n`.
    pub topics: usize,
    /// Finding states `k` per topic.
    pub states: usize,
    pub d_model: usize,
    pub visual_dim: usize,
    /// Taken from the vocabulary when zero.
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub proj_dim: usize,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            topics: 6,
            states: 4,
            d_model: 256,
            visual_dim: 128,
            vocab_size: 0,
            encoder_layers: 1,
            decoder_layers: 3,
            heads: 4,
            ffn_dim: 512,
            max_len: 64,
            patch_size: 8,
            image_size: 64,
            proj_dim: 128,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        for (name, v) in [
            ("topics", self.topics),
            ("d_model", self.d_model),
            ("visual_dim", self.visual_dim),
            ("vocab_size", self.vocab_size),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be positive"));
            }
        }
        if self.states < 2 {
            return bad(format!("model.states must be at least 2, got {}", self.states));
        }
        if self.states > 4 {
            return bad(format!("model.states must be at most 4, got {}", self.states));
        }
        if self.topics > 63 {
            return bad(format!("model.topics must be at most 63, got {}", self.topics));
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.visual_dim % self.patches() != 0 {
            return bad(format!(
                "visual_dim {} is not a multiple of the {} patches per image",
                self.visual_dim,
                self.patches()
            ));
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no room beyond the specials", self.vocab_size));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Feature channels contributed by each patch.
    pub fn patch_channels(&self) -> usize {
        self.visual_dim / self.patches()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub theta: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_mode: LabelMode,
    /// Use only the first view of every study.
    pub single_view: bool,
    /// Feed raw images, bypassing the segmenter.
    pub no_sam: bool,
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            theta: 2.0,
            tau: 0.5,
            lr: 3e-4,
            weight_decay: 0.02,
            batch_size: 8,
            epochs: 30,
            label_mode: LabelMode::ExactSet,
            single_view: false,
            no_sam: false,
            min_freq: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("train.lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return bad(format!("train.theta {} must be a finite nonnegative number", self.theta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("train.tau {} must be positive", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("train.weight_decay {} must be nonnegative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.min_freq == 0 {
            return bad("train.min_freq must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Builtin,
    ProposalsDir,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset manifest (JSONL).
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Directory of `<image-id>.json` manifests for the proposals-dir backend.
    pub proposals_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: BackendKind,
    pub model: ModelConfig,
    pub segmenter: SegmenterConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks everything except `model.vocab_size`, which is only known once
    /// the vocabulary has been built.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 5;
        }
        model.validate()?;
        self.segmenter.validate()?;
        self.train.validate()?;
        if self.backend == BackendKind::ProposalsDir && self.paths.proposals_dir.is_none() {
            return Err(CoreError::Config(
                "backend `proposals-dir` needs paths.proposals_dir".into(),
            ));
        }
        Ok(())
    }
}
