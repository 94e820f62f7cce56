//! Run configuration: a TOML file with one table per module.
//!
//! ```toml
//! [backbone]
//! image_size = 64
//!
//! [sp]
//! enabled = true
//! k = 5
//! stages = [1]
//!
//! [mpfa]
//! m = 3
//! ```
//!
//! Every key has a default; `afr print-config` dumps the resolved file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneSource};
use crate::error::{AfrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpConfig {
    pub enabled: bool,
    /// Number of prompt tokens (and CNN adapters).
    pub k: usize,
    /// 1-based stages whose layers receive the prompt tokens.
    pub stages: Vec<usize>,
    /// Include the image-specific CNN prompts.
    pub use_pv: bool,
    /// Include the shared learnable prompts.
    pub use_pl: bool,
}

impl Default for SpConfig {
    fn default() -> Self {
        SpConfig {
            enabled: true,
            k: 5,
            stages: vec![1],
            use_pv: true,
            use_pl: true,
        }
    }
}

impl SpConfig {
    /// Whether any prompt tokens are injected at all.
    pub fn active(&self) -> bool {
        self.enabled && (self.use_pv || self.use_pl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpfaConfig {
    pub enabled: bool,
    /// Odd window side.
    pub m: usize,
}

impl Default for MpfaConfig {
    fn default() -> Self {
        MpfaConfig { enabled: true, m: 3 }
    }
}

impl MpfaConfig {
    /// Window actually applied; disabling is the same as `m = 1`.
    pub fn effective_m(&self) -> usize {
        if self.enabled {
            self.m
        } else {
            1
        }
    }
}

/// What patch scoring compares against the prototypes when rectification is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmfrFallback {
    /// Adapted visual tokens directly (image-text scoring).
    Visual,
    /// The un-rectified stateless embedding for every token.
    Stateless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmfrConfig {
    pub enabled: bool,
    pub fallback: CmfrFallback,
    /// Apply the sigmoid after the final linear map, bounding the gates to (0, 1).
    pub bounded_gate: bool,
    /// Reserved; the text-side gate is computed but never consumed.
    pub use_mt: bool,
    /// Bottleneck width; 0 means half the embedding width.
    pub hidden: usize,
}

impl Default for CmfrConfig {
    fn default() -> Self {
        CmfrConfig {
            enabled: true,
            fallback: CmfrFallback::Visual,
            bounded_gate: false,
            use_mt: false,
            hidden: 0,
        }
    }
}

impl CmfrConfig {
    pub fn hidden_width(&self, dim: usize) -> usize {
        if self.hidden == 0 {
            (dim / 2).max(1)
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub temperature: f64,
    /// Average the class-token probability over all four stages instead of
    /// using the last one.
    pub average_image_stages: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            temperature: 1.0,
            average_image_stages: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub normal: String,
    pub abnormal: String,
    pub stateless: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            normal: "a photo of a normal {c}".into(),
            abnormal: "a photo of a defective {c}".into(),
            stateless: "a photo of a {c}".into(),
        }
    }
}

/// Everything that changes the forward pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub prompts: PromptConfig,
    pub sp: SpConfig,
    pub mpfa: MpfaConfig,
    pub cmfr: CmfrConfig,
    pub score: ScoreConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let fail = |m: String| Err(AfrError::Config(m));
        let n_tokens = self.backbone.num_tokens();
        if self.sp.k == 0 || self.sp.k >= n_tokens {
            return fail(format!("sp.k must be in 1..{n_tokens}, got {}", self.sp.k));
        }
        if self.sp.stages.is_empty() || self.sp.stages.iter().any(|&s| s == 0 || s > self.backbone.stages) {
            return fail(format!("sp.stages must name stages 1..={}", self.backbone.stages));
        }
        let side = self.backbone.grid_side();
        if self.mpfa.m % 2 == 0 || self.mpfa.m > side {
            return fail(format!("mpfa.m must be odd and at most {side}, got {}", self.mpfa.m));
        }
        if self.cmfr.use_mt {
            return fail("cmfr.use_mt is reserved and cannot be enabled".into());
        }
        if !(self.score.temperature > 0.0 && self.score.temperature.is_finite()) {
            return fail("score.temperature must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    /// Share of the auxiliary data held out for best-checkpoint selection.
    pub validation_fraction: f64,
    /// Write a checkpoint every this many epochs; 0 keeps only `last` and `best`.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            lr0: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            focal_weight: 1.0,
            dice_weight: 1.0,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            validation_fraction: 0.1,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AfrError::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(AfrError::Config("train.lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(AfrError::Config("train.validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Folder,
    /// A manifest file (`root`); records may lack masks. Relative paths are
    /// resolved against the manifest's directory.
    Manifest,
}

/// One dataset: either generated procedurally or read from an MVTec-style tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Identifier used by the cross-dataset check; folder datasets default to
    /// the root directory name.
    pub id: String,
    pub root: PathBuf,
    /// Split directory for folder datasets.
    pub split: String,
    /// Synthetic texture classes.
    pub classes: Vec<String>,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            id: String::new(),
            root: PathBuf::new(),
            split: "test".into(),
            classes: Vec::new(),
            per_class: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetSpec,
    pub test: DatasetSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: DatasetSpec {
                id: "synthetic-a".into(),
                classes: vec!["stripes".into(), "checker".into()],
                ..DatasetSpec::default()
            },
            test: DatasetSpec {
                id: "synthetic-b".into(),
                classes: vec!["blobs".into(), "rings".into()],
                ..DatasetSpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelMode {
    /// One score vector over every pixel of the dataset.
    Global,
    /// Mean of per-image values over images with defects.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub pixel_mode: PixelMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            pixel_mode: PixelMode::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `surrogate`, `surrogate:<seed>` or `file:<dir>`.
    pub backbone_source: String,
    /// Seed for adapter initialization.
    pub seed: u64,
    /// Parallel inference workers; 0 uses every CPU.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub prompts: PromptConfig,
    pub sp: SpConfig,
    pub mpfa: MpfaConfig,
    pub cmfr: CmfrConfig,
    pub score: ScoreConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone_source: "surrogate".into(),
            seed: 0,
            workers: 0,
            out_dir: PathBuf::from("afr-out"),
            backbone: BackboneConfig::default(),
            prompts: PromptConfig::default(),
            sp: SpConfig::default(),
            mpfa: MpfaConfig::default(),
            cmfr: CmfrConfig::default(),
            score: ScoreConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    /// The small-data preset: surrogate backbone, synthetic classes, a larger
    /// step size, every training sample used for fitting, and the image score
    /// averaged over stages.
    pub fn desk_scale() -> Self {
        let mut cfg = RunConfig::default();
        cfg.train.lr0 = 0.01;
        cfg.train.validation_fraction = 0.0;
        cfg.train.checkpoint_every = 0;
        cfg.score.average_image_stages = true;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AfrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AfrError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            prompts: self.prompts.clone(),
            sp: self.sp.clone(),
            mpfa: self.mpfa.clone(),
            cmfr: self.cmfr.clone(),
            score: self.score.clone(),
        }
    }

    pub fn set_model(&mut self, m: ModelConfig) {
        self.backbone = m.backbone;
        self.prompts = m.prompts;
        self.sp = m.sp;
        self.mpfa = m.mpfa;
        self.cmfr = m.cmfr;
        self.score = m.score;
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.backbone()?;
        Ok(())
    }

    pub fn backbone(&self) -> Result<BackboneSource> {
        self.backbone_source.parse()
    }
}
