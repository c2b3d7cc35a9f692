//! The experiment document: one JSON file with dataset, model, train, attack
//! and eval sections. Every field except the master seed has a default.

use std::path::Path;

use anyhow::Context;
use fuselab_core::advtrain::{AT_EPOCHS, CLEAN_EPOCHS};
use fuselab_core::rng::named_seed;
use fuselab_core::{
    AtVariant, AttackSpec, BudgetAxis, CameraIntrinsics, Channel, DetectorConfig, EvalConfig, FusionMode, LrSchedule,
    MaskMode, SceneSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const SEED_ENV: &str = "FUSELAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: DetectorConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_count: usize,
    pub val_count: usize,
    pub intrinsics: CameraIntrinsics,
    pub scene: SceneSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            train_count: 400,
            val_count: 100,
            intrinsics: CameraIntrinsics::default(),
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Defaults to 60 for clean training and 40 for adversarial fine-tuning.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// Defaults to cosine 0.05 → 0.01 for clean training and a cyclic
    /// schedule peaking at 1e-3 for adversarial training.
    pub schedule: Option<LrSchedule>,
    pub at_variant: AtVariant,
    pub eps_image: f32,
    pub gamma_lidar: f32,
    pub max_grad_norm: Option<f32>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: None,
            batch_size: t.batch_size,
            schedule: None,
            at_variant: t.at_variant,
            eps_image: t.eps_image,
            gamma_lidar: t.gamma_lidar,
            max_grad_norm: t.max_grad_norm,
        }
    }
}

/// Named threat models: which channels, which mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    FullImage,
    CarImage,
    FullLidar,
    CarLidar,
    FullJoint,
    CarJoint,
}

impl AttackKind {
    pub fn channels(self) -> &'static [Channel] {
        match self {
            AttackKind::FullImage | AttackKind::CarImage => &[Channel::Image],
            AttackKind::FullLidar | AttackKind::CarLidar => &[Channel::Lidar],
            AttackKind::FullJoint | AttackKind::CarJoint => &[Channel::Image, Channel::Lidar],
        }
    }

    pub fn mask(self) -> MaskMode {
        match self {
            AttackKind::FullImage | AttackKind::FullLidar | AttackKind::FullJoint => MaskMode::Full,
            _ => MaskMode::CarBoxes,
        }
    }

    /// Budget swept by curves: LiDAR for LiDAR-only attacks, image otherwise.
    pub fn axis(self) -> BudgetAxis {
        match self {
            AttackKind::FullLidar | AttackKind::CarLidar => BudgetAxis::Lidar,
            _ => BudgetAxis::Image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub eps_image: f32,
    pub gamma_lidar: f32,
    pub steps: usize,
    pub rand_init: bool,
    pub image_budgets: Vec<f32>,
    pub lidar_budgets: Vec<f32>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: AttackKind::FullImage,
            eps_image: 2.0,
            gamma_lidar: 0.3,
            steps: 10,
            rand_init: false,
            image_budgets: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            lidar_budgets: vec![0.0, 0.1, 0.2, 0.3, 0.5],
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; `FUSELAB_SEED` overrides the seed.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| {
            UsageError(format!(
                "{}: invalid config at line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| UsageError(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.dataset.intrinsics.validate()?;
        self.dataset.scene.validate()?;
        self.model.validate()?;
        let intr = &self.dataset.intrinsics;
        if intr.height != self.model.image_height || intr.width != self.model.image_width {
            return Err(UsageError(format!(
                "model input {}×{} does not match the camera {}×{}",
                self.model.image_height, self.model.image_width, intr.height, intr.width
            ))
            .into());
        }
        self.train_config().validate(self.model.fusion)?;
        self.attack_spec(self.attack.kind).validate()?;
        for b in self.attack.image_budgets.iter().chain(&self.attack.lidar_budgets) {
            if !(*b >= 0.0 && b.is_finite()) {
                return Err(UsageError(format!("budget {b} must be finite and non-negative")).into());
            }
        }
        Ok(())
    }

    pub fn with_fusion(mut self, fusion: Option<FusionMode>) -> Self {
        if let Some(f) = fusion {
            self.model.fusion = f;
        }
        self
    }

    pub fn train_seed(&self) -> u64 {
        named_seed(self.seed, "train")
    }

    pub fn data_seed(&self, split: fuselab_core::Split) -> u64 {
        named_seed(self.seed, split.name())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let (epochs, schedule) = match t.at_variant {
            AtVariant::None => (CLEAN_EPOCHS, LrSchedule::CLEAN),
            _ => (AT_EPOCHS, LrSchedule::ADVERSARIAL),
        };
        TrainConfig {
            epochs: t.epochs.unwrap_or(epochs),
            schedule: t.schedule.unwrap_or(schedule),
            batch_size: t.batch_size,
            at_variant: t.at_variant,
            eps_image: t.eps_image,
            gamma_lidar: t.gamma_lidar,
            max_grad_norm: t.max_grad_norm,
            seed: self.train_seed(),
        }
    }

    pub fn attack_spec(&self, kind: AttackKind) -> AttackSpec {
        let a = &self.attack;
        AttackSpec {
            channels: kind.channels().to_vec(),
            eps_image: a.eps_image,
            gamma_lidar: a.gamma_lidar,
            steps: a.steps,
            image_step: None,
            lidar_step: None,
            mask: kind.mask(),
            rand_init: a.rand_init,
            seed: named_seed(self.seed, "attack"),
        }
    }

    pub fn budgets(&self, axis: BudgetAxis) -> &[f32] {
        match axis {
            BudgetAxis::Image => &self.attack.image_budgets,
            BudgetAxis::Lidar => &self.attack.lidar_budgets,
        }
    }
}
