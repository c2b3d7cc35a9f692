//! Clean and adversarial training.
//!
//! Adversarial variants replace every training scene by its FGSM-RS
//! perturbation (random start in the feasible box, one sign step of the full
//! budget) against the current parameters, then take an ordinary SGD step
//! on the perturbed inputs. Per-scene work in a batch runs in parallel; the
//! gradient reduction is sequential in batch order, so runs are bit-exact.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_perturbation, pgd_attack, AttackSpec, Channel, MaskMode, Perturbation};
use crate::detector::{
    assign_targets, detection_loss, scale_rgb, Detector, DetectorConfig, FusionMode, GradRequest, LossParts, ModelInputs,
};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_map, EvalConfig, PerturbationSource};
use crate::lidarmap::{lidar_input, DepthStats};
use crate::ndlab::Tensor;
use crate::rng::{named_rng, named_seed, split_mix};
use crate::scenegen::{Dataset, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    /// `start·(1 + cos(π·t/T))/2`, floored at `end`.
    Cosine { start: f64, end: f64 },
    /// Linear ramp 0 → `max_lr` over the first `peak_fraction` of the steps, then back to 0.
    Cyclic { max_lr: f64, peak_fraction: f64 },
}

impl LrSchedule {
    pub const CLEAN: LrSchedule = LrSchedule::Cosine { start: 0.05, end: 0.01 };
    pub const ADVERSARIAL: LrSchedule = LrSchedule::Cyclic {
        max_lr: 1e-3,
        peak_fraction: 0.4,
    };

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Cosine { start, end } if start.is_finite() && end.is_finite() && start >= 0.0 && end >= 0.0 => Ok(()),
            LrSchedule::Cyclic { max_lr, peak_fraction }
                if max_lr.is_finite() && max_lr >= 0.0 && peak_fraction > 0.0 && peak_fraction < 1.0 =>
            {
                Ok(())
            }
            _ => Err(Error::Config(format!("invalid learning-rate schedule {self:?}"))),
        }
    }
}

/// Learning rate at `step` of `total`.
pub fn lr_at(step: usize, total: usize, schedule: &LrSchedule) -> f64 {
    let (t, n) = (step as f64, total.max(1) as f64);
    match *schedule {
        LrSchedule::Cosine { start, end } => (start * (1.0 + (std::f64::consts::PI * t / n).cos()) / 2.0).max(end),
        LrSchedule::Cyclic { max_lr, peak_fraction } => {
            let peak = peak_fraction * n;
            if t <= peak {
                max_lr * t / peak
            } else {
                max_lr * (n - t) / (n - peak)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AtVariant {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "at-image")]
    Image,
    #[serde(rename = "at-car")]
    Car,
    #[serde(rename = "at-lidar")]
    Lidar,
    #[serde(rename = "at-lidar-car")]
    LidarCar,
    #[serde(rename = "at-joint")]
    Joint,
    #[serde(rename = "at-joint-car")]
    JointCar,
}

impl AtVariant {
    pub fn channels(self) -> &'static [Channel] {
        match self {
            AtVariant::None => &[],
            AtVariant::Image | AtVariant::Car => &[Channel::Image],
            AtVariant::Lidar | AtVariant::LidarCar => &[Channel::Lidar],
            AtVariant::Joint | AtVariant::JointCar => &[Channel::Image, Channel::Lidar],
        }
    }

    pub fn mask(self) -> MaskMode {
        match self {
            AtVariant::Car | AtVariant::LidarCar | AtVariant::JointCar => MaskMode::CarBoxes,
            _ => MaskMode::Full,
        }
    }

    /// Every attacked channel must feed the model.
    pub fn check_compatible(self, fusion: FusionMode) -> Result<()> {
        for &c in self.channels() {
            let fed = match c {
                Channel::Image => fusion.uses_rgb(),
                Channel::Lidar => fusion.uses_lidar(),
            };
            if !fed {
                return Err(Error::Config(format!(
                    "{self:?} adversarial training perturbs the {c:?} channel, which a {} model does not read",
                    fusion.name()
                )));
            }
        }
        Ok(())
    }

    /// Single-step random-start attack spec for this variant.
    pub fn inner_spec(self, eps_image: f32, gamma_lidar: f32, seed: u64) -> AttackSpec {
        AttackSpec {
            channels: self.channels().to_vec(),
            eps_image,
            gamma_lidar,
            steps: 1,
            image_step: Some(eps_image),
            lidar_step: Some(gamma_lidar),
            mask: self.mask(),
            rand_init: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub at_variant: AtVariant,
    pub eps_image: f32,
    pub gamma_lidar: f32,
    /// Rescale the batch gradient to this global L2 norm when it is larger.
    /// Early steps occasionally spike and would otherwise diverge.
    pub max_grad_norm: Option<f32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: CLEAN_EPOCHS,
            batch_size: 8,
            schedule: LrSchedule::CLEAN,
            at_variant: AtVariant::None,
            eps_image: 2.0,
            gamma_lidar: 0.3,
            max_grad_norm: Some(MAX_GRAD_NORM),
            seed: 0,
        }
    }
}

pub const MAX_GRAD_NORM: f32 = 10.0;

/// Epochs of clean training from scratch.
pub const CLEAN_EPOCHS: usize = 60;
/// Epochs of adversarial fine-tuning.
pub const AT_EPOCHS: usize = 40;

impl TrainConfig {
    /// Adversarial fine-tuning defaults for `variant`.
    pub fn adversarial(variant: AtVariant, seed: u64) -> Self {
        Self {
            epochs: AT_EPOCHS,
            schedule: LrSchedule::ADVERSARIAL,
            at_variant: variant,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, fusion: FusionMode) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.eps_image >= 0.0 && self.gamma_lidar >= 0.0) {
            return Err(Error::Config("AT budgets must be non-negative".into()));
        }
        if self.max_grad_norm.is_some_and(|m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::Config("max_grad_norm must be positive and finite".into()));
        }
        self.schedule.validate()?;
        self.at_variant.check_compatible(fusion)
    }
}

/// FGSM-RS perturbation of one scene against the current model.
pub fn at_inner(
    model: &Detector,
    scene: &Scene,
    stats: &DepthStats,
    intr: &crate::scenegen::CameraIntrinsics,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Perturbation> {
    if cfg.at_variant == AtVariant::None {
        return Err(Error::Config("at_inner needs an adversarial variant".into()));
    }
    let spec = cfg.at_variant.inner_spec(cfg.eps_image, cfg.gamma_lidar, seed);
    pgd_attack(model, scene, intr, stats, &spec)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub objectness: f64,
    pub class: f64,
    pub regression: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub lr_trace: Vec<f64>,
    pub val_map: Option<f64>,
    pub wall_time_s: f64,
    /// Objects that lost their grid cell, summed over all visited scenes.
    pub dropped_objects: usize,
}

/// Network inputs cached for clean scenes.
struct Cached {
    rgb: Option<Tensor>,
    lidar: Option<Tensor>,
}

struct SceneGrad {
    grads: Vec<Vec<f32>>,
    loss: LossParts,
    dropped: usize,
}

pub struct Trainer<'a> {
    pub model: Detector,
    pub config: TrainConfig,
    dataset: &'a Dataset,
    stats: DepthStats,
    cache: Vec<Cached>,
}

impl<'a> Trainer<'a> {
    /// Fresh model initialized from the training seed.
    pub fn new(model_config: DetectorConfig, dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let model = Detector::init(model_config, named_seed(config.seed, "init"))?;
        Self::from_model(model, dataset, config)
    }

    /// Continues from existing parameters.
    pub fn from_model(model: Detector, dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate(model.config.fusion)?;
        let intr = dataset.intrinsics();
        if model.config.image_height != intr.height || model.config.image_width != intr.width {
            return Err(Error::Geometry("model and dataset image sizes differ".into()));
        }
        let stats = dataset
            .manifest
            .stats
            .ok_or_else(|| Error::Config("training split has no depth statistics".into()))?;
        let fusion = model.config.fusion;
        let cache = dataset
            .scenes
            .par_iter()
            .map(|s| {
                Ok(Cached {
                    rgb: fusion.uses_rgb().then(|| scale_rgb(&s.rgb)),
                    lidar: fusion
                        .uses_lidar()
                        .then(|| lidar_input(&s.cloud, &intr, &stats).map(|(t, _)| t))
                        .transpose()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            config,
            dataset,
            stats,
            cache,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.config.batch_size)
    }

    fn scene_grad(&self, index: usize, at_seed: u64) -> Result<SceneGrad> {
        let scene = &self.dataset.scenes[index];
        let intr = self.dataset.intrinsics();
        let perturbed = if self.config.at_variant == AtVariant::None {
            None
        } else {
            let p = at_inner(&self.model, scene, &self.stats, &intr, &self.config, at_seed)?;
            Some(apply_perturbation(scene, &p, &intr, &self.stats)?)
        };
        let inputs = match &perturbed {
            Some(x) => x.model_inputs(),
            None => ModelInputs {
                rgb: self.cache[index].rgb.as_ref(),
                lidar: self.cache[index].lidar.as_ref(),
            },
        };
        let mut tape = crate::ndlab::Tape::new();
        let graph = self.model.graph(
            &mut tape,
            inputs,
            GradRequest {
                params: true,
                ..GradRequest::default()
            },
        )?;
        let targets = assign_targets(&scene.gt, intr.height, intr.width);
        let loss = detection_loss(&mut tape, graph.pred, &targets)?;
        let grads = tape.backward(loss.total)?;
        Ok(SceneGrad {
            grads: graph.params.iter().map(|&v| grads.get(v).into_data()).collect(),
            loss: loss.values(&tape),
            dropped: targets.dropped,
        })
    }

    /// Runs every epoch; `on_epoch` sees each epoch's mean losses.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainReport> {
        let start = Instant::now();
        let n = self.dataset.len();
        let steps = self.steps_per_epoch();
        let total_steps = self.config.epochs * steps;
        let mut report = TrainReport {
            epochs: Vec::with_capacity(self.config.epochs),
            lr_trace: Vec::with_capacity(total_steps),
            val_map: None,
            wall_time_s: 0.0,
            dropped_objects: 0,
        };
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..self.config.epochs {
            let mut rng = named_rng(split_mix(self.config.seed, epoch as u64), "shuffle");
            order.sort_unstable();
            order.shuffle(&mut rng);
            let mut sums = [0.0f64; 4];
            for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
                let global = epoch * steps + b;
                let at_base = split_mix(named_seed(self.config.seed, "at"), global as u64);
                let results: Vec<SceneGrad> = batch
                    .par_iter()
                    .map(|&i| self.scene_grad(i, split_mix(at_base, i as u64)))
                    .collect::<Result<_>>()
                    .map_err(|e| diverged(e, epoch, b))?;
                let scale = 1.0 / batch.len() as f32;
                for r in &results {
                    let l = r.loss;
                    if !l.total.is_finite() {
                        return Err(Error::Diverged {
                            epoch,
                            step: b,
                            detail: format!("loss {l:?}"),
                        });
                    }
                    sums[0] += l.total as f64;
                    sums[1] += l.objectness as f64;
                    sums[2] += l.class as f64;
                    sums[3] += l.regression as f64;
                    report.dropped_objects += r.dropped;
                    self.model.params.accumulate_flat(&r.grads, scale);
                }
                if !self.model.params.grads_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: b,
                        detail: "non-finite gradient".into(),
                    });
                }
                let lr = lr_at(global, total_steps, &self.config.schedule);
                if let Some(max) = self.config.max_grad_norm {
                    let norm = self.model.params.grad_norm();
                    if norm > max as f64 {
                        self.model.params.scale_grads((max as f64 / norm) as f32);
                    }
                }
                report.lr_trace.push(lr);
                self.model.params.sgd_step(lr as f32);
            }
            let denom = n.max(1) as f64;
            let stats = EpochStats {
                epoch,
                total: sums[0] / denom,
                objectness: sums[1] / denom,
                class: sums[2] / denom,
                regression: sums[3] / denom,
            };
            on_epoch(&stats);
            report.epochs.push(stats);
        }
        report.wall_time_s = start.elapsed().as_secs_f64();
        Ok(report)
    }

    pub fn stats(&self) -> DepthStats {
        self.stats
    }
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged { epoch, step, detail },
        other => other,
    }
}

/// Trains from scratch and, given a validation split, reports its clean mAP.
pub fn train(
    model_config: DetectorConfig,
    dataset: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(Detector, TrainReport)> {
    let mut trainer = Trainer::new(model_config, dataset, config.clone())?;
    let mut report = trainer.run(on_epoch)?;
    if let Some(val) = val {
        let r = evaluate_map(&trainer.model, val, &trainer.stats, PerturbationSource::Clean, &EvalConfig::default())?;
        report.val_map = Some(r.map);
    }
    Ok((trainer.model, report))
}
