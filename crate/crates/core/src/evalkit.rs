//! Detection quality: IoU, greedy matching, all-point interpolated AP, mAP
//! pooled over a split, and mAP-versus-budget robustness curves.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_perturbation, pgd_attack, AttackSpec, Channel, Perturbation};
use crate::detector::{decode, scale_rgb, Detection, Detector, ModelInputs, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH};
use crate::error::{Error, Result};
use crate::lidarmap::{lidar_input, DepthStats};
use crate::rng::split_mix;
use crate::scenegen::{CameraIntrinsics, Dataset, GtBox, ObjectClass, Scene};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

fn check_box(b: &[f32; 4]) -> Result<()> {
    if b[0] < b[2] && b[1] < b[3] && b.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::DegenerateBox(*b))
    }
}

/// Intersection over union, computed in f64.
pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let [a0, a1, a2, a3] = a.map(f64::from);
    let [b0, b1, b2, b3] = b.map(f64::from);
    let iw = (a2.min(b2) - a0.max(b0)).max(0.0);
    let ih = (a3.min(b3) - a1.max(b1)).max(0.0);
    let inter = iw * ih;
    let union = (a2 - a0) * (a3 - a1) + (b2 - b0) * (b3 - b1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Detections and ground truth of one scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneResult {
    pub dets: Vec<Detection>,
    pub gt: Vec<GtBox>,
}

/// AP of one class with its raw precision/recall sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub num_gt: usize,
    /// `(recall, precision)` after each detection, in score order.
    pub pr: Vec<(f64, f64)>,
}

/// Greedy matching and all-point AP for one class, detections pooled over
/// scenes. `None` when the class has no ground truth.
pub fn average_precision(scenes: &[SceneResult], class: ObjectClass, iou_thresh: f64) -> Option<ClassAp> {
    let num_gt: usize = scenes.iter().map(|s| s.gt.iter().filter(|g| g.class == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut pooled: Vec<(f32, usize, &Detection)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.dets.iter().filter(|d| d.class == class).map(move |d| (d.score, si, d)))
        .collect();
    // Stable: ties keep scene then detection order.
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut matched: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gt.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr = Vec::with_capacity(pooled.len());
    for &(_, si, d) in &pooled {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in scenes[si].gt.iter().enumerate() {
            if g.class != class || matched[si][gi] {
                continue;
            }
            let o = iou_unchecked(&d.bbox, &g.bbox);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[si][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        pr.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // Precision envelope from the right, then area over recall increments.
    let mut envelope: Vec<f64> = pr.iter().map(|&(_, p)| p).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in pr.iter().zip(&envelope) {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    Some(ClassAp { ap, num_gt, pr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Indexed by class; `None` for classes without ground truth.
    pub per_class: Vec<Option<ClassAp>>,
    pub map: f64,
}

impl ApResult {
    pub fn ap(&self, class: ObjectClass) -> Option<f64> {
        self.per_class[class.index()].as_ref().map(|c| c.ap)
    }
}

/// mAP over classes that have ground truth; 0 when no class does.
pub fn mean_ap(scenes: &[SceneResult], iou_thresh: f64) -> ApResult {
    let per_class: Vec<Option<ClassAp>> = ObjectClass::ALL
        .iter()
        .map(|&c| average_precision(scenes, c, iou_thresh))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().map(|c| c.ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApResult { per_class, map }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: DEFAULT_SCORE_THRESH,
            nms_iou: DEFAULT_NMS_IOU,
            match_iou: DEFAULT_MATCH_IOU,
        }
    }
}

/// What, if anything, perturbs each scene before inference.
#[derive(Debug, Clone, Copy)]
pub enum PerturbationSource<'a> {
    Clean,
    /// PGD against the evaluated model; scene `i` uses seed `split_mix(spec.seed, i)`.
    WhiteBox(&'a AttackSpec),
    /// PGD against another model, applied to the evaluated one.
    Transfer { source: &'a Detector, spec: &'a AttackSpec },
    /// `pert_<i>.bin` files in a directory.
    Stored(&'a Path),
}

fn scene_spec(spec: &AttackSpec, index: usize) -> AttackSpec {
    AttackSpec {
        seed: split_mix(spec.seed, index as u64),
        ..spec.clone()
    }
}

/// Name of the stored perturbation for scene `index`.
pub fn pert_file_name(index: usize) -> String {
    format!("pert_{index}.bin")
}

/// The perturbation `source` applies to scene `index`, or `None` for clean.
pub fn scene_perturbation(
    model: &Detector,
    scene: &Scene,
    index: usize,
    intr: &CameraIntrinsics,
    stats: &DepthStats,
    source: PerturbationSource,
) -> Result<Option<Perturbation>> {
    Ok(match source {
        PerturbationSource::Clean => None,
        PerturbationSource::WhiteBox(spec) => Some(pgd_attack(model, scene, intr, stats, &scene_spec(spec, index))?),
        PerturbationSource::Transfer { source, spec } => {
            Some(pgd_attack(source, scene, intr, stats, &scene_spec(spec, index))?)
        }
        PerturbationSource::Stored(dir) => Some(Perturbation::load(&dir.join(pert_file_name(index)), intr)?),
    })
}

/// Decoded detections on clean inputs.
pub fn detect_clean(
    model: &Detector,
    scene: &Scene,
    intr: &CameraIntrinsics,
    stats: &DepthStats,
    cfg: &EvalConfig,
) -> Result<Vec<Detection>> {
    let fusion = model.config.fusion;
    let rgb = fusion.uses_rgb().then(|| scale_rgb(&scene.rgb));
    let lidar = fusion.uses_lidar().then(|| lidar_input(&scene.cloud, intr, stats)).transpose()?;
    let raw = model.forward(ModelInputs {
        rgb: rgb.as_ref(),
        lidar: lidar.as_ref().map(|(t, _)| t),
    })?;
    Ok(decode(&raw, intr.height, intr.width, cfg.score_thresh, cfg.nms_iou))
}

/// Detections for every scene of `dataset` under `source`, in scene order.
pub fn detect_split(
    model: &Detector,
    dataset: &Dataset,
    stats: &DepthStats,
    source: PerturbationSource,
    cfg: &EvalConfig,
) -> Result<Vec<SceneResult>> {
    let intr = dataset.intrinsics();
    dataset
        .scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let dets = match scene_perturbation(model, scene, i, &intr, stats, source)? {
                None => detect_clean(model, scene, &intr, stats, cfg)?,
                Some(p) => {
                    let x = apply_perturbation(scene, &p, &intr, stats)?;
                    let raw = model.forward(x.model_inputs())?;
                    decode(&raw, intr.height, intr.width, cfg.score_thresh, cfg.nms_iou)
                }
            };
            Ok(SceneResult {
                dets,
                gt: scene.gt.clone(),
            })
        })
        .collect()
}

pub fn evaluate_map(
    model: &Detector,
    dataset: &Dataset,
    stats: &DepthStats,
    source: PerturbationSource,
    cfg: &EvalConfig,
) -> Result<ApResult> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    Ok(mean_ap(&detect_split(model, dataset, stats, source, cfg)?, cfg.match_iou))
}

/// Which budget a curve sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetAxis {
    /// ε, intensity units.
    Image,
    /// γ, meters.
    Lidar,
}

impl BudgetAxis {
    pub fn channel(self) -> Channel {
        match self {
            BudgetAxis::Image => Channel::Image,
            BudgetAxis::Lidar => Channel::Lidar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: f32,
    pub map: f64,
    pub ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub axis: BudgetAxis,
    pub attack: AttackSpec,
    pub model: String,
    pub points: Vec<CurvePoint>,
}

pub const CURVE_STEPS: usize = 10;

/// `base` with the swept budget set to `budget`, step `budget / 4`, ten
/// steps and no random start.
pub fn curve_spec(base: &AttackSpec, axis: BudgetAxis, budget: f32) -> AttackSpec {
    let mut spec = AttackSpec {
        steps: CURVE_STEPS,
        rand_init: false,
        ..base.clone()
    };
    match axis {
        BudgetAxis::Image => {
            spec.eps_image = budget;
            spec.image_step = Some(budget / 4.0);
        }
        BudgetAxis::Lidar => {
            spec.gamma_lidar = budget;
            spec.lidar_step = Some(budget / 4.0);
        }
    }
    spec
}

/// mAP at each budget; budget 0 is evaluated clean.
pub fn robustness_curve(
    model: &Detector,
    dataset: &Dataset,
    stats: &DepthStats,
    base: &AttackSpec,
    axis: BudgetAxis,
    budgets: &[f32],
    cfg: &EvalConfig,
) -> Result<RobustnessCurve> {
    base.validate()?;
    if !budgets.contains(&0.0) {
        return Err(Error::Config("curve budgets must include 0".into()));
    }
    if !base.attacks(axis.channel()) {
        return Err(Error::Config(format!("attack does not perturb the {axis:?} channel")));
    }
    let mut points = Vec::with_capacity(budgets.len());
    for (bi, &budget) in budgets.iter().enumerate() {
        let result = if budget == 0.0 {
            evaluate_map(model, dataset, stats, PerturbationSource::Clean, cfg)?
        } else {
            let mut spec = curve_spec(base, axis, budget);
            spec.seed = split_mix(base.seed, bi as u64);
            evaluate_map(model, dataset, stats, PerturbationSource::WhiteBox(&spec), cfg)?
        };
        points.push(CurvePoint {
            budget,
            map: result.map,
            ap: ObjectClass::ALL.iter().map(|&c| result.ap(c)).collect(),
        });
    }
    Ok(RobustnessCurve {
        axis,
        attack: base.clone(),
        model: model.config.fusion.name().to_string(),
        points,
    })
}

impl RobustnessCurve {
    /// `budget,map,ap_car,ap_pedestrian,ap_cyclist`; empty cells for classes
    /// without ground truth.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,map,ap_car,ap_pedestrian,ap_cyclist\n");
        for p in &self.points {
            write!(out, "{},{}", p.budget, p.map).unwrap();
            for ap in &p.ap {
                match ap {
                    Some(v) => write!(out, ",{v}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferPoint {
    pub budget: f32,
    /// Target mAP under perturbations crafted on the source.
    pub transfer_map: f64,
    /// Target mAP under its own white-box attack.
    pub whitebox_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCurve {
    pub axis: BudgetAxis,
    pub attack: AttackSpec,
    pub source: String,
    pub target: String,
    pub points: Vec<TransferPoint>,
}

/// Black-box transfer next to the target's own white-box attack, per budget.
/// Both columns use identical attack seeds, so `source == target` gives
/// identical columns.
#[allow(clippy::too_many_arguments)]
pub fn transfer_curve(
    source: &Detector,
    target: &Detector,
    dataset: &Dataset,
    stats: &DepthStats,
    base: &AttackSpec,
    axis: BudgetAxis,
    budgets: &[f32],
    cfg: &EvalConfig,
) -> Result<TransferCurve> {
    base.validate()?;
    let (s, t) = (&source.config, &target.config);
    if (s.image_height, s.image_width) != (t.image_height, t.image_width) {
        return Err(Error::Geometry(format!(
            "source model is {}×{}, target {}×{}",
            s.image_height, s.image_width, t.image_height, t.image_width
        )));
    }
    let mut points = Vec::with_capacity(budgets.len());
    for (bi, &budget) in budgets.iter().enumerate() {
        let (transfer_map, whitebox_map) = if budget == 0.0 {
            let clean = evaluate_map(target, dataset, stats, PerturbationSource::Clean, cfg)?.map;
            (clean, clean)
        } else {
            let mut spec = curve_spec(base, axis, budget);
            spec.seed = split_mix(base.seed, bi as u64);
            let tr = evaluate_map(target, dataset, stats, PerturbationSource::Transfer { source, spec: &spec }, cfg)?;
            let wb = evaluate_map(target, dataset, stats, PerturbationSource::WhiteBox(&spec), cfg)?;
            (tr.map, wb.map)
        };
        points.push(TransferPoint {
            budget,
            transfer_map,
            whitebox_map,
        });
    }
    Ok(TransferCurve {
        axis,
        attack: base.clone(),
        source: s.fusion.name().to_string(),
        target: t.fusion.name().to_string(),
        points,
    })
}

impl TransferCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,transfer_map,whitebox_map\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.budget, p.transfer_map, p.whitebox_map).unwrap();
        }
        out
    }
}
