//! Masked multi-sensor L∞ attacks.
//!
//! A perturbation has one component per sensor: an additive image offset in
//! intensity units and a per-point 3D displacement in meters. Each attacked
//! channel `i` is bounded by its own budget and confined to its mask `mᵢ`;
//! channels outside the attacked set stay exactly zero. PGD ascends the
//! box-regression loss with sign steps and projects back after every step.
//! LiDAR gradients flow through re-densified maps with the nearest-point
//! assignment frozen for the backward pass.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{assign_targets, regression_loss, scale_rgb, Detection, Detector, GradRequest, ModelInputs};
use crate::error::{Error, Result};
use crate::lidarmap::{lidar_input, maps_backward, normalize_backward, DepthMaps, DepthStats};
use crate::ndlab::{Tape, Tensor};
use crate::rng::rng_from;
use crate::scenegen::{CameraIntrinsics, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Image,
    Lidar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Full,
    CarBoxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub channels: Vec<Channel>,
    /// Image budget in intensity units.
    pub eps_image: f32,
    /// LiDAR budget in meters, per coordinate.
    pub gamma_lidar: f32,
    pub steps: usize,
    /// Defaults to `eps_image / 4`.
    #[serde(default)]
    pub image_step: Option<f32>,
    /// Defaults to `gamma_lidar / 4`.
    #[serde(default)]
    pub lidar_step: Option<f32>,
    pub mask: MaskMode,
    #[serde(default)]
    pub rand_init: bool,
    /// Seeds the random start.
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_EPS_IMAGE: f32 = 2.0;
pub const DEFAULT_GAMMA_LIDAR: f32 = 0.3;
pub const DEFAULT_STEPS: usize = 10;

impl AttackSpec {
    pub fn new(channels: &[Channel], mask: MaskMode) -> Self {
        Self {
            channels: channels.to_vec(),
            eps_image: DEFAULT_EPS_IMAGE,
            gamma_lidar: DEFAULT_GAMMA_LIDAR,
            steps: DEFAULT_STEPS,
            image_step: None,
            lidar_step: None,
            mask,
            rand_init: false,
            seed: 0,
        }
    }

    pub fn image(eps: f32) -> Self {
        Self {
            eps_image: eps,
            ..Self::new(&[Channel::Image], MaskMode::Full)
        }
    }

    pub fn lidar(gamma: f32) -> Self {
        Self {
            gamma_lidar: gamma,
            ..Self::new(&[Channel::Lidar], MaskMode::Full)
        }
    }

    pub fn attacks(&self, c: Channel) -> bool {
        self.channels.contains(&c)
    }

    pub fn image_step_size(&self) -> f32 {
        self.image_step.unwrap_or(self.eps_image / 4.0)
    }

    pub fn lidar_step_size(&self) -> f32 {
        self.lidar_step.unwrap_or(self.gamma_lidar / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("attack needs at least one channel".into()));
        }
        let ok = |v: f32| v >= 0.0 && v.is_finite();
        if !ok(self.eps_image) || !ok(self.gamma_lidar) || !ok(self.image_step_size()) || !ok(self.lidar_step_size()) {
            return Err(Error::Config("attack budgets and step sizes must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Where each channel may be perturbed.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    /// `H·W`, shared by the three color planes.
    pub image: Vec<bool>,
    pub points: Vec<bool>,
}

impl MaskSet {
    pub fn image_count(&self) -> usize {
        self.image.iter().filter(|&&m| m).count()
    }

    pub fn point_count(&self) -> usize {
        self.points.iter().filter(|&&m| m).count()
    }
}

fn inside(b: &[f32; 4], u: f32, v: f32) -> bool {
    u >= b[0] && u < b[2] && v >= b[1] && v < b[3]
}

/// `Full` opens everything; `CarBoxes` opens pixels whose centers fall in a
/// car box and points whose unperturbed projection does.
pub fn build_masks(scene: &Scene, intr: &CameraIntrinsics, mode: MaskMode) -> MaskSet {
    let (h, w) = (intr.height, intr.width);
    match mode {
        MaskMode::Full => MaskSet {
            height: h,
            width: w,
            image: vec![true; h * w],
            points: vec![true; scene.cloud.len()],
        },
        MaskMode::CarBoxes => {
            let cars: Vec<[f32; 4]> = scene.car_boxes().map(|g| g.bbox).collect();
            let image = (0..h * w)
                .map(|p| {
                    let (u, v) = ((p % w) as f32 + 0.5, (p / w) as f32 + 0.5);
                    cars.iter().any(|b| inside(b, u, v))
                })
                .collect();
            let points = scene
                .cloud
                .iter()
                .map(|&p| {
                    if !(p[2] > 0.0) {
                        return false;
                    }
                    let (u, v) = intr.project(p);
                    cars.iter().any(|b| inside(b, u, v))
                })
                .collect();
            MaskSet {
                height: h,
                width: w,
                image,
                points,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    /// `3×H×W` intensity offsets, bounded before clipping.
    pub image: Tensor,
    /// Meters, one row per point.
    pub points: Vec<[f32; 3]>,
}

impl Perturbation {
    pub fn zeros(intr: &CameraIntrinsics, num_points: usize) -> Self {
        Self {
            image: Tensor::zeros(&[3, intr.height, intr.width]),
            points: vec![[0.0; 3]; num_points],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.image.data().iter().all(|&v| v == 0.0) && self.points.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for block in [self.image.data(), self.points.as_flattened()] {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], intr: &CameraIntrinsics) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("perturbation file: {why}"));
        let mut rest = bytes;
        let mut blocks = Vec::with_capacity(2);
        for _ in 0..2 {
            let (len, tail) = rest.split_first_chunk::<4>().ok_or_else(|| bad("truncated length"))?;
            let n = u32::from_le_bytes(*len) as usize;
            let need = n.checked_mul(4).ok_or_else(|| bad("length overflow"))?;
            if tail.len() < need {
                return Err(bad("truncated block"));
            }
            let (body, tail) = tail.split_at(need);
            blocks.push(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect::<Vec<_>>(),
            );
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let points = blocks.pop().unwrap();
        let image = blocks.pop().unwrap();
        if points.len() % 3 != 0 {
            return Err(bad("point block is not N×3"));
        }
        Ok(Self {
            image: Tensor::new(vec![3, intr.height, intr.width], image)?,
            points: points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, intr: &CameraIntrinsics) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?, intr)
    }
}

/// A feasibility violation found by [`check_feasible`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ImageBound { index: usize, value: f32 },
    ImageMask { index: usize, value: f32 },
    ImageUntouched { index: usize, value: f32 },
    ImageRange { index: usize, value: f32 },
    PointBound { point: usize, value: f32 },
    PointMask { point: usize, value: f32 },
    PointUntouched { point: usize, value: f32 },
    Shape(String),
}

/// Every way `pert` can fail to lie in the feasible set of `spec` and `masks`.
pub fn check_feasible(scene: &Scene, pert: &Perturbation, spec: &AttackSpec, masks: &MaskSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let hw = masks.height * masks.width;
    if pert.image.len() != 3 * hw || pert.points.len() != scene.cloud.len() || masks.points.len() != scene.cloud.len() {
        out.push(Violation::Shape(format!(
            "image {:?}, {} point rows for {} points",
            pert.image.shape(),
            pert.points.len(),
            scene.cloud.len()
        )));
        return out;
    }
    let img_on = spec.attacks(Channel::Image);
    for (index, &value) in pert.image.data().iter().enumerate() {
        if !img_on {
            if value != 0.0 {
                out.push(Violation::ImageUntouched { index, value });
            }
            continue;
        }
        if !(value.abs() <= spec.eps_image) {
            out.push(Violation::ImageBound { index, value });
        }
        if !masks.image[index % hw] && value != 0.0 {
            out.push(Violation::ImageMask { index, value });
        }
        let x = (scene.rgb.data()[index] + value).clamp(0.0, 255.0);
        if !(0.0..=255.0).contains(&x) {
            out.push(Violation::ImageRange { index, value: x });
        }
    }
    let pts_on = spec.attacks(Channel::Lidar);
    for (point, row) in pert.points.iter().enumerate() {
        for &value in row {
            if !pts_on {
                if value != 0.0 {
                    out.push(Violation::PointUntouched { point, value });
                }
                continue;
            }
            if !(value.abs() <= spec.gamma_lidar) {
                out.push(Violation::PointBound { point, value });
            }
            if !masks.points[point] && value != 0.0 {
                out.push(Violation::PointMask { point, value });
            }
        }
    }
    out
}

/// Sensor inputs after applying a perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedInputs {
    /// Intensities, clipped to [0, 255].
    pub rgb: Tensor,
    /// Network-scale image, `rgb / 255`.
    pub rgb_input: Tensor,
    pub cloud: Vec<[f32; 3]>,
    pub lidar_input: Tensor,
    pub maps: DepthMaps,
}

impl PerturbedInputs {
    pub fn model_inputs(&self) -> ModelInputs<'_> {
        ModelInputs {
            rgb: Some(&self.rgb_input),
            lidar: Some(&self.lidar_input),
        }
    }
}

fn perturbed_rgb(scene: &Scene, pert: &Perturbation) -> Result<Tensor> {
    if pert.image.shape() != scene.rgb.shape() {
        return Err(Error::shape(
            "apply_perturbation",
            format!("image offset {:?} vs image {:?}", pert.image.shape(), scene.rgb.shape()),
        ));
    }
    let data = scene
        .rgb
        .data()
        .iter()
        .zip(pert.image.data())
        .map(|(&x, &d)| (x + d).clamp(0.0, 255.0))
        .collect();
    Tensor::new(scene.rgb.shape().to_vec(), data)
}

fn perturbed_cloud(scene: &Scene, pert: &Perturbation) -> Result<Vec<[f32; 3]>> {
    if pert.points.len() != scene.cloud.len() {
        return Err(Error::shape(
            "apply_perturbation",
            format!("{} point offsets for {} points", pert.points.len(), scene.cloud.len()),
        ));
    }
    Ok(scene
        .cloud
        .iter()
        .zip(&pert.points)
        .map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
        .collect())
}

/// `x + δ` for both sensors, image clipped, maps regenerated.
pub fn apply_perturbation(
    scene: &Scene,
    pert: &Perturbation,
    intr: &CameraIntrinsics,
    stats: &DepthStats,
) -> Result<PerturbedInputs> {
    let rgb = perturbed_rgb(scene, pert)?;
    let cloud = perturbed_cloud(scene, pert)?;
    let (lidar_input, maps) = lidar_input(&cloud, intr, stats)?;
    Ok(PerturbedInputs {
        rgb_input: scale_rgb(&rgb),
        rgb,
        cloud,
        lidar_input,
        maps,
    })
}

/// Loss and input gradients at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentGrad {
    pub loss: f32,
    /// Gradient with respect to image intensities, `3×H×W`; `None` means zero.
    pub image: Option<Vec<f32>>,
    /// Gradient with respect to point coordinates; `None` means zero.
    pub points: Option<Vec<[f32; 3]>>,
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Masked L∞ projected sign-gradient ascent against an arbitrary gradient
/// oracle. `observe` sees every iterate (including the start) with the loss
/// evaluated there, or `NaN` for iterates that were never evaluated.
pub fn pgd_with<G, O>(
    scene: &Scene,
    intr: &CameraIntrinsics,
    spec: &AttackSpec,
    masks: &MaskSet,
    mut grad: G,
    mut observe: O,
) -> Result<Perturbation>
where
    G: FnMut(&Perturbation) -> Result<AscentGrad>,
    O: FnMut(usize, &Perturbation, f32),
{
    spec.validate()?;
    if scene.rgb.shape() != [3, intr.height, intr.width] {
        return Err(Error::Geometry(format!(
            "scene image {:?} does not match intrinsics {}×{}",
            scene.rgb.shape(),
            intr.height,
            intr.width
        )));
    }
    let hw = intr.height * intr.width;
    let (img_on, pts_on) = (spec.attacks(Channel::Image), spec.attacks(Channel::Lidar));
    let (eps, gamma) = (spec.eps_image, spec.gamma_lidar);
    let mut pert = Perturbation::zeros(intr, scene.cloud.len());

    let project = |pert: &mut Perturbation| {
        for (i, d) in pert.image.data_mut().iter_mut().enumerate() {
            *d = if img_on && masks.image[i % hw] { d.clamp(-eps, eps) } else { 0.0 };
        }
        for (row, &m) in pert.points.iter_mut().zip(&masks.points) {
            for d in row {
                *d = if pts_on && m { d.clamp(-gamma, gamma) } else { 0.0 };
            }
        }
    };

    if spec.rand_init {
        let mut rng = rng_from(spec.seed);
        if img_on && eps > 0.0 {
            pert.image.data_mut().iter_mut().for_each(|d| *d = rng.gen_range(-eps..=eps));
        }
        if pts_on && gamma > 0.0 {
            pert.points.iter_mut().flatten().for_each(|d| *d = rng.gen_range(-gamma..=gamma));
        }
        project(&mut pert);
    }

    let (a_img, a_pts) = (spec.image_step_size(), spec.lidar_step_size());
    for step in 0..spec.steps {
        let g = grad(&pert)?;
        observe(step, &pert, g.loss);
        if let (true, Some(gi)) = (img_on, &g.image) {
            for (d, &gv) in pert.image.data_mut().iter_mut().zip(gi) {
                *d += a_img * sign(gv);
            }
        }
        if let (true, Some(gp)) = (pts_on, &g.points) {
            for (row, gr) in pert.points.iter_mut().zip(gp) {
                for (d, &gv) in row.iter_mut().zip(gr) {
                    *d += a_pts * sign(gv);
                }
            }
        }
        project(&mut pert);
    }
    observe(spec.steps, &pert, f32::NAN);
    Ok(pert)
}

/// Regression loss of `model` at `scene + pert`, with gradients for the
/// requested channels.
pub fn regression_ascent(
    model: &Detector,
    scene: &Scene,
    pert: &Perturbation,
    intr: &CameraIntrinsics,
    stats: &DepthStats,
    channels: &[Channel],
) -> Result<AscentGrad> {
    let fusion = model.config.fusion;
    let want_img = channels.contains(&Channel::Image) && fusion.uses_rgb();
    let want_pts = channels.contains(&Channel::Lidar) && fusion.uses_lidar();

    let rgb = fusion.uses_rgb().then(|| perturbed_rgb(scene, pert).map(|x| scale_rgb(&x))).transpose()?;
    let (cloud, lidar) = if fusion.uses_lidar() {
        let cloud = perturbed_cloud(scene, pert)?;
        let (input, maps) = lidar_input(&cloud, intr, stats)?;
        (cloud, Some((input, maps)))
    } else {
        (Vec::new(), None)
    };

    let mut tape = Tape::new();
    let inputs = ModelInputs {
        rgb: rgb.as_ref(),
        lidar: lidar.as_ref().map(|(t, _)| t),
    };
    let graph = model.graph(
        &mut tape,
        inputs,
        GradRequest {
            params: false,
            rgb: want_img,
            lidar: want_pts,
        },
    )?;
    let targets = assign_targets(&scene.gt, intr.height, intr.width);
    let loss = regression_loss(&mut tape, graph.pred, &targets)?;
    let value = tape.value(loss).item();
    if !want_img && !want_pts {
        return Ok(AscentGrad {
            loss: value,
            image: None,
            points: None,
        });
    }
    let grads = tape.backward(loss)?;
    let image = match (want_img, graph.rgb) {
        (true, Some(v)) => Some(grads.get(v).data().iter().map(|g| g / 255.0).collect()),
        _ => None,
    };
    let points = match (want_pts, graph.lidar, &lidar) {
        (true, Some(v), Some((_, maps))) => {
            let mg = normalize_backward(&grads.get(v), stats, intr.height, intr.width)?;
            Some(maps_backward(&mg, maps, &cloud, intr)?)
        }
        _ => None,
    };
    Ok(AscentGrad {
        loss: value,
        image,
        points,
    })
}

/// PGD on the regression loss with an iterate observer.
pub fn pgd_attack_observed<O>(
    model: &Detector,
    scene: &Scene,
    intr: &CameraIntrinsics,
    stats: &DepthStats,
    spec: &AttackSpec,
    observe: O,
) -> Result<Perturbation>
where
    O: FnMut(usize, &Perturbation, f32),
{
    check_geometry(model, intr)?;
    let masks = build_masks(scene, intr, spec.mask);
    pgd_with(
        scene,
        intr,
        spec,
        &masks,
        |p| regression_ascent(model, scene, p, intr, stats, &spec.channels),
        observe,
    )
}

pub fn pgd_attack(
    model: &Detector,
    scene: &Scene,
    intr: &CameraIntrinsics,
    stats: &DepthStats,
    spec: &AttackSpec,
) -> Result<Perturbation> {
    pgd_attack_observed(model, scene, intr, stats, spec, |_, _, _| {})
}

fn check_geometry(model: &Detector, intr: &CameraIntrinsics) -> Result<()> {
    if model.config.image_height != intr.height || model.config.image_width != intr.width {
        return Err(Error::Geometry(format!(
            "model expects {}×{} images, camera gives {}×{}",
            model.config.image_height, model.config.image_width, intr.height, intr.width
        )));
    }
    Ok(())
}

/// Detections of `target` on inputs perturbed against `source`.
#[allow(clippy::too_many_arguments)]
pub fn transfer_attack(
    source: &Detector,
    target: &Detector,
    scene: &Scene,
    intr: &CameraIntrinsics,
    stats: &DepthStats,
    spec: &AttackSpec,
    score_thresh: f32,
    iou_thresh: f32,
) -> Result<Vec<Detection>> {
    check_geometry(source, intr)?;
    check_geometry(target, intr)?;
    let pert = pgd_attack(source, scene, intr, stats, spec)?;
    let inputs = apply_perturbation(scene, &pert, intr, stats)?;
    let raw = target.forward(inputs.model_inputs())?;
    Ok(crate::detector::decode(&raw, intr.height, intr.width, score_thresh, iou_thresh))
}
