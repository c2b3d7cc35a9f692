//! Deterministic synthetic driving scenes: a pinhole camera at the origin
//! looking down +z, a flat ground plane, and axis-aligned cuboid objects.
//! Each scene pairs an RGB rendering with a LiDAR-style point cloud and
//! ground-truth 2D boxes.

mod dataset;
mod render;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndlab::Tensor;
use crate::rng::rng_from;

pub use dataset::{
    generate_dataset, Dataset, DatasetManifest, DepthStats, SceneFiles, Split, FORMAT_VERSION,
};

/// Height of the camera above the ground plane, in meters (+y points down).
pub const GROUND_Y: f32 = 1.5;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MAX_BOX_OVERLAP: f32 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 120.0,
            fy: 120.0,
            cx: 64.0,
            cy: 48.0,
            width: 128,
            height: 96,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f32
            && self.cy >= 0.0
            && self.cy < self.height as f32;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Continuous pixel coordinates `(u, v)` of a camera-frame point.
    pub fn project(&self, p: [f32; 3]) -> (f32, f32) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }
}

/// Cuboid extents in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dimensions {
    /// Extent along +z.
    pub length: f32,
    pub height: f32,
    /// Extent along x.
    pub width: f32,
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub cars: CountRange,
    pub pedestrians: CountRange,
    pub cyclists: CountRange,
    /// Lateral placement range of object centers, meters.
    pub x_range: [f32; 2],
    /// Forward placement range of object centers, meters.
    pub z_range: [f32; 2],
    pub car_dims: Dimensions,
    pub pedestrian_dims: Dimensions,
    pub cyclist_dims: Dimensions,
    /// Std-dev of additive Gaussian pixel noise, intensity units.
    pub pixel_noise: f32,
    /// Relative half-width of per-object brightness jitter.
    pub brightness_jitter: f32,
    /// Expected LiDAR returns per image pixel covered by a surface.
    pub lidar_density: f32,
    /// Fraction of returns randomly dropped.
    pub dropout: f32,
    /// Ground returns are only generated up to this range, meters.
    pub max_ground_range: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            cars: CountRange { min: 1, max: 4 },
            pedestrians: CountRange { min: 0, max: 2 },
            cyclists: CountRange { min: 0, max: 2 },
            x_range: [-8.0, 8.0],
            z_range: [6.0, 35.0],
            car_dims: Dimensions {
                length: 4.5,
                height: 1.5,
                width: 1.8,
            },
            pedestrian_dims: Dimensions {
                length: 0.5,
                height: 1.8,
                width: 0.5,
            },
            cyclist_dims: Dimensions {
                length: 1.8,
                height: 1.7,
                width: 0.6,
            },
            pixel_noise: 4.0,
            brightness_jitter: 0.2,
            lidar_density: 0.5,
            dropout: 0.05,
            max_ground_range: 80.0,
        }
    }
}

impl SceneSpec {
    /// A spec that places no objects at all.
    pub fn empty() -> Self {
        let none = CountRange { min: 0, max: 0 };
        Self {
            cars: none,
            pedestrians: none,
            cyclists: none,
            ..Self::default()
        }
    }

    pub fn dims(&self, class: ObjectClass) -> Dimensions {
        match class {
            ObjectClass::Car => self.car_dims,
            ObjectClass::Pedestrian => self.pedestrian_dims,
            ObjectClass::Cyclist => self.cyclist_dims,
        }
    }

    pub fn counts(&self, class: ObjectClass) -> CountRange {
        match class {
            ObjectClass::Car => self.cars,
            ObjectClass::Pedestrian => self.pedestrians,
            ObjectClass::Cyclist => self.cyclists,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges_ok = ObjectClass::ALL.iter().all(|&c| self.counts(c).min <= self.counts(c).max);
        let dims_ok = ObjectClass::ALL.iter().all(|&c| {
            let d = self.dims(c);
            d.length > 0.0 && d.height > 0.0 && d.width > 0.0
        });
        let ok = ranges_ok
            && dims_ok
            && self.x_range[0] <= self.x_range[1]
            && self.z_range[0] > 0.0
            && self.z_range[0] <= self.z_range[1]
            && self.pixel_noise >= 0.0
            && self.lidar_density > 0.0
            && (0.0..1.0).contains(&self.dropout)
            && self.max_ground_range > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid scene spec".into()))
        }
    }
}

/// Ground-truth 2D box `[x_min, y_min, x_max, y_max]` in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub class: ObjectClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// 3×H×W, intensities in [0, 255].
    pub rgb: Tensor,
    /// Camera-frame points, meters, +z forward.
    pub cloud: Vec<[f32; 3]>,
    pub gt: Vec<GtBox>,
}

impl Scene {
    pub fn num_points(&self) -> usize {
        self.cloud.len()
    }

    pub fn car_boxes(&self) -> impl Iterator<Item = &GtBox> {
        self.gt.iter().filter(|g| g.class == ObjectClass::Car)
    }
}

/// An object placed in the world: the cuboid spans
/// `[x0, x1] × [y0, y1] × [z0, z1]`, resting on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cuboid {
    pub class: ObjectClass,
    pub min: [f32; 3],
    pub max: [f32; 3],
    pub brightness: f32,
}

impl Cuboid {
    fn new(class: ObjectClass, dims: Dimensions, x: f32, z: f32, brightness: f32) -> Self {
        Self {
            class,
            min: [x - dims.width / 2.0, GROUND_Y - dims.height, z - dims.length / 2.0],
            max: [x + dims.width / 2.0, GROUND_Y, z + dims.length / 2.0],
            brightness,
        }
    }

    pub fn corners(&self) -> [[f32; 3]; 8] {
        let (a, b) = (self.min, self.max);
        [
            [a[0], a[1], a[2]],
            [b[0], a[1], a[2]],
            [a[0], b[1], a[2]],
            [b[0], b[1], a[2]],
            [a[0], a[1], b[2]],
            [b[0], a[1], b[2]],
            [a[0], b[1], b[2]],
            [b[0], b[1], b[2]],
        ]
    }

    /// Unclipped image-plane bounding box of the cuboid.
    pub fn projected_box(&self, intr: &CameraIntrinsics) -> [f32; 4] {
        let mut b = [f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY];
        for c in self.corners() {
            let (u, v) = intr.project(c);
            b[0] = b[0].min(u);
            b[1] = b[1].min(v);
            b[2] = b[2].max(u);
            b[3] = b[3].max(v);
        }
        b
    }

    pub fn center_z(&self) -> f32 {
        0.5 * (self.min[2] + self.max[2])
    }
}

pub(crate) fn clip_box(b: [f32; 4], intr: &CameraIntrinsics) -> [f32; 4] {
    let (w, h) = (intr.width as f32, intr.height as f32);
    [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)]
}

fn box_area(b: &[f32; 4]) -> f32 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection area over the smaller of the two box areas.
fn overlap_fraction(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let inter = [a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])];
    let smaller = box_area(a).min(box_area(b));
    if smaller <= 0.0 {
        return 1.0;
    }
    box_area(&inter) / smaller
}

fn sample_count(rng: &mut ChaCha8Rng, range: CountRange) -> usize {
    rng.gen_range(range.min..=range.max)
}

/// Tries to place every requested object; `None` if some object could not be
/// placed within the attempt budget.
fn place_objects(
    spec: &SceneSpec,
    intr: &CameraIntrinsics,
    counts: &[usize; 3],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(Cuboid, [f32; 4])>> {
    let mut placed: Vec<(Cuboid, [f32; 4])> = Vec::new();
    for class in ObjectClass::ALL {
        for _ in 0..counts[class.index()] {
            let mut ok = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let x = rng.gen_range(spec.x_range[0]..=spec.x_range[1]);
                let z = rng.gen_range(spec.z_range[0]..=spec.z_range[1]);
                let brightness = 1.0 + rng.gen_range(-spec.brightness_jitter..=spec.brightness_jitter);
                let cuboid = Cuboid::new(class, spec.dims(class), x, z, brightness);
                if cuboid.min[2] <= 0.1 {
                    continue;
                }
                let full = cuboid.projected_box(intr);
                let clipped = clip_box(full, intr);
                let visible = clipped[2] - clipped[0] >= 2.0
                    && clipped[3] - clipped[1] >= 2.0
                    && box_area(&clipped) >= 0.5 * box_area(&full);
                if !visible {
                    continue;
                }
                if placed.iter().any(|(_, b)| overlap_fraction(b, &clipped) > MAX_BOX_OVERLAP) {
                    continue;
                }
                placed.push((cuboid, clipped));
                ok = true;
                break;
            }
            if !ok {
                return None;
            }
        }
    }
    Some(placed)
}

/// Generates one scene. Bit-identical for identical `(spec, intrinsics, seed)`.
///
/// If an object cannot be placed within 100 attempts, the scene is
/// regenerated with one object fewer (taken from the most numerous class).
pub fn generate_scene(spec: &SceneSpec, intr: &CameraIntrinsics, seed: u64) -> Result<Scene> {
    spec.validate()?;
    intr.validate()?;
    let mut rng = rng_from(seed);
    let mut counts = [0usize; 3];
    for class in ObjectClass::ALL {
        counts[class.index()] = sample_count(&mut rng, spec.counts(class));
    }
    let objects = loop {
        if let Some(objects) = place_objects(spec, intr, &counts, &mut rng) {
            break objects;
        }
        let largest = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
        counts[largest] -= 1;
    };

    let cuboids: Vec<Cuboid> = objects.iter().map(|(c, _)| *c).collect();
    let rgb = render::render_rgb(spec, intr, &cuboids, &mut rng)?;
    let cloud = render::sample_cloud(spec, intr, &objects, &mut rng);
    let gt = objects
        .iter()
        .map(|(c, b)| GtBox {
            bbox: *b,
            class: c.class,
        })
        .collect();
    Ok(Scene { rgb, cloud, gt })
}
