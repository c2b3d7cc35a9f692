use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CameraIntrinsics, Cuboid, ObjectClass, SceneSpec, GROUND_Y};
use crate::error::Result;
use crate::ndlab::Tensor;

/// Base colors, RGB intensity units.
fn class_color(class: ObjectClass) -> [f32; 3] {
    match class {
        ObjectClass::Car => [185.0, 45.0, 40.0],
        ObjectClass::Pedestrian => [60.0, 155.0, 70.0],
        ObjectClass::Cyclist => [215.0, 190.0, 45.0],
    }
}

/// A planar quad on a cuboid surface: corner, two edge vectors, outward normal.
#[derive(Debug, Clone, Copy)]
pub(super) struct Face {
    origin: [f32; 3],
    edge_a: [f32; 3],
    edge_b: [f32; 3],
    normal: [f32; 3],
    shade: f32,
}

impl Face {
    fn corners(&self) -> [[f32; 3]; 4] {
        let o = self.origin;
        let a = add(o, self.edge_a);
        let ab = add(a, self.edge_b);
        let b = add(o, self.edge_b);
        [o, a, ab, b]
    }

    fn point(&self, s: f32, t: f32) -> [f32; 3] {
        add(self.origin, add(scale(self.edge_a, s), scale(self.edge_b, t)))
    }

    fn center(&self) -> [f32; 3] {
        self.point(0.5, 0.5)
    }

    fn area(&self) -> f32 {
        norm(self.edge_a) * norm(self.edge_b)
    }

    /// Area weighted by how squarely the face looks at the camera.
    fn apparent_area(&self) -> f32 {
        let c = self.center();
        let cos = -dot(self.normal, c) / norm(c);
        self.area() * cos.max(0.0)
    }
}

fn add(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f32; 3], k: f32) -> [f32; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn dot(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f32; 3]) -> f32 {
    dot(a, a).sqrt()
}

/// Faces whose outward normal points toward the camera at the origin,
/// ordered far-to-near for painting (side and top faces before the front).
pub(super) fn visible_faces(c: &Cuboid) -> Vec<Face> {
    let (lo, hi) = (c.min, c.max);
    let (dx, dy, dz) = (hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]);
    let mut faces = Vec::with_capacity(3);
    if lo[1] > 0.0 {
        faces.push(Face {
            origin: lo,
            edge_a: [dx, 0.0, 0.0],
            edge_b: [0.0, 0.0, dz],
            normal: [0.0, -1.0, 0.0],
            shade: 1.15,
        });
    }
    if lo[0] > 0.0 {
        faces.push(Face {
            origin: lo,
            edge_a: [0.0, dy, 0.0],
            edge_b: [0.0, 0.0, dz],
            normal: [-1.0, 0.0, 0.0],
            shade: 0.7,
        });
    }
    if hi[0] < 0.0 {
        faces.push(Face {
            origin: [hi[0], lo[1], lo[2]],
            edge_a: [0.0, dy, 0.0],
            edge_b: [0.0, 0.0, dz],
            normal: [1.0, 0.0, 0.0],
            shade: 0.7,
        });
    }
    faces.push(Face {
        origin: lo,
        edge_a: [dx, 0.0, 0.0],
        edge_b: [0.0, dy, 0.0],
        normal: [0.0, 0.0, -1.0],
        shade: 1.0,
    });
    faces
}

fn fill_convex(poly: &[(f32, f32)], intr: &CameraIntrinsics, mut paint: impl FnMut(usize, usize)) {
    let (mut u0, mut v0, mut u1, mut v1) = (f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &(u, v) in poly {
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let cols = (u0.floor().max(0.0) as usize)..(u1.ceil().min(intr.width as f32).max(0.0) as usize);
    let rows = (v0.floor().max(0.0) as usize)..(v1.ceil().min(intr.height as f32).max(0.0) as usize);
    for row in rows {
        for col in cols.clone() {
            let (pu, pv) = (col as f32 + 0.5, row as f32 + 0.5);
            let mut sign = 0.0f32;
            let mut inside = true;
            for i in 0..poly.len() {
                let (au, av) = poly[i];
                let (bu, bv) = poly[(i + 1) % poly.len()];
                let cross = (bu - au) * (pv - av) - (bv - av) * (pu - au);
                if cross != 0.0 {
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if cross.signum() != sign {
                        inside = false;
                        break;
                    }
                }
            }
            if inside {
                paint(row, col);
            }
        }
    }
}

/// Sub-samples per pixel side when rasterizing.
const SUPERSAMPLE: usize = 4;

/// Painter's-algorithm render on a supersampled grid, box-filtered down so
/// that edge pixels carry their fractional coverage.
pub(super) fn render_rgb(
    spec: &SceneSpec,
    intr: &CameraIntrinsics,
    objects: &[Cuboid],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (h, w) = (intr.height, intr.width);
    let s = SUPERSAMPLE;
    let fine = CameraIntrinsics {
        fx: intr.fx * s as f32,
        fy: intr.fy * s as f32,
        cx: intr.cx * s as f32,
        cy: intr.cy * s as f32,
        width: w * s,
        height: h * s,
    };
    let (fh, fw) = (fine.height, fine.width);
    let fplane = fh * fw;
    let mut hi = vec![0.0f32; 3 * fplane];

    let sky_tint: f32 = rng.gen_range(0.85..1.15);
    let road_tint: f32 = rng.gen_range(0.8..1.2);
    for row in 0..fh {
        let v = (row as f32 + 0.5) / s as f32;
        let color = if v < intr.cy {
            let t = v / intr.cy.max(1.0);
            [
                (140.0 + 40.0 * t) * sky_tint,
                (170.0 + 30.0 * t) * sky_tint,
                (215.0 + 10.0 * t) * sky_tint,
            ]
        } else {
            // Road darkens slightly toward the horizon.
            let t = ((v - intr.cy) / (h as f32 - intr.cy).max(1.0)).min(1.0);
            let g = (75.0 + 35.0 * t) * road_tint;
            [g, g, g * 1.05]
        };
        for col in 0..fw {
            for (c, value) in color.iter().enumerate() {
                hi[c * fplane + row * fw + col] = *value;
            }
        }
    }

    let mut order: Vec<&Cuboid> = objects.iter().collect();
    order.sort_by(|a, b| b.center_z().total_cmp(&a.center_z()));
    for obj in order {
        let base = class_color(obj.class);
        for face in visible_faces(obj) {
            let poly: Vec<(f32, f32)> = face.corners().iter().map(|&p| fine.project(p)).collect();
            let k = obj.brightness * face.shade;
            fill_convex(&poly, &fine, |row, col| {
                for c in 0..3 {
                    hi[c * fplane + row * fw + col] = base[c] * k;
                }
            });
        }
    }

    let plane = h * w;
    let mut img = vec![0.0f32; 3 * plane];
    let norm = 1.0 / (s * s) as f32;
    for c in 0..3 {
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0f32;
                for dr in 0..s {
                    let base = c * fplane + (row * s + dr) * fw + col * s;
                    for v in &hi[base..base + s] {
                        acc += v;
                    }
                }
                img[c * plane + row * w + col] = acc * norm;
            }
        }
    }

    if spec.pixel_noise > 0.0 {
        let noise = Normal::new(0.0f32, spec.pixel_noise).expect("finite noise sigma");
        for v in img.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    Tensor::new(vec![3, h, w], img)
}

/// Ray from the camera to `p` passes through `c` before reaching `p`.
fn occludes(c: &Cuboid, p: [f32; 3]) -> bool {
    let (mut t0, mut t1) = (0.0f32, 1.0f32 - 1e-4);
    for axis in 0..3 {
        let d = p[axis];
        if d.abs() < 1e-12 {
            if 0.0 < c.min[axis] || 0.0 > c.max[axis] {
                return false;
            }
            continue;
        }
        let (mut a, mut b) = (c.min[axis] / d, c.max[axis] / d);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return false;
        }
    }
    true
}

fn in_box(intr: &CameraIntrinsics, p: [f32; 3], b: &[f32; 4]) -> bool {
    let (u, v) = intr.project(p);
    u >= b[0] && u <= b[2] && v >= b[1] && v <= b[3]
}

pub(super) fn sample_cloud(
    spec: &SceneSpec,
    intr: &CameraIntrinsics,
    objects: &[(Cuboid, [f32; 4])],
    rng: &mut ChaCha8Rng,
) -> Vec<[f32; 3]> {
    let mut cloud = Vec::new();
    let visible = |p: [f32; 3], skip: Option<usize>| {
        objects
            .iter()
            .enumerate()
            .all(|(j, (c, _))| Some(j) == skip || !occludes(c, p))
    };

    for (i, (cuboid, gt_box)) in objects.iter().enumerate() {
        let faces = visible_faces(cuboid);
        let weights: Vec<f32> = faces.iter().map(Face::apparent_area).collect();
        let total: f32 = weights.iter().sum();
        let z = cuboid.center_z();
        let count = (spec.lidar_density * intr.fx * intr.fy * total / (z * z)).round().max(1.0) as usize;
        let sample = |rng: &mut ChaCha8Rng| {
            let mut r = rng.gen_range(0.0..total);
            let mut k = 0;
            while k + 1 < faces.len() && r >= weights[k] {
                r -= weights[k];
                k += 1;
            }
            faces[k].point(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
        };

        let start = cloud.len();
        for _ in 0..count {
            let p = sample(rng);
            let dropped = rng.gen_range(0.0..1.0) < spec.dropout;
            if !dropped && visible(p, Some(i)) {
                cloud.push(p);
            }
        }
        // Every object keeps at least one return inside its box.
        if !cloud[start..].iter().any(|&p| in_box(intr, p, gt_box)) {
            let mut fallback = None;
            for _ in 0..1000 {
                let p = sample(rng);
                if in_box(intr, p, gt_box) {
                    if visible(p, Some(i)) {
                        fallback = Some(p);
                        break;
                    }
                    fallback.get_or_insert(p);
                }
            }
            let p = fallback.unwrap_or_else(|| faces.last().expect("front face").center());
            cloud.push(p);
        }
    }

    let v_min = intr.cy + intr.fy * GROUND_Y / spec.max_ground_range;
    let span = (intr.height as f32 - v_min).max(0.0);
    let count = (spec.lidar_density * intr.width as f32 * span).round() as usize;
    for _ in 0..count {
        let u = rng.gen_range(0.0..intr.width as f32);
        let v = v_min + rng.gen_range(0.0..1.0) * span;
        let z = intr.fy * GROUND_Y / (v - intr.cy);
        let p = [(u - intr.cx) * z / intr.fx, GROUND_Y, z];
        let dropped = rng.gen_range(0.0..1.0) < spec.dropout;
        if !dropped && z.is_finite() && z > 0.0 && visible(p, None) {
            cloud.push(p);
        }
    }
    cloud
}
