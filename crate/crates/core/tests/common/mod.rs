//! Independent 64-bit reference implementations used as test oracles.
//!
//! Nothing here calls into the code under test for arithmetic: convolutions
//! are naive loops, the detector forward is rebuilt from parameter names,
//! nearest-neighbor fill is brute force over every point, and AP is computed
//! from its sum-over-recall-levels definition.

#![allow(dead_code)]

pub mod grad;

use fuselab_core::detector::{Targets, BOX_CHANNEL, CLS_CHANNEL, NUM_CLASSES, OBJ_CHANNEL, REG_BETA, REG_WEIGHT};
use fuselab_core::{CameraIntrinsics, FusionMode, ParamStore};

pub const LEAKY: f64 = 0.1;
pub const FD_STEP: f64 = 1e-4;
/// Fallback steps for probes that straddle a kink at `FD_STEP`.
pub const FD_STEPS: [f64; 4] = [FD_STEP, 1e-5, 1e-6, 1e-7];
pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-6;

/// Records which side of every kink a forward pass landed on.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Pattern(pub Vec<bool>);

pub fn conv2d(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    out_c: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let pad = (k / 2) as isize;
    let oh = (h + 2 * pad as usize - k) / stride + 1;
    let ow = (w + 2 * pad as usize - k) / stride + 1;
    let mut out = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        let b = bias.map_or(0.0, |b| b[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((o * c + ci) * k + ky) * k + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub fn leaky(x: &mut [f64], pattern: &mut Pattern) {
    for v in x {
        pattern.0.push(*v > 0.0);
        if *v <= 0.0 {
            *v *= LEAKY;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn bce(x: &[f64], t: &[f64], w: &[f64]) -> f64 {
    x.iter()
        .zip(t)
        .zip(w)
        .map(|((&x, &t), &w)| w * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()))
        .sum()
}

pub fn smooth_l1(x: &[f64], t: &[f64], w: &[f64], beta: f64, pattern: &mut Pattern) -> f64 {
    x.iter()
        .zip(t)
        .zip(w)
        .map(|((&x, &t), &w)| {
            let d = x - t;
            pattern.0.push(d.abs() < beta);
            w * if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta }
        })
        .sum()
}

/// Class axis leading; `cells` trailing values per class.
pub fn softmax_ce(x: &[f64], k: usize, target: &[usize], w: &[f64]) -> f64 {
    let cells = x.len() / k;
    (0..cells)
        .map(|c| {
            let m = (0..k).map(|j| x[j * cells + c]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|j| (x[j * cells + c] - m).exp()).sum::<f64>().ln();
            w[c] * (lse - x[target[c] * cells + c])
        })
        .sum()
}

/// Parameters as named f64 tensors, editable for finite differences.
#[derive(Clone)]
pub struct Params64 {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl Params64 {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            names: store.iter().map(|p| p.name.clone()).collect(),
            shapes: store.iter().map(|p| p.value.shape().to_vec()).collect(),
            values: store
                .iter()
                .map(|p| p.value.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> (&[f64], &[usize]) {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
        (&self.values[i], &self.shapes[i])
    }
}

fn conv_layer(
    p: &Params64,
    prefix: &str,
    x: &[f64],
    dims: (usize, usize, usize),
    stride: usize,
    act: bool,
    pattern: &mut Pattern,
) -> (Vec<f64>, (usize, usize, usize)) {
    let (w, shape) = p.get(&format!("{prefix}.weight"));
    let (b, _) = p.get(&format!("{prefix}.bias"));
    let (mut y, oh, ow) = conv2d(x, dims, w, shape[0], shape[2], Some(b), stride);
    if act {
        leaky(&mut y, pattern);
    }
    (y, (shape[0], oh, ow))
}

/// Reference forward of the four detector topologies. `rgb` is 3×H×W in
/// [0, 1], `lidar` 2×H×W; returns the head grid and its dims.
pub fn detector_forward(
    p: &Params64,
    fusion: FusionMode,
    rgb: &[f64],
    lidar: &[f64],
    h: usize,
    w: usize,
    pattern: &mut Pattern,
) -> (Vec<f64>, (usize, usize, usize)) {
    let (feat, dims) = match fusion {
        FusionMode::Late => {
            let mut r = (rgb.to_vec(), (3, h, w));
            for i in 1..=3 {
                r = conv_layer(p, &format!("rgb_branch.conv{i}"), &r.0, r.1, 2, true, pattern);
            }
            let mut l = (lidar.to_vec(), (2, h, w));
            for i in 1..=3 {
                l = conv_layer(p, &format!("lidar_branch.conv{i}"), &l.0, l.1, 2, true, pattern);
            }
            let cat: Vec<f64> = r.0.iter().chain(&l.0).copied().collect();
            let dims = (r.1 .0 + l.1 .0, r.1 .1, r.1 .2);
            conv_layer(p, "fuse.conv1", &cat, dims, 1, true, pattern)
        }
        mode => {
            let (x, c): (Vec<f64>, usize) = match mode {
                FusionMode::Rgb => (rgb.to_vec(), 3),
                FusionMode::Depth => (lidar.to_vec(), 2),
                _ => (rgb.iter().chain(lidar).copied().collect(), 5),
            };
            let mut cur = (x, (c, h, w));
            for (i, s) in [1, 2, 2, 2].into_iter().enumerate() {
                cur = conv_layer(p, &format!("backbone.conv{}", i + 1), &cur.0, cur.1, s, true, pattern);
            }
            cur
        }
    };
    conv_layer(p, "head", &feat, dims, 1, false, pattern)
}

/// `(total, objectness, class, regression)` in f64.
pub fn detection_loss_f64(grid: &[f64], t: &Targets, pattern: &mut Pattern) -> [f64; 4] {
    let cells = t.grid_h * t.grid_w;
    let plane = |c: usize| &grid[c * cells..(c + 1) * cells];
    let npos = t.owner.iter().filter(|o| o.is_some()).count();
    let pw: Vec<f64> = t
        .owner
        .iter()
        .map(|o| if o.is_some() { 1.0 / npos as f64 } else { 0.0 })
        .collect();
    let obj_t: Vec<f64> = t.owner.iter().map(|o| if o.is_some() { 1.0 } else { 0.0 }).collect();
    let obj = bce(plane(OBJ_CHANNEL), &obj_t, &vec![1.0 / cells as f64; cells]);
    let cls = softmax_ce(
        &grid[CLS_CHANNEL * cells..(CLS_CHANNEL + NUM_CLASSES) * cells],
        NUM_CLASSES,
        &t.class,
        &pw,
    );
    let mut reg = 0.0;
    for k in 0..4 {
        let pred: Vec<f64> = plane(BOX_CHANNEL + k)
            .iter()
            .map(|&v| if k < 2 { sigmoid(v) } else { v })
            .collect();
        let target: Vec<f64> = t.boxes.iter().map(|b| b[k] as f64).collect();
        reg += smooth_l1(&pred, &target, &pw, REG_BETA as f64, pattern);
    }
    [obj + cls + REG_WEIGHT as f64 * reg, obj, cls, reg]
}

/// `|a − n| ≤ ABS_TOL` or `|a − n| / max(|a|, |n|) < REL_TOL`.
pub fn grad_close(autodiff: f64, numeric: f64) -> bool {
    let diff = (autodiff - numeric).abs();
    diff <= ABS_TOL || diff / autodiff.abs().max(numeric.abs()) < REL_TOL
}

/// Outcome of comparing one gradient against central differences.
#[derive(Debug, Default, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±h probes straddle a kink.
    pub skipped: usize,
    pub failures: Vec<(usize, f64, f64)>,
    pub worst_rel: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0 && self.skipped * 20 <= self.checked + self.skipped
    }
}

/// Compares `autodiff[i]` against the central difference of `f` at each
/// index in `coords`, skipping probes whose kink patterns differ.
pub fn check_coords(
    name: &str,
    x: &[f64],
    autodiff: &[f64],
    coords: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&[f64], &mut Pattern) -> f64,
) -> GradCheck {
    let mut report = GradCheck {
        name: name.to_string(),
        ..GradCheck::default()
    };
    let mut probe = x.to_vec();
    for i in coords {
        let x0 = probe[i];
        let mut numeric = None;
        // Shrink the step until both probes sit on the same side of every kink.
        for h in FD_STEPS {
            probe[i] = x0 + h;
            let mut pp = Pattern::default();
            let fp = f(&probe, &mut pp);
            probe[i] = x0 - h;
            let mut pm = Pattern::default();
            let fm = f(&probe, &mut pm);
            if pp == pm {
                numeric = Some((fp - fm) / (2.0 * h));
                break;
            }
        }
        probe[i] = x0;
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        let a = autodiff[i];
        report.checked += 1;
        let diff = (a - numeric).abs();
        if diff > ABS_TOL {
            report.worst_rel = report.worst_rel.max(diff / a.abs().max(numeric.abs()));
        }
        if !grad_close(a, numeric) {
            report.failures.push((i, a, numeric));
        }
    }
    report
}

/// Nearest-occupied-pixel fill by exhaustive search over every point.
///
/// Each point lands in pixel `(⌊v⌋, ⌊u⌋)`; among points in one pixel the
/// smallest depth wins, then the lower point index. Each output pixel takes
/// the occupied pixel minimizing squared integer distance, ties broken by
/// the lower linear pixel index.
pub struct BruteMaps {
    pub depth: Vec<f32>,
    pub distance: Vec<f32>,
    pub assign: Vec<i32>,
}

pub fn brute_force_densify(cloud: &[[f32; 3]], intr: &CameraIntrinsics) -> BruteMaps {
    let (h, w) = (intr.height, intr.width);
    let located: Vec<Option<(usize, f32, f32)>> = cloud
        .iter()
        .map(|&p| {
            if !(p[2] > 0.0) || !p.iter().all(|c| c.is_finite()) {
                return None;
            }
            let u = intr.fx * p[0] / p[2] + intr.cx;
            let v = intr.fy * p[1] / p[2] + intr.cy;
            let (col, row) = (u.floor(), v.floor());
            if col >= 0.0 && row >= 0.0 && col < w as f32 && row < h as f32 {
                Some((row as usize * w + col as usize, u, v))
            } else {
                None
            }
        })
        .collect();
    let mut out = BruteMaps {
        depth: vec![0.0; h * w],
        distance: vec![0.0; h * w],
        assign: vec![-1; h * w],
    };
    for pix in 0..h * w {
        let (r, c) = ((pix / w) as i64, (pix % w) as i64);
        // (squared distance, pixel index, depth, point index)
        let mut best: Option<(i64, usize, f32, usize)> = None;
        for (i, loc) in located.iter().enumerate() {
            let Some((q, _, _)) = *loc else { continue };
            let (qr, qc) = ((q / w) as i64, (q % w) as i64);
            let d2 = (qr - r) * (qr - r) + (qc - c) * (qc - c);
            let z = cloud[i][2];
            let better = match best {
                None => true,
                Some((bd, bq, bz, _)) => (d2, q) < (bd, bq) || ((d2, q) == (bd, bq) && z < bz),
            };
            if better {
                best = Some((d2, q, z, i));
            }
        }
        if let Some((d2, _, z, i)) = best {
            let (_, u, v) = located[i].unwrap();
            out.depth[pix] = z;
            out.assign[pix] = i as i32;
            out.distance[pix] = if d2 == 0 {
                0.0
            } else {
                let du = c as f32 + 0.5 - u;
                let dv = r as f32 + 0.5 - v;
                (du * du + dv * dv).sqrt()
            };
        }
    }
    out
}

/// AP of one class from scored detections already labeled TP/FP, by the
/// definition `Σⱼ (1/n)·max{ precision_k : recall_k ≥ j/n }`.
pub fn ap_by_recall_levels(is_tp_in_score_order: &[bool], num_gt: usize) -> f64 {
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for &hit in is_tp_in_score_order {
        seen += 1;
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / seen as f64);
        recalls.push(tp);
    }
    (1..=num_gt)
        .map(|j| {
            precisions
                .iter()
                .zip(&recalls)
                .filter(|(_, &r)| r >= j)
                .map(|(&p, _)| p)
                .fold(0.0, f64::max)
                / num_gt as f64
        })
        .sum()
}

/// 64-bit IoU from corner coordinates.
pub fn iou_f64(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let [a0, a1, a2, a3] = a.map(f64::from);
    let [b0, b1, b2, b3] = b.map(f64::from);
    let iw = (a2.min(b2) - a0.max(b0)).max(0.0);
    let ih = (a3.min(b3) - a1.max(b1)).max(0.0);
    let inter = iw * ih;
    inter / ((a2 - a0) * (a3 - a1) + (b2 - b0) * (b3 - b1) - inter)
}

/// Brute-force AP of one class over pooled scenes: sort by score (stable in
/// scene then detection order), greedily match each detection to the
/// unmatched same-class gt of highest IoU at or above `thresh`, then apply
/// [`ap_by_recall_levels`]. `None` without ground truth.
pub fn oracle_ap(scenes: &[fuselab_core::evalkit::SceneResult], class: fuselab_core::ObjectClass, thresh: f64) -> Option<f64> {
    let num_gt = scenes.iter().flat_map(|s| &s.gt).filter(|g| g.class == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for (di, d) in s.dets.iter().enumerate() {
            if d.class == class {
                order.push((si, di));
            }
        }
    }
    // insertion sort keeps equal scores in their original order
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && scenes[order[j - 1].0].dets[order[j - 1].1].score < scenes[order[j].0].dets[order[j].1].score {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gt.len()]).collect();
    let mut labels = Vec::new();
    for (si, di) in order {
        let d = &scenes[si].dets[di];
        let mut best = (None, thresh);
        for (gi, g) in scenes[si].gt.iter().enumerate() {
            if g.class != class || used[si][gi] {
                continue;
            }
            let o = iou_f64(&d.bbox, &g.bbox);
            if o >= best.1 && (best.0.is_none() || o > best.1) {
                best = (Some(gi), o);
            }
        }
        if let (Some(gi), _) = best {
            used[si][gi] = true;
        }
        labels.push(best.0.is_some());
    }
    Some(ap_by_recall_levels(&labels, num_gt))
}

/// A few scenes with random gt and detections: some near a gt box, some
/// random, occasional duplicates and tied scores.
pub fn random_ap_instance(rng: &mut impl rand::Rng) -> Vec<fuselab_core::evalkit::SceneResult> {
    use fuselab_core::{Detection, GtBox, ObjectClass};
    let rand_box = |rng: &mut dyn rand::RngCore| {
        let x0: f32 = rand::Rng::gen_range(rng, 0.0..100.0);
        let y0: f32 = rand::Rng::gen_range(rng, 0.0..70.0);
        let w: f32 = rand::Rng::gen_range(rng, 2.0..30.0);
        let h: f32 = rand::Rng::gen_range(rng, 2.0..30.0);
        [x0, y0, x0 + w, y0 + h]
    };
    (0..rng.gen_range(1..=4))
        .map(|_| {
            let gt: Vec<GtBox> = (0..rng.gen_range(0..=5))
                .map(|_| GtBox {
                    bbox: rand_box(rng),
                    class: ObjectClass::ALL[rng.gen_range(0..3)],
                })
                .collect();
            let mut dets = Vec::new();
            for _ in 0..rng.gen_range(0..=8) {
                let near = !gt.is_empty() && rng.gen_bool(0.6);
                let (bbox, class) = if near {
                    let g = gt[rng.gen_range(0..gt.len())];
                    let j = |rng: &mut dyn rand::RngCore| rand::Rng::gen_range(rng, -3.0f32..3.0);
                    let b = [g.bbox[0] + j(rng), g.bbox[1] + j(rng), g.bbox[2] + j(rng), g.bbox[3] + j(rng)];
                    let b = [b[0].min(b[2] - 1.0), b[1].min(b[3] - 1.0), b[2], b[3]];
                    let class = if rng.gen_bool(0.85) { g.class } else { ObjectClass::ALL[rng.gen_range(0..3)] };
                    (b, class)
                } else {
                    (rand_box(rng), ObjectClass::ALL[rng.gen_range(0..3)])
                };
                let score = if rng.gen_bool(0.15) { 0.5 } else { rng.gen_range(0.01f32..1.0) };
                dets.push(Detection { bbox, class, score });
            }
            fuselab_core::evalkit::SceneResult { dets, gt }
        })
        .collect()
}

/// A small camera so attack loops run quickly.
pub fn small_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 45.0,
        fy: 45.0,
        cx: 24.0,
        cy: 16.0,
        width: 48,
        height: 32,
    }
}

pub fn small_config(fusion: FusionMode) -> fuselab_core::DetectorConfig {
    fuselab_core::DetectorConfig {
        fusion,
        backbone_widths: [4, 8, 8, 8],
        branch_widths: [4, 8, 8],
        fuse_width: 8,
        image_height: 32,
        image_width: 48,
    }
}

pub const SMALL_STATS: fuselab_core::DepthStats = fuselab_core::DepthStats {
    depth_mean: 18.0,
    depth_std: 9.0,
};
