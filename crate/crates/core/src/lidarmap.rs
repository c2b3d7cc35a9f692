//! Point cloud → two-channel LiDAR image (dense depth + distance map), with a
//! backward path from map gradients to point coordinates.
//!
//! Forward: points are projected with a per-pixel z-buffer; every pixel then
//! copies the depth of its nearest occupied pixel (Euclidean distance between
//! integer pixel positions, ties to the smaller linear index). The distance
//! channel is the pixel-space distance from the pixel center to the continuous
//! projection of the point that supplied its depth, and 0 at occupied pixels.
//!
//! Backward: the z-buffer winners and nearest-neighbor assignment are held
//! fixed, so depth contributes ∂/∂z = 1 and distance contributes through the
//! projection `u = fx·x/z + cx`, `v = fy·y/z + cy`.

use crate::error::{Error, Result};
use crate::ndlab::Tensor;
use crate::scenegen::CameraIntrinsics;

/// A z-buffer winner: the nearest point landing in an occupied pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub point: usize,
    pub u: f32,
    pub v: f32,
    pub depth: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseHits {
    pub width: usize,
    pub height: usize,
    /// Indexed by linear pixel index `row · width + col`.
    pub pixels: Vec<Option<Hit>>,
}

impl SparseHits {
    pub fn occupied(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_some()).count()
    }
}

/// Depth and distance channels plus the per-pixel source point.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMaps {
    pub width: usize,
    pub height: usize,
    /// Meters (z coordinate of the source point).
    pub depth: Vec<f32>,
    /// Pixels.
    pub distance: Vec<f32>,
    /// Source point index, −1 if the cloud produced no hits at all.
    pub assign: Vec<i32>,
    /// Whether the pixel was directly hit by its source point.
    pub direct: Vec<bool>,
}

/// Depth normalization statistics over a training set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DepthStats {
    pub depth_mean: f64,
    pub depth_std: f64,
}

impl DepthStats {
    pub const IDENTITY: DepthStats = DepthStats {
        depth_mean: 0.0,
        depth_std: 1.0,
    };
}

/// Gradient of a loss with respect to the raw (unnormalized) maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGrad {
    pub depth: Vec<f32>,
    pub distance: Vec<f32>,
}

pub fn project_points(cloud: &[[f32; 3]], intr: &CameraIntrinsics) -> SparseHits {
    let (w, h) = (intr.width, intr.height);
    let mut pixels: Vec<Option<Hit>> = vec![None; w * h];
    for (i, &p) in cloud.iter().enumerate() {
        if !(p[2] > 0.0) || !p.iter().all(|c| c.is_finite()) {
            continue;
        }
        let (u, v) = intr.project(p);
        let (col, row) = (u.floor(), v.floor());
        if !(col >= 0.0 && row >= 0.0 && col < w as f32 && row < h as f32) {
            continue;
        }
        let idx = row as usize * w + col as usize;
        let keep = match pixels[idx] {
            Some(prev) => p[2] < prev.depth,
            None => true,
        };
        if keep {
            pixels[idx] = Some(Hit {
                point: i,
                u,
                v,
                depth: p[2],
            });
        }
    }
    SparseHits {
        width: w,
        height: h,
        pixels,
    }
}

fn pixel_distance(row: usize, col: usize, hit: &Hit) -> f32 {
    let du = col as f32 + 0.5 - hit.u;
    let dv = row as f32 + 0.5 - hit.v;
    (du * du + dv * dv).sqrt()
}

/// Nearest-occupied-pixel interpolation.
///
/// Exact in integer arithmetic: a column pass finds, for every pixel, the
/// nearest occupied row in each column; a row pass then minimizes
/// `(Δcol)² + (Δrow)²` over columns, breaking ties by linear index.
pub fn densify(hits: &SparseHits, height: usize, width: usize) -> Result<DepthMaps> {
    if hits.height != height || hits.width != width {
        return Err(Error::Geometry(format!(
            "hits are {}×{}, maps requested {height}×{width}",
            hits.height, hits.width
        )));
    }
    let n = height * width;
    let mut maps = DepthMaps {
        width,
        height,
        depth: vec![0.0; n],
        distance: vec![0.0; n],
        assign: vec![-1; n],
        direct: vec![false; n],
    };
    if hits.pixels.iter().all(Option::is_none) {
        return Ok(maps);
    }

    // nearest[row * width + col] = nearest occupied row in column `col`
    // (smaller row on ties), or usize::MAX if the column is empty.
    let mut nearest = vec![usize::MAX; n];
    for col in 0..width {
        let mut last: Option<usize> = None;
        for row in 0..height {
            if hits.pixels[row * width + col].is_some() {
                last = Some(row);
            }
            if let Some(r) = last {
                nearest[row * width + col] = r;
            }
        }
        let mut next: Option<usize> = None;
        for row in (0..height).rev() {
            if hits.pixels[row * width + col].is_some() {
                next = Some(row);
            }
            if let Some(r) = next {
                let cur = nearest[row * width + col];
                // Strictly closer below wins; on ties the row above stays.
                if cur == usize::MAX || r - row < row - cur {
                    nearest[row * width + col] = r;
                }
            }
        }
    }

    for row in 0..height {
        for col in 0..width {
            let mut best: Option<(u64, usize)> = None;
            // Scan columns outward; once the column offset alone exceeds the
            // best distance no farther column can win or tie.
            for dc in 0..width {
                let dc2 = (dc * dc) as u64;
                if best.is_some_and(|(d, _)| dc2 > d) {
                    break;
                }
                let left = col.checked_sub(dc);
                let right = Some(col + dc).filter(|&c| dc > 0 && c < width);
                for c in [left, right].into_iter().flatten() {
                    let r = nearest[row * width + c];
                    if r == usize::MAX {
                        continue;
                    }
                    let dr = row.abs_diff(r) as u64;
                    let key = (dc2 + dr * dr, r * width + c);
                    if best.map_or(true, |b| key < b) {
                        best = Some(key);
                    }
                }
            }
            let (_, q) = best.expect("at least one occupied pixel");
            let hit = hits.pixels[q].as_ref().expect("occupied");
            let p = row * width + col;
            maps.depth[p] = hit.depth;
            maps.assign[p] = hit.point as i32;
            maps.direct[p] = q == p;
            maps.distance[p] = if q == p { 0.0 } else { pixel_distance(row, col, hit) };
        }
    }
    Ok(maps)
}

/// Distance between the centers of opposite corner pixels.
pub fn map_diagonal(height: usize, width: usize) -> f32 {
    let d = (((height.max(1) - 1).pow(2) + (width.max(1) - 1).pow(2)) as f32).sqrt();
    d.max(1.0)
}

/// `[(depth − mean) / std, distance / diagonal]` as a 2×H×W tensor.
pub fn normalize_depth(maps: &DepthMaps, stats: &DepthStats) -> Result<Tensor> {
    if !(stats.depth_std > 0.0) || !stats.depth_std.is_finite() {
        return Err(Error::DegenerateStats(stats.depth_std));
    }
    let mean = stats.depth_mean as f32;
    let inv_std = (1.0 / stats.depth_std) as f32;
    let inv_diag = 1.0 / map_diagonal(maps.height, maps.width);
    let mut data = Vec::with_capacity(2 * maps.depth.len());
    data.extend(maps.depth.iter().map(|&d| (d - mean) * inv_std));
    data.extend(maps.distance.iter().map(|&d| d * inv_diag));
    Tensor::new(vec![2, maps.height, maps.width], data)
}

/// Chain rule through [`normalize_depth`].
pub fn normalize_backward(grad: &Tensor, stats: &DepthStats, height: usize, width: usize) -> Result<MapGrad> {
    if grad.shape() != [2, height, width] {
        return Err(Error::shape("normalize_backward", format!("{:?}", grad.shape())));
    }
    let n = height * width;
    let inv_std = (1.0 / stats.depth_std) as f32;
    let inv_diag = 1.0 / map_diagonal(height, width);
    Ok(MapGrad {
        depth: grad.data()[..n].iter().map(|g| g * inv_std).collect(),
        distance: grad.data()[n..].iter().map(|g| g * inv_diag).collect(),
    })
}

/// Gradient of the maps with respect to point coordinates, assignment frozen.
pub fn maps_backward(
    grad: &MapGrad,
    maps: &DepthMaps,
    cloud: &[[f32; 3]],
    intr: &CameraIntrinsics,
) -> Result<Vec<[f32; 3]>> {
    let n = maps.width * maps.height;
    if grad.depth.len() != n || grad.distance.len() != n {
        return Err(Error::shape("maps_backward", format!("{} / {} for {n} pixels", grad.depth.len(), grad.distance.len())));
    }
    let mut out = vec![[0.0f32; 3]; cloud.len()];
    for p in 0..n {
        let Ok(i) = usize::try_from(maps.assign[p]) else { continue };
        let [x, y, z] = cloud[i];
        let g = &mut out[i];
        g[2] += grad.depth[p];

        let gd = grad.distance[p];
        if maps.direct[p] || gd == 0.0 {
            continue;
        }
        let (row, col) = (p / maps.width, p % maps.width);
        let (u, v) = intr.project(cloud[i]);
        let du = u - (col as f32 + 0.5);
        let dv = v - (row as f32 + 0.5);
        let dist = (du * du + dv * dv).sqrt();
        if dist == 0.0 {
            continue;
        }
        // ∂dist/∂u, ∂dist/∂v
        let (su, sv) = (gd * du / dist, gd * dv / dist);
        g[0] += su * intr.fx / z;
        g[1] += sv * intr.fy / z;
        g[2] += -su * intr.fx * x / (z * z) - sv * intr.fy * y / (z * z);
    }
    Ok(out)
}

/// Project, densify and normalize in one go.
pub fn lidar_input(cloud: &[[f32; 3]], intr: &CameraIntrinsics, stats: &DepthStats) -> Result<(Tensor, DepthMaps)> {
    let hits = project_points(cloud, intr);
    let maps = densify(&hits, intr.height, intr.width)?;
    let input = normalize_depth(&maps, stats)?;
    Ok((input, maps))
}
