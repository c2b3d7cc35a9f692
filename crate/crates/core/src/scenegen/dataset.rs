//! On-disk dataset format.
//!
//! ```text
//! <dir>/manifest.json      intrinsics, seeds, file names, normalization stats, format version
//! <dir>/rgb_<i>.bin        little-endian f32, 3×H×W
//! <dir>/cloud_<i>.bin      little-endian f32, N×3, point-major
//! <dir>/labels_<i>.json    [{"box": [x_min, y_min, x_max, y_max], "class": "car"}, ...]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_scene, CameraIntrinsics, GtBox, Scene, SceneSpec};
use crate::error::{Error, Result};
pub use crate::lidarmap::DepthStats;
use crate::lidarmap::{densify, project_points};
use crate::ndlab::Tensor;
use crate::rng::split_mix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub seed: u64,
    pub rgb: String,
    pub cloud: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: Split,
    pub master_seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub spec: SceneSpec,
    pub scenes: Vec<SceneFiles>,
    /// Present exactly for finalized training splits.
    pub stats: Option<DepthStats>,
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "length is not a multiple of 4"),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_scene(dir: &Path, index: usize, seed: u64, scene: &Scene) -> Result<SceneFiles> {
    let files = SceneFiles {
        seed,
        rgb: format!("rgb_{index}.bin"),
        cloud: format!("cloud_{index}.bin"),
        labels: format!("labels_{index}.json"),
    };
    write_f32s(&dir.join(&files.rgb), scene.rgb.data().iter().copied())?;
    write_f32s(&dir.join(&files.cloud), scene.cloud.iter().flatten().copied())?;
    write_json(&dir.join(&files.labels), &scene.gt)?;
    Ok(files)
}

/// Mean and standard deviation of dense depth over every pixel of every scene.
pub fn depth_statistics<'a>(clouds: impl Iterator<Item = &'a [[f32; 3]]>, intr: &CameraIntrinsics) -> Result<DepthStats> {
    let (mut n, mut sum, mut sum_sq) = (0u64, 0.0f64, 0.0f64);
    for cloud in clouds {
        let maps = densify(&project_points(cloud, intr), intr.height, intr.width)?;
        for &d in &maps.depth {
            n += 1;
            sum += d as f64;
            sum_sq += (d as f64) * (d as f64);
        }
    }
    if n == 0 {
        return Ok(DepthStats::IDENTITY);
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    Ok(DepthStats {
        depth_mean: mean,
        depth_std: var.sqrt(),
    })
}

/// Generates `count` scenes into `out_dir`; scene `i` uses seed
/// `split_mix(master_seed, i)`. Training splits also get depth statistics.
pub fn generate_dataset(
    spec: &SceneSpec,
    intr: &CameraIntrinsics,
    count: usize,
    master_seed: u64,
    split: Split,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    intr.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let scenes: Vec<(SceneFiles, Scene)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = split_mix(master_seed, i as u64);
            let scene = generate_scene(spec, intr, seed)?;
            let files = write_scene(out_dir, i, seed, &scene)?;
            Ok((files, scene))
        })
        .collect::<Result<_>>()?;

    let stats = match split {
        Split::Train => Some(depth_statistics(scenes.iter().map(|(_, s)| s.cloud.as_slice()), intr)?),
        Split::Val => None,
    };
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        split,
        master_seed,
        intrinsics: *intr,
        spec: spec.clone(),
        scenes: scenes.into_iter().map(|(f, _)| f).collect(),
        stats,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A loaded split, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported format version {}",
                dir.display(),
                manifest.format_version
            )));
        }
        let intr = manifest.intrinsics;
        let scenes = manifest
            .scenes
            .iter()
            .map(|f| {
                let rgb = Tensor::new(vec![3, intr.height, intr.width], read_f32s(&dir.join(&f.rgb))?)?;
                let raw = read_f32s(&dir.join(&f.cloud))?;
                if raw.len() % 3 != 0 {
                    return Err(Error::Config(format!("{}: point data is not N×3", f.cloud)));
                }
                let cloud = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                let gt: Vec<GtBox> = read_json(&dir.join(&f.labels))?;
                Ok(Scene { rgb, cloud, gt })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            scenes,
        })
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.manifest.intrinsics
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// An in-memory split, for tests and experiments that skip the disk.
    pub fn in_memory(
        spec: &SceneSpec,
        intr: &CameraIntrinsics,
        count: usize,
        master_seed: u64,
        split: Split,
    ) -> Result<Self> {
        let scenes: Vec<Scene> = (0..count)
            .into_par_iter()
            .map(|i| generate_scene(spec, intr, split_mix(master_seed, i as u64)))
            .collect::<Result<_>>()?;
        let stats = match split {
            Split::Train => Some(depth_statistics(scenes.iter().map(|s| s.cloud.as_slice()), intr)?),
            Split::Val => None,
        };
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            split,
            master_seed,
            intrinsics: *intr,
            spec: spec.clone(),
            scenes: Vec::new(),
            stats,
        };
        Ok(Self {
            dir: PathBuf::new(),
            manifest,
            scenes,
        })
    }
}
