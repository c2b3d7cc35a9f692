#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fuselab() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fuselab"));
    c.env_remove("FUSELAB_SEED");
    c
}

pub fn run(args: &[&str]) -> Output {
    fuselab().args(args).output().expect("spawn fuselab")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A complete experiment on a 32×48 camera with a narrow network.
pub fn tiny_config(seed: u64) -> serde_json::Value {
    serde_json::json!({
        "seed": seed,
        "dataset": {
            "train_count": 6,
            "val_count": 4,
            "intrinsics": {"fx": 45.0, "fy": 45.0, "cx": 24.0, "cy": 16.0, "width": 48, "height": 32}
        },
        "model": {
            "fusion": "early",
            "backbone_widths": [4, 8, 8, 8],
            "branch_widths": [4, 8, 8],
            "fuse_width": 8,
            "image_height": 32,
            "image_width": 48
        },
        "train": {"epochs": 2, "batch_size": 2},
        "attack": {"steps": 2, "image_budgets": [0.0, 2.0], "lidar_budgets": [0.0, 0.3]}
    })
}

pub fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}
