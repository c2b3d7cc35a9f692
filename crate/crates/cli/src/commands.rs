use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fuselab_core::advtrain::{lr_at, Trainer};
use fuselab_core::evalkit::{
    evaluate_map, pert_file_name, robustness_curve, scene_perturbation, transfer_curve, PerturbationSource,
};
use fuselab_core::scenegen::generate_dataset;
use fuselab_core::{
    ApResult, AtVariant, AttackSpec, Dataset, DepthStats, Detector, DetectorConfig, FusionMode, ObjectClass, ParamStore,
    Split,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AttackKind, ExperimentConfig};
use crate::UsageError;

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to rebuild a checkpoint's model and inputs.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    tool_version: String,
    config: ExperimentConfig,
    model: DetectorConfig,
    stats: DepthStats,
    init: Option<String>,
    checkpoint_sha256: String,
}

#[derive(Serialize)]
struct Sidecar<'a, T: Serialize> {
    tool_version: &'a str,
    command: &'a str,
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    details: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar<T: Serialize>(path: &Path, command: &str, config: &ExperimentConfig, details: T) -> anyhow::Result<()> {
    write_json(
        path,
        &Sidecar {
            tool_version: VERSION,
            command,
            config,
            details,
        },
    )
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// `data/<split>` when it holds a manifest, otherwise `data` itself.
fn split_dir(data: &Path, split: Split) -> PathBuf {
    let nested = data.join(split.name());
    if nested.join("manifest.json").exists() {
        nested
    } else {
        data.to_path_buf()
    }
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

struct LoadedModel {
    model: Detector,
    stats: DepthStats,
    sha256: String,
}

fn load_model(checkpoint: &Path) -> anyhow::Result<LoadedModel> {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let meta_file = meta_path(checkpoint);
    let text = fs::read_to_string(&meta_file).with_context(|| format!("reading {}", meta_file.display()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("{}: malformed checkpoint metadata: {e}", meta_file.display())))?;
    let sha256 = sha256_hex(&bytes);
    if sha256 != meta.checkpoint_sha256 {
        return Err(UsageError(format!("{} does not match the hash recorded in its metadata", checkpoint.display())).into());
    }
    let params = ParamStore::from_bytes(&bytes)?;
    let model = Detector::from_params(meta.model, params)?;
    Ok(LoadedModel {
        model,
        stats: meta.stats,
        sha256,
    })
}

fn load_val(data: &Path, model: &Detector) -> anyhow::Result<Dataset> {
    let ds = Dataset::load(&split_dir(data, Split::Val))?;
    let intr = ds.intrinsics();
    if (intr.height, intr.width) != (model.config.image_height, model.config.image_width) {
        return Err(UsageError(format!(
            "checkpoint expects {}×{} images, data has {}×{}",
            model.config.image_height, model.config.image_width, intr.height, intr.width
        ))
        .into());
    }
    Ok(ds)
}

#[derive(Serialize)]
struct MapSummary {
    map: f64,
    ap_car: Option<f64>,
    ap_pedestrian: Option<f64>,
    ap_cyclist: Option<f64>,
}

impl From<&ApResult> for MapSummary {
    fn from(r: &ApResult) -> Self {
        Self {
            map: r.map,
            ap_car: r.ap(ObjectClass::Car),
            ap_pedestrian: r.ap(ObjectClass::Pedestrian),
            ap_cyclist: r.ap(ObjectClass::Cyclist),
        }
    }
}

pub fn gen_data(config: &Path, out: &Path, count: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(n) = count {
        cfg.dataset.train_count = n;
        cfg.dataset.val_count = n;
    }
    create_dir(out)?;
    let d = &cfg.dataset;
    for (split, n) in [(Split::Train, d.train_count), (Split::Val, d.val_count)] {
        let dir = out.join(split.name());
        let m = generate_dataset(&d.scene, &d.intrinsics, n, cfg.data_seed(split), split, &dir)?;
        println!("{}: {} scenes in {}", split.name(), m.scenes.len(), dir.display());
    }
    sidecar(&out.join("gen-data.json"), "gen-data", &cfg, serde_json::json!({}))
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    fusion: Option<FusionMode>,
    at_variant: Option<AtVariant>,
    epochs: Option<usize>,
    init: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?.with_fusion(fusion);
    if let Some(v) = at_variant {
        cfg.train.at_variant = v;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = Some(e);
    }
    cfg.validate()?;
    let train_cfg = cfg.train_config();

    let train_ds = Dataset::load(&split_dir(data, Split::Train))?;
    let (mut trainer, init_sha) = match init {
        Some(path) => {
            let loaded = load_model(path)?;
            if loaded.model.config != cfg.model {
                return Err(UsageError(format!(
                    "{} holds a {} model, the config asks for {}",
                    path.display(),
                    loaded.model.config.fusion.name(),
                    cfg.model.fusion.name()
                ))
                .into());
            }
            (Trainer::from_model(loaded.model, &train_ds, train_cfg.clone())?, Some(loaded.sha256))
        }
        None => (Trainer::new(cfg.model.clone(), &train_ds, train_cfg.clone())?, None),
    };

    let steps = trainer.steps_per_epoch();
    let total = steps * train_cfg.epochs;
    println!("epoch,loss_total,loss_obj,loss_cls,loss_reg,lr");
    let mut report = trainer.run(|e| {
        let lr = lr_at((e.epoch + 1) * steps - 1, total, &train_cfg.schedule);
        println!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            e.epoch, e.total, e.objectness, e.class, e.regression, lr
        );
    })?;
    let stats = trainer.stats();
    let val_dir = split_dir(data, Split::Val);
    if val_dir != split_dir(data, Split::Train) && val_dir.join("manifest.json").exists() {
        let val = Dataset::load(&val_dir)?;
        if !val.is_empty() {
            let r = evaluate_map(&trainer.model, &val, &stats, PerturbationSource::Clean, &cfg.eval)?;
            println!("val mAP {:.4}", r.map);
            report.val_map = Some(r.map);
        }
    }

    create_dir(out)?;
    let ckpt = out.join("model.ckpt");
    let bytes = trainer.model.params.to_bytes();
    fs::write(&ckpt, &bytes).with_context(|| format!("writing {}", ckpt.display()))?;
    write_json(
        &meta_path(&ckpt),
        &CheckpointMeta {
            tool_version: VERSION.into(),
            config: cfg.clone(),
            model: cfg.model.clone(),
            stats,
            init: init_sha,
            checkpoint_sha256: sha256_hex(&bytes),
        },
    )?;
    write_json(&out.join("report.json"), &report)
}

pub fn attack(config: &Path, checkpoint: &Path, data: &Path, out: &Path, kind: Option<AttackKind>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let kind = kind.unwrap_or(cfg.attack.kind);
    let loaded = load_model(checkpoint)?;
    let val = load_val(data, &loaded.model)?;
    let spec = cfg.attack_spec(kind);
    let intr = val.intrinsics();
    create_dir(out)?;

    val.scenes
        .par_iter()
        .enumerate()
        .try_for_each(|(i, scene)| -> anyhow::Result<()> {
            let p = scene_perturbation(
                &loaded.model,
                scene,
                i,
                &intr,
                &loaded.stats,
                PerturbationSource::WhiteBox(&spec),
            )?
            .expect("white-box source always perturbs");
            p.save(&out.join(pert_file_name(i)))?;
            Ok(())
        })?;

    let clean = evaluate_map(&loaded.model, &val, &loaded.stats, PerturbationSource::Clean, &cfg.eval)?;
    let attacked = evaluate_map(&loaded.model, &val, &loaded.stats, PerturbationSource::Stored(out), &cfg.eval)?;
    println!("clean mAP {:.4}, attacked mAP {:.4}", clean.map, attacked.map);
    sidecar(
        &out.join("attack.json"),
        "attack",
        &cfg,
        serde_json::json!({
            "attack": kind,
            "spec": spec,
            "checkpoint_sha256": loaded.sha256,
            "scenes": val.len(),
            "clean": MapSummary::from(&clean),
            "attacked": MapSummary::from(&attacked),
        }),
    )
}

pub fn eval(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    attack: Option<AttackKind>,
    perturbations: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let loaded = load_model(checkpoint)?;
    let val = load_val(data, &loaded.model)?;
    let spec: Option<AttackSpec> = attack.map(|k| cfg.attack_spec(k));
    let source = match (&spec, perturbations) {
        (Some(s), _) => PerturbationSource::WhiteBox(s),
        (None, Some(dir)) => PerturbationSource::Stored(dir),
        (None, None) => PerturbationSource::Clean,
    };
    let r = evaluate_map(&loaded.model, &val, &loaded.stats, source, &cfg.eval)?;
    let summary = MapSummary::from(&r);
    println!("{}", serde_json::to_string(&summary)?);
    if let Some(path) = out {
        sidecar(
            path,
            "eval",
            &cfg,
            serde_json::json!({
                "checkpoint_sha256": loaded.sha256,
                "attack": spec,
                "perturbations": perturbations,
                "result": summary,
            }),
        )?;
    }
    Ok(())
}

pub fn curve(config: &Path, checkpoint: &Path, data: &Path, out: &Path, kind: Option<AttackKind>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let kind = kind.unwrap_or(cfg.attack.kind);
    let loaded = load_model(checkpoint)?;
    let val = load_val(data, &loaded.model)?;
    let spec = cfg.attack_spec(kind);
    let axis = kind.axis();
    let budgets = cfg.budgets(axis);
    let curve = robustness_curve(&loaded.model, &val, &loaded.stats, &spec, axis, budgets, &cfg.eval)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    curve.write_csv(out)?;
    print!("{}", curve.to_csv());
    sidecar(
        &out.with_extension("json"),
        "curve",
        &cfg,
        serde_json::json!({
            "attack": kind,
            "checkpoint_sha256": loaded.sha256,
            "curve": curve,
        }),
    )
}

pub fn transfer(
    config: &Path,
    source: &Path,
    target: &Path,
    data: &Path,
    out: &Path,
    kind: Option<AttackKind>,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let kind = kind.unwrap_or(cfg.attack.kind);
    let src = load_model(source)?;
    let tgt = load_model(target)?;
    let val = load_val(data, &tgt.model)?;
    let spec = cfg.attack_spec(kind);
    let axis = kind.axis();
    let curve = transfer_curve(
        &src.model,
        &tgt.model,
        &val,
        &tgt.stats,
        &spec,
        axis,
        cfg.budgets(axis),
        &cfg.eval,
    )
    .map_err(|e| match e {
        fuselab_core::Error::Geometry(msg) => anyhow::Error::new(UsageError(msg)),
        other => other.into(),
    })?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, curve.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", curve.to_csv());
    sidecar(
        &out.with_extension("json"),
        "transfer",
        &cfg,
        serde_json::json!({
            "attack": kind,
            "source_sha256": src.sha256,
            "target_sha256": tgt.sha256,
            "curve": curve,
        }),
    )
}
