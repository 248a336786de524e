use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde_json::json;

use dirl_core::attention::{bin_profile, export_overlay, representation_attention, AttentionReport, Which};
use dirl_core::cell_prior::build_cell_prior;
use dirl_core::checkpoint::extractor_from;
use dirl_core::dataset::{read_manifest, DatasetIndex};
use dirl_core::mil::{extract_features as extract, train_mil, FeatureArchive, MilConfig};
use dirl_core::ssl::{pretrain as run_pretrain, DirlConfig, Variant};
use dirl_core::synth::{generate_dataset, SynthConfig};
use dirl_core::{Checkpoint, Error};

use crate::manifest::{write_json, RunManifest};
use crate::{AttentionArgs, ExtractArgs, GenArgs, MilArgs, PretrainArgs};

/// Applies `DIRL_THREADS` to the global worker pool.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DIRL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("DIRL_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot configure worker threads")
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn open_dataset(path: &Path) -> Result<DatasetIndex> {
    require(path, "dataset directory")?;
    DatasetIndex::open(path).with_context(|| format!("cannot open dataset {} (expected manifest.csv and crops/)", path.display()))
}

fn read_extractor(path: &Path) -> Result<Checkpoint> {
    require(path, "checkpoint")?;
    let ck = Checkpoint::read(path)?;
    if ck.meta("kind") != Some("extractor") {
        bail!(
            "{} is a `{}` checkpoint; pass the extractor.ckpt written by pretrain",
            path.display(),
            ck.meta("kind").unwrap_or("unknown")
        );
    }
    Ok(ck)
}

fn check_image_size(cfg: &DirlConfig, w: u32, h: u32) -> Result<()> {
    let e = &cfg.encoder;
    if w as usize != e.image_w || h as usize != e.image_h {
        bail!(
            "dataset crops are {w}x{h} but the encoder expects {}x{} (set encoder.image_w / encoder.image_h)",
            e.image_w,
            e.image_h
        );
    }
    Ok(())
}

pub fn gen_synthetic(a: &GenArgs) -> Result<()> {
    let cfg = SynthConfig {
        image_size: a.image_size,
        density: a.density.clone(),
        clustering: a.clustering.clone(),
        cell_types: a.cell_types,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let non_empty = a.out.is_dir()
        && fs::read_dir(&a.out)
            .with_context(|| format!("cannot list {}", a.out.display()))?
            .next()
            .is_some();
    if non_empty && !a.force {
        bail!("output directory {} is not empty (pass --force to overwrite)", a.out.display());
    }
    create_out(&a.out)?;
    let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    RunManifest::new("gen-synthetic", a.seed)
        .with_config([
            ("crops_per_bag", a.crops_per_bag.to_string()),
            ("bags_per_class", a.bags_per_class.to_string()),
            ("image_size", cfg.image_size.to_string()),
            ("radius_min", cfg.radius_min.to_string()),
            ("radius_max", cfg.radius_max.to_string()),
            ("density", list(&cfg.density)),
            ("clustering", list(&cfg.clustering)),
            ("texture_amplitude", cfg.texture_amplitude.to_string()),
            ("cell_types", cfg.cell_types.to_string()),
        ])
        .write(&a.out)?;
    let bags = generate_dataset(&cfg, a.crops_per_bag, a.bags_per_class, &a.out, true)?;
    println!(
        "{}",
        json!({ "bags": bags.len(), "crops": bags.len() * a.crops_per_bag, "out": a.out })
    );
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let mut cfg = match &a.config {
        Some(p) => {
            require(p, "config file")?;
            DirlConfig::load(p)?
        }
        None => DirlConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = &a.attn_scale {
        cfg.set("encoder.attn_scale", s)?;
    }
    cfg.validate()?;
    let index = open_dataset(&a.data)?;
    create_out(&a.out)?;
    RunManifest::new("pretrain", a.seed)
        .with_config(cfg.to_pairs())
        .with_config([("variant", variant.to_string()), ("aux_cell_count", a.aux_cell_count.to_string())])
        .input("data", &a.data)?
        .write(&a.out)?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let data = index.load_samples()?;
    let first = &data[0].image;
    check_image_size(&cfg, first.width(), first.height())?;
    let result = run_pretrain(&data, &cfg, variant, a.aux_cell_count, a.seed, Some(&a.out))?;
    write_json(&a.out.join("history.json"), &result.history)?;
    let last = result.history.last().map(|h| h.loss);
    println!(
        "{}",
        json!({ "variant": variant.to_string(), "seed": a.seed, "epochs": result.history.len(), "final_loss": last })
    );
    Ok(())
}

fn encoder_pairs(ck: &Checkpoint) -> Vec<(String, String)> {
    ck.meta
        .iter()
        .filter(|(k, _)| k != "kind")
        .cloned()
        .collect()
}

pub fn extract_features(a: &ExtractArgs) -> Result<()> {
    let ck = read_extractor(&a.ckpt)?;
    let (encoder, set) = extractor_from(&ck)?;
    let index = open_dataset(&a.data)?;
    create_out(&a.out)?;
    let seed = ck.meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    RunManifest::new("extract-features", seed)
        .with_config(encoder_pairs(&ck))
        .input("ckpt", &a.ckpt)?
        .input("data", &a.data)?
        .write(&a.out)?;
    if let Some(c) = index.crops.first() {
        let img = dirl_core::Image::load(&c.image)?;
        let e = &encoder.config;
        if img.width() as usize != e.image_w || img.height() as usize != e.image_h {
            bail!(
                "dataset crops are {}x{} but the checkpoint encoder expects {}x{}",
                img.width(),
                img.height(),
                e.image_w,
                e.image_h
            );
        }
    }
    let archive = extract(&encoder, &set, &index)?;
    archive.write(&a.out.join("features.bin"))?;
    println!(
        "{}",
        json!({ "bags": archive.bags.len(), "dim": archive.dim, "crops": index.crops.len() })
    );
    Ok(())
}

pub fn mil(a: &MilArgs) -> Result<()> {
    require(&a.features, "feature archive")?;
    require(&a.manifest, "bag manifest")?;
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = MilConfig {
        epochs: a.epochs,
        lr: a.lr,
        weight_decay: a.weight_decay,
        ..MilConfig::default()
    };
    create_out(&a.out)?;
    RunManifest::new("mil", 0)
        .with_config([
            ("seeds", a.seeds.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("lr", cfg.lr.to_string()),
            ("weight_decay", cfg.weight_decay.to_string()),
            ("val_fraction", cfg.val_fraction.to_string()),
            ("test_fraction", cfg.test_fraction.to_string()),
        ])
        .input("features", &a.features)?
        .input("manifest", &a.manifest)?
        .write(&a.out)?;
    let mut archive = FeatureArchive::read(&a.features)?;
    archive.relabel(&read_manifest(&a.manifest)?)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let summary = train_mil(&archive.bags, &cfg, &seeds)?;
    write_json(&a.out.join("metrics.json"), &summary)?;
    println!(
        "{}",
        json!({ "accuracy": summary.accuracy, "auc": summary.auc, "macro_f1": summary.macro_f1 })
    );
    Ok(())
}

struct CropMaps {
    map: Option<Vec<f64>>,
    heads: Vec<Option<Vec<f64>>>,
}

fn region_map(heads: &[dirl_core::Tensor], prior: &dirl_core::CellPrior, which: Which) -> Result<Option<Vec<f64>>> {
    match representation_attention(heads, prior, which) {
        Ok(m) => Ok(Some(m)),
        Err(Error::EmptyRegion(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn analyze_attention(a: &AttentionArgs) -> Result<()> {
    let which: Which = a.which.parse()?;
    let ck = read_extractor(&a.ckpt)?;
    let (encoder, set) = extractor_from(&ck)?;
    let depth = encoder.config.depth;
    if depth == 0 {
        bail!("checkpoint encoder has no layers to analyze");
    }
    let layer = a.layer.unwrap_or(depth - 1);
    if layer >= depth {
        bail!("--layer {layer} out of range: the encoder has layers 0..={}", depth - 1);
    }
    let index = open_dataset(&a.data)?;
    create_out(&a.out)?;
    let seed = ck.meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let manifest = RunManifest::new("analyze-attention", seed)
        .with_config(encoder_pairs(&ck))
        .with_config([
            ("which", which.to_string()),
            ("layer", layer.to_string()),
            ("per_head", a.per_head.to_string()),
            ("overlays", a.overlays.to_string()),
        ])
        .input("ckpt", &a.ckpt)?
        .input("data", &a.data)?;
    manifest.write(&a.out)?;
    let dataset_id = manifest.inputs[1].hash.clone();
    let model_id = match (ck.meta("variant"), ck.meta("seed")) {
        (Some(v), Some(s)) => format!("{v}-seed{s}"),
        _ => manifest.inputs[0].hash.clone(),
    };

    let samples = index.load_samples()?;
    if let Some(s) = samples.first() {
        let e = &encoder.config;
        if s.image.width() as usize != e.image_w || s.image.height() as usize != e.image_h {
            bail!(
                "dataset crops are {}x{} but the checkpoint encoder expects {}x{}",
                s.image.width(),
                s.image.height(),
                e.image_w,
                e.image_h
            );
        }
    }
    let patch = encoder.config.patch;
    let maps: Vec<CropMaps> = samples
        .par_iter()
        .map(|s| {
            let (_, record) = encoder.encode(&set, &s.image)?;
            let heads = &record.layers[layer];
            let prior = build_cell_prior(&s.centroids, patch)?;
            let map = region_map(heads, &prior, which)?;
            let per = if a.per_head {
                heads
                    .iter()
                    .map(|h| region_map(std::slice::from_ref(h), &prior, which))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            Ok(CropMaps { map, heads: per })
        })
        .collect::<Result<_>>()?;

    let values: Vec<f64> = maps.iter().filter_map(|m| m.map.as_ref()).flatten().copied().collect();
    let skipped = maps.iter().filter(|m| m.map.is_none()).count();
    if values.is_empty() {
        bail!("no crop has a non-empty `{which}` region; try --which agg");
    }
    let report = AttentionReport::new(&model_id, &dataset_id, &bin_profile(&values)?);
    write_json(&a.out.join("profile.json"), &report)?;
    if a.per_head {
        let heads = encoder.config.heads;
        let reports = (0..heads)
            .map(|h| {
                let v: Vec<f64> = maps
                    .iter()
                    .filter_map(|m| m.heads[h].as_ref())
                    .flatten()
                    .copied()
                    .collect();
                Ok(AttentionReport::new(&format!("{model_id}/head{h}"), &dataset_id, &bin_profile(&v)?))
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(&a.out.join("profile_per_head.json"), &reports)?;
    }

    let dir = a.out.join("overlays");
    create_out(&dir)?;
    let mut written = 0;
    for ((crop, sample), m) in index.crops.iter().zip(&samples).zip(&maps) {
        if written == a.overlays {
            break;
        }
        let Some(map) = &m.map else { continue };
        let stem = format!("{}_{}", crop.bag_id, crop.index);
        export_overlay(&sample.image, map, patch, &dir.join(format!("{stem}.png")))?;
        for (h, hm) in m.heads.iter().enumerate() {
            if let Some(hm) = hm {
                export_overlay(&sample.image, hm, patch, &dir.join(format!("{stem}_head{h}.png")))?;
            }
        }
        written += 1;
    }
    println!(
        "{}",
        json!({ "profile": report, "skipped_crops": skipped, "overlays": written })
    );
    Ok(())
}
