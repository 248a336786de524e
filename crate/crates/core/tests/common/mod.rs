#![allow(dead_code)]

use std::collections::BTreeMap;

use dirl_core::cell_prior::{Centroid, CentroidMap};
use dirl_core::ssl::loss::sharpen_and_center;
use dirl_core::ssl::model::ViewData;
use dirl_core::ssl::{DirlConfig, DirlModel, RepKey, Variant};
use dirl_core::{Image, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// n = 4 tokens, d = 8, two encoder blocks, K = 7 for every head.
pub fn toy_config() -> DirlConfig {
    let mut cfg = DirlConfig::default();
    cfg.encoder.image_w = 8;
    cfg.encoder.image_h = 8;
    cfg.encoder.patch = 4;
    cfg.encoder.dim = 8;
    cfg.encoder.depth = 2;
    cfg.encoder.heads = 2;
    cfg.encoder.mlp_ratio = 2.0;
    cfg.heads.hidden = 6;
    cfg.heads.bottleneck = 5;
    cfg.heads.k_region = 7;
    cfg.heads.k_dis = 7;
    cfg
}

pub fn random_image(w: u32, h: u32, rng: &mut impl Rng) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
}

/// Two views with different, partially filled priors.
pub fn toy_views(cfg: &DirlConfig, seed: u64) -> [ViewData; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.encoder.patch;
    let j = Some(cfg.cell_types);
    let cm0 = CentroidMap::new(8, 8, vec![Centroid { x: 1, y: 1, class_id: 0 }]).unwrap();
    let cm1 = CentroidMap::new(
        8,
        8,
        vec![Centroid { x: 6, y: 1, class_id: 1 }, Centroid { x: 2, y: 6, class_id: 0 }],
    )
    .unwrap();
    [
        ViewData::new(random_image(8, 8, &mut rng), &cm0, p, j).unwrap(),
        ViewData::new(random_image(8, 8, &mut rng), &cm1, p, j).unwrap(),
    ]
}

pub fn perturbed(set: &ParamSet, scale: f64, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.clone();
    for t in out.tensors_mut() {
        for v in t.data_mut() {
            *v += scale * (rng.random::<f64>() - 0.5);
        }
    }
    out
}

/// Sharpened, centered teacher outputs for both views.
pub fn teacher_targets(
    model: &DirlModel,
    teacher: &ParamSet,
    views: &[ViewData; 2],
    cfg: &DirlConfig,
    centers: &BTreeMap<RepKey, Tensor>,
) -> [BTreeMap<RepKey, Vec<f64>>; 2] {
    let mut out = [BTreeMap::new(), BTreeMap::new()];
    for v in 0..2 {
        for (k, z) in model.logits(teacher, &views[v]).unwrap() {
            if let Some(z) = z {
                let c = centers.get(&k).map(|c| c.data());
                out[v].insert(k, sharpen_and_center(&z, cfg.temps.teacher, c).unwrap());
            }
        }
    }
    out
}

pub fn toy_model(variant: Variant, aux: bool, seed: u64) -> (DirlConfig, DirlModel, ParamSet) {
    let cfg = toy_config();
    let mut set = ParamSet::new();
    let model = DirlModel::init(&mut set, &cfg, variant, aux, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // Larger weights than the 0.02 init so every path carries signal.
    let set = perturbed(&set, 0.6, seed + 100);
    (cfg, model, set)
}
