//! Synthetic tissue-like crops with planted cell centroids.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::cell_prior::{Centroid, CentroidMap};
use crate::dataset::{write_manifest, BagEntry, MANIFEST};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: u32,
    /// Range of the Gaussian blob radius (standard deviation, pixels).
    pub radius_min: f64,
    pub radius_max: f64,
    /// Poisson mean of the cell count, per bag class.
    pub density: Vec<f64>,
    /// 0 = uniform placement, 1 = every cell in a cluster; per bag class.
    pub clustering: Vec<f64>,
    pub texture_amplitude: f64,
    pub cell_types: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 32,
            radius_min: 1.0,
            radius_max: 2.0,
            density: vec![4.0, 9.0],
            clustering: vec![0.0, 0.8],
            texture_amplitude: 0.2,
            cell_types: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn classes(&self) -> usize {
        self.density.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.density.is_empty() || self.density.len() != self.clustering.len() {
            return Err(Error::Config("density and clustering need one entry per class".into()));
        }
        if self.density.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Config("densities must be finite and non-negative".into()));
        }
        if self.clustering.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("clustering factors must lie in [0, 1]".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config("radius range must be positive and ordered".into()));
        }
        if self.cell_types == 0 {
            return Err(Error::Config("at least one cell type is required".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_amplitude) {
            return Err(Error::Config("texture amplitude must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Bilinear value noise on a coarse lattice with smoothstep weights.
fn value_noise(size: u32, cells: usize, rng: &mut impl Rng) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random()).collect();
    let s = size as usize;
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let fx = (x as f64 + 0.5) / s as f64 * cells as f64;
            let fy = (y as f64 + 0.5) / s as f64 * cells as f64;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(fx - x0 as f64), smooth(fy - y0 as f64));
            let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// One crop of bag class `class`: returns the quantized image and the exact
/// planted centroids.
pub fn generate_crop(cfg: &SynthConfig, class: usize, rng: &mut impl Rng) -> Result<(Image, CentroidMap)> {
    cfg.validate()?;
    if class >= cfg.classes() {
        return Err(Error::Config(format!("class {class} but only {} configured", cfg.classes())));
    }
    let size = cfg.image_size;
    let sf = size as f64;
    let mut gray: Vec<f64> = value_noise(size, 4, rng)
        .into_iter()
        .map(|v| 0.78 + cfg.texture_amplitude * (v - 0.5))
        .collect();

    let density = cfg.density[class];
    let count = if density > 0.0 {
        Poisson::new(density).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    let count = count.max(1);
    let clustering = cfg.clustering[class];
    let parents: Vec<(f64, f64)> = (0..count.div_ceil(5))
        .map(|_| (rng.random::<f64>() * sf, rng.random::<f64>() * sf))
        .collect();
    let spread = Normal::new(0.0, (0.08 * sf).max(1.0)).expect("positive sd");

    let mut centroids = Vec::with_capacity(count);
    for _ in 0..count {
        let clustered = rng.random::<f64>() < clustering;
        let parent = parents[rng.random_range(0..parents.len())];
        let (mut x, mut y) = (rng.random::<f64>() * sf, rng.random::<f64>() * sf);
        if clustered {
            x = (parent.0 + spread.sample(rng)).clamp(0.0, sf - 1e-9);
            y = (parent.1 + spread.sample(rng)).clamp(0.0, sf - 1e-9);
        }
        let class_id = rng.random_range(0..cfg.cell_types) as u32;
        let radius = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * rng.random::<f64>();
        let (px, py) = (x.floor() as u32, y.floor() as u32);
        centroids.push(Centroid { x: px, y: py, class_id });

        // Darker, tighter nuclei for even types; paler, larger ones for odd.
        let (depth, r) = if class_id % 2 == 0 { (0.55, radius) } else { (0.4, radius * 1.3) };
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        let reach = (3.0 * r).ceil() as i64;
        for yy in (py as i64 - reach).max(0)..(py as i64 + reach + 1).min(size as i64) {
            for xx in (px as i64 - reach).max(0)..(px as i64 + reach + 1).min(size as i64) {
                let dx = xx as f64 + 0.5 - cx;
                let dy = yy as f64 + 0.5 - cy;
                let g = (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                let v = &mut gray[yy as usize * size as usize + xx as usize];
                *v -= depth * g;
            }
        }
    }
    for v in gray.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let image = Image::from_gray(size, size, &gray)?.quantized();
    Ok((image, CentroidMap::new(size, size, centroids)?))
}

/// Bag identifier for the `k`-th bag overall.
pub fn bag_id(k: usize) -> String {
    format!("bag{k:04}")
}

/// Writes `bags_per_class · classes` bags of `crops_per_bag` crops under
/// `root`. Bags alternate classes so any prefix is roughly balanced. A
/// non-empty `root` is refused unless `force`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    crops_per_bag: usize,
    bags_per_class: usize,
    root: &Path,
    force: bool,
) -> Result<Vec<BagEntry>> {
    cfg.validate()?;
    if crops_per_bag == 0 || bags_per_class == 0 {
        return Err(Error::Config("crops per bag and bags per class must be positive".into()));
    }
    if root.exists() {
        let non_empty = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                root.display()
            )));
        }
        for sub in ["crops", "centroids"] {
            let p = root.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let classes = cfg.classes();
    let bags: Vec<BagEntry> = (0..classes * bags_per_class)
        .map(|k| BagEntry {
            bag_id: bag_id(k),
            label: (k % classes) as u32,
        })
        .collect();
    for b in &bags {
        for sub in ["crops", "centroids"] {
            let p = root.join(sub).join(&b.bag_id);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let jobs: Vec<(usize, usize)> = (0..bags.len())
        .flat_map(|k| (0..crops_per_bag).map(move |i| (k, i)))
        .collect();
    jobs.par_iter().try_for_each(|&(k, i)| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, k as u64, i as u64));
        let (img, cm) = generate_crop(cfg, bags[k].label as usize, &mut rng)?;
        let id = &bags[k].bag_id;
        img.save_png(&root.join("crops").join(id).join(format!("{i}.png")))?;
        cm.write_csv(&root.join("centroids").join(id).join(format!("{i}.csv")))
    })?;
    write_manifest(&root.join(MANIFEST), &bags)?;
    Ok(bags)
}
