//! Two-view augmentation with the geometric part mirrored onto centroids.

use rand::Rng;

use crate::cell_prior::{transform_centroids, CentroidMap, CropRect, GeometricAug};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugConfig {
    /// Range of the crop area as a fraction of the image area.
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            scale_min: 0.4,
            scale_max: 1.0,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
        }
    }
}

impl AugConfig {
    pub fn identity() -> Self {
        AugConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range [{}, {}] must lie in (0, 1]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability outside [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config("jitter strengths must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One augmented view.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub centroids: CentroidMap,
    pub geometry: GeometricAug,
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub views: [View; 2],
}

fn sample_view(image: &Image, cm: &CentroidMap, cfg: &AugConfig, rng: &mut impl Rng) -> Result<View> {
    let (w, h) = (image.width(), image.height());
    // A fixed number of draws per view keeps streams aligned across configs.
    let scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * rng.random::<f64>();
    let ux: f64 = rng.random();
    let uy: f64 = rng.random();
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let bf = 1.0 + cfg.brightness * (2.0 * rng.random::<f64>() - 1.0);
    let cf = 1.0 + cfg.contrast * (2.0 * rng.random::<f64>() - 1.0);

    let side = ((scale * w as f64 * h as f64).sqrt().round() as u32).clamp(1, w.min(h));
    let x = ((w - side + 1) as f64 * ux).floor() as u32;
    let y = ((h - side + 1) as f64 * uy).floor() as u32;
    let geometry = GeometricAug {
        crop: CropRect {
            x: x.min(w - side),
            y: y.min(h - side),
            w: side,
            h: side,
        },
        out_w: w,
        out_h: h,
        flip_h: flip,
        flip_v: false,
    };
    let mut img = image.crop_resize(geometry.crop, w, h)?;
    if flip {
        img = img.flip_horizontal();
    }
    if bf != 1.0 || cf != 1.0 {
        img = img.jitter(bf, cf);
    }
    Ok(View {
        image: img,
        centroids: transform_centroids(cm, &geometry)?,
        geometry,
        brightness: bf,
        contrast: cf,
    })
}

/// Draws two independent views. Crops are square, resized back to the input
/// size; jitter touches only the pixels.
pub fn make_views(image: &Image, cm: &CentroidMap, cfg: &AugConfig, rng: &mut impl Rng) -> Result<ViewPair> {
    cfg.validate()?;
    if cm.image_w() != image.width() || cm.image_h() != image.height() {
        return Err(Error::Data(format!(
            "centroid map is {}x{} but image is {}x{}",
            cm.image_w(),
            cm.image_h(),
            image.width(),
            image.height()
        )));
    }
    let a = sample_view(image, cm, cfg, rng)?;
    let b = sample_view(image, cm, cfg, rng)?;
    Ok(ViewPair { views: [a, b] })
}
