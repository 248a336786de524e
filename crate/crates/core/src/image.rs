//! RGB images as `H × W × 3` row-major `f64` in `[0, 1]`, plus the pixel
//! operations the augmentation pipeline needs.

use std::path::Path;

use crate::cell_prior::CropRect;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 || width == 0 || height == 0 {
            return Err(Error::Data(format!(
                "{} values for a {width}x{height}x3 image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width as usize * height as usize * 3],
        }
    }

    /// Replicates a single-channel buffer into three channels.
    pub fn from_gray(width: u32, height: u32, gray: &[f64]) -> Result<Self> {
        if gray.len() != width as usize * height as usize {
            return Err(Error::Data("gray buffer size mismatch".into()));
        }
        Self::new(
            width,
            height,
            gray.iter().flat_map(|&g| [g, g, g]).collect(),
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, x: u32, y: u32, v: [f64; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    /// Channel mean per pixel.
    pub fn grayscale(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    /// Rounds every value to the nearest multiple of 1/255, matching what an
    /// 8-bit PNG stores.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }

    /// Flattens each `p × p` patch, row-major over patches, into one row of an
    /// `n × (p·p·3)` matrix. Within a patch the order is (row, column, channel).
    pub fn patches(&self, p: usize) -> Result<Tensor> {
        let (w, h) = (self.width as usize, self.height as usize);
        if p == 0 || w % p != 0 || h % p != 0 {
            return Err(Error::Config(format!(
                "image {w}x{h} not divisible by patch size {p}"
            )));
        }
        let (gc, gr) = (w / p, h / p);
        let pd = p * p * 3;
        let mut out = Vec::with_capacity(gc * gr * pd);
        for py in 0..gr {
            for px in 0..gc {
                for y in py * p..(py + 1) * p {
                    let start = (y * w + px * p) * 3;
                    out.extend_from_slice(&self.data[start..start + p * 3]);
                }
            }
        }
        Tensor::new(&[gc * gr, pd], out)
    }

    /// Crops `rect` and resamples it bilinearly (half-pixel centers) to
    /// `out_w × out_h`. Same-size resampling copies pixels exactly.
    pub fn crop_resize(&self, rect: CropRect, out_w: u32, out_h: u32) -> Result<Image> {
        if rect.w == 0
            || rect.h == 0
            || rect.x + rect.w > self.width
            || rect.y + rect.h > self.height
        {
            return Err(Error::Config(format!(
                "crop {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Image::filled(out_w, out_h, 0.0);
        if rect.w == out_w && rect.h == out_h {
            for y in 0..out_h {
                for x in 0..out_w {
                    out.set_pixel(x, y, self.pixel(rect.x + x, rect.y + y));
                }
            }
            return Ok(out);
        }
        let sx = rect.w as f64 / out_w as f64;
        let sy = rect.h as f64 / out_h as f64;
        for v in 0..out_h {
            let fy = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (rect.h - 1) as f64);
            let y0 = fy.floor() as u32;
            let y1 = (y0 + 1).min(rect.h - 1);
            let ty = fy - y0 as f64;
            for u in 0..out_w {
                let fx = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (rect.w - 1) as f64);
                let x0 = fx.floor() as u32;
                let x1 = (x0 + 1).min(rect.w - 1);
                let tx = fx - x0 as f64;
                let p00 = self.pixel(rect.x + x0, rect.y + y0);
                let p10 = self.pixel(rect.x + x1, rect.y + y0);
                let p01 = self.pixel(rect.x + x0, rect.y + y1);
                let p11 = self.pixel(rect.x + x1, rect.y + y1);
                let mut px = [0.0; 3];
                for c in 0..3 {
                    let top = p00[c] * (1.0 - tx) + p10[c] * tx;
                    let bot = p01[c] * (1.0 - tx) + p11[c] * tx;
                    px[c] = top * (1.0 - ty) + bot * ty;
                }
                out.set_pixel(u, v, px);
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, self.height - 1 - y, self.pixel(x, y));
            }
        }
        out
    }

    /// `clamp(((v - mean) · contrast + mean) · brightness)`, mean over the image.
    pub fn jitter(&self, brightness: f64, contrast: f64) -> Image {
        let mean = self.data.iter().sum::<f64>() / self.data.len() as f64;
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| (((v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0))
                .collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|&v| to_u8(v)).collect();
        image::RgbImage::from_raw(self.width, self.height, bytes).expect("buffer sized by shape")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        Image {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
