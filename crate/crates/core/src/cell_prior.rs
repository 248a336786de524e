//! Patch-level cell priors built from centroid annotations.
//!
//! Patches are indexed row-major: a pixel `(x, y)` belongs to patch
//! `floor(y / p) * (w / p) + floor(x / p)`, the same order the encoder uses
//! when it tokenizes an image.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Centroid {
    pub x: u32,
    pub y: u32,
    pub class_id: u32,
}

/// Cell centroids of one image, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CentroidMap {
    image_w: u32,
    image_h: u32,
    centroids: Vec<Centroid>,
}

impl CentroidMap {
    pub fn new(image_w: u32, image_h: u32, centroids: Vec<Centroid>) -> Result<Self> {
        if image_w == 0 || image_h == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if let Some(c) = centroids
            .iter()
            .find(|c| c.x >= image_w || c.y >= image_h)
        {
            return Err(Error::Data(format!(
                "centroid ({}, {}) outside {image_w}x{image_h} image",
                c.x, c.y
            )));
        }
        Ok(CentroidMap {
            image_w,
            image_h,
            centroids,
        })
    }

    pub fn empty(image_w: u32, image_h: u32) -> Self {
        CentroidMap {
            image_w,
            image_h,
            centroids: Vec::new(),
        }
    }

    pub fn image_w(&self) -> u32 {
        self.image_w
    }

    pub fn image_h(&self) -> u32 {
        self.image_h
    }

    pub fn centroids(&self) -> &[Centroid] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Writes `x,y,class_id` rows under a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,class_id\n");
        for c in &self.centroids {
            let _ = writeln!(s, "{},{},{}", c.x, c.y, c.class_id);
        }
        s
    }

    /// Parses the CSV produced by [`CentroidMap::to_csv`]. The image size is
    /// not part of the file and must be supplied.
    pub fn from_csv(text: &str, image_w: u32, image_h: u32) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some("x,y,class_id") => {}
            other => {
                return Err(Error::Data(format!(
                    "expected header `x,y,class_id`, found {other:?}"
                )))
            }
        }
        let mut centroids = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| {
                s.parse::<u32>()
                    .map_err(|e| Error::Data(format!("line {}: `{s}`: {e}", i + 2)))
            };
            if fields.len() != 3 {
                return Err(Error::Data(format!(
                    "line {}: expected 3 fields, found {}",
                    i + 2,
                    fields.len()
                )));
            }
            centroids.push(Centroid {
                x: parse(fields[0])?,
                y: parse(fields[1])?,
                class_id: parse(fields[2])?,
            });
        }
        Self::new(image_w, image_h, centroids)
    }

    pub fn read_csv(path: &Path, image_w: u32, image_h: u32) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, image_w, image_h).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Token grid geometry for a patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub cols: usize,
    pub rows: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(image_w: u32, image_h: u32, patch: usize) -> Result<Self> {
        if patch == 0 || image_w as usize % patch != 0 || image_h as usize % patch != 0 {
            return Err(Error::Config(format!(
                "image {image_w}x{image_h} not divisible by patch size {patch}"
            )));
        }
        Ok(PatchGrid {
            cols: image_w as usize / patch,
            rows: image_h as usize / patch,
            patch,
        })
    }

    pub fn tokens(&self) -> usize {
        self.cols * self.rows
    }

    pub fn index(&self, x: u32, y: u32) -> usize {
        (y as usize / self.patch) * self.cols + x as usize / self.patch
    }
}

/// Binary per-token indicator of cell presence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellPrior {
    bits: Vec<bool>,
}

impl CellPrior {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        CellPrior { bits }
    }

    pub fn all(n: usize, value: bool) -> Self {
        CellPrior {
            bits: vec![value; n],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn n(&self) -> usize {
        self.bits.len()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn cell_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Indices of tokens marked 1.
    pub fn cell_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Indices of tokens marked 0.
    pub fn back_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    pub fn complement(&self) -> CellPrior {
        CellPrior {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// One prior per cell class plus the shared background prior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPriorSet {
    pub classes: Vec<CellPrior>,
    pub background: CellPrior,
}

/// Number of centroids falling in each patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellCountTarget {
    pub counts: Vec<u32>,
}

impl CellCountTarget {
    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

pub fn build_cell_counts(cm: &CentroidMap, patch: usize) -> Result<CellCountTarget> {
    let grid = PatchGrid::new(cm.image_w, cm.image_h, patch)?;
    let mut counts = vec![0u32; grid.tokens()];
    for c in &cm.centroids {
        counts[grid.index(c.x, c.y)] += 1;
    }
    Ok(CellCountTarget { counts })
}

pub fn build_cell_prior(cm: &CentroidMap, patch: usize) -> Result<CellPrior> {
    let grid = PatchGrid::new(cm.image_w, cm.image_h, patch)?;
    let mut bits = vec![false; grid.tokens()];
    for c in &cm.centroids {
        bits[grid.index(c.x, c.y)] = true;
    }
    Ok(CellPrior { bits })
}

/// Per-class priors; priors may overlap, and the background marks tokens
/// holding no centroid of any class.
pub fn build_class_priors(cm: &CentroidMap, patch: usize, classes: usize) -> Result<ClassPriorSet> {
    let grid = PatchGrid::new(cm.image_w, cm.image_h, patch)?;
    if let Some(c) = cm.centroids.iter().find(|c| c.class_id as usize >= classes) {
        return Err(Error::Data(format!(
            "centroid class {} not below class count {classes}",
            c.class_id
        )));
    }
    let n = grid.tokens();
    let mut per_class = vec![vec![false; n]; classes];
    let mut any = vec![false; n];
    for c in &cm.centroids {
        let i = grid.index(c.x, c.y);
        per_class[c.class_id as usize][i] = true;
        any[i] = true;
    }
    Ok(ClassPriorSet {
        classes: per_class.into_iter().map(CellPrior::from_bits).collect(),
        background: CellPrior::from_bits(any.into_iter().map(|b| !b).collect()),
    })
}

/// Integer pixel rectangle `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Geometric part of an augmentation: crop, resize to `out_w × out_h`, then
/// optional flips in the output frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricAug {
    pub crop: CropRect,
    pub out_w: u32,
    pub out_h: u32,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl GeometricAug {
    pub fn identity(w: u32, h: u32) -> Self {
        GeometricAug {
            crop: CropRect { x: 0, y: 0, w, h },
            out_w: w,
            out_h: h,
            flip_h: false,
            flip_v: false,
        }
    }
}

/// Maps a source pixel index into a resized axis.
///
/// The pixel center `x + 0.5` is scaled by `out / src`, and the destination
/// pixel containing the scaled center is returned, i.e. the continuous
/// coordinate `(x + 0.5)·s − 0.5` rounded half up.
pub fn resize_coord(x: u32, src: u32, out: u32) -> u32 {
    let scaled = ((2 * x as u64 + 1) * out as u64) / (2 * src as u64);
    (scaled as u32).min(out - 1)
}

/// Applies `aug` to centroid coordinates. Centroids outside the crop are
/// dropped.
pub fn transform_centroids(cm: &CentroidMap, aug: &GeometricAug) -> Result<CentroidMap> {
    let r = aug.crop;
    if r.w == 0 || r.h == 0 || aug.out_w == 0 || aug.out_h == 0 {
        return Err(Error::Config("empty crop or output size".into()));
    }
    if r.x + r.w > cm.image_w || r.y + r.h > cm.image_h {
        return Err(Error::Config(format!(
            "crop {r:?} exceeds {}x{} image",
            cm.image_w, cm.image_h
        )));
    }
    let centroids = cm
        .centroids
        .iter()
        .filter(|c| c.x >= r.x && c.x < r.x + r.w && c.y >= r.y && c.y < r.y + r.h)
        .map(|c| {
            let mut x = resize_coord(c.x - r.x, r.w, aug.out_w);
            let mut y = resize_coord(c.y - r.y, r.h, aug.out_h);
            if aug.flip_h {
                x = aug.out_w - 1 - x;
            }
            if aug.flip_v {
                y = aug.out_h - 1 - y;
            }
            Centroid {
                x,
                y,
                class_id: c.class_id,
            }
        })
        .collect();
    CentroidMap::new(aug.out_w, aug.out_h, centroids)
}
