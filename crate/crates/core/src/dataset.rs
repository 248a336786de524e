//! On-disk crop datasets: `crops/<bag>/<idx>.png`, `centroids/<bag>/<idx>.csv`
//! and a `manifest.csv` of `bag_id,label`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cell_prior::CentroidMap;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST: &str = "manifest.csv";

/// A crop with its centroids, ready for pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub image: Image,
    pub centroids: CentroidMap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagEntry {
    pub bag_id: String,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropRecord {
    pub bag_id: String,
    pub index: usize,
    pub image: PathBuf,
    pub centroids: PathBuf,
}

pub fn manifest_to_csv(bags: &[BagEntry]) -> String {
    let mut s = String::from("bag_id,label\n");
    for b in bags {
        s.push_str(&format!("{},{}\n", b.bag_id, b.label));
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<BagEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("bag_id,label") {
        return Err(Error::format(path, "expected header `bag_id,label`"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("line {}: expected 2 fields", i + 2)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad label `{label}`", i + 2)))?;
        out.push(BagEntry {
            bag_id: id.trim().to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, bags: &[BagEntry]) -> Result<()> {
    std::fs::write(path, manifest_to_csv(bags)).map_err(|e| Error::io(path, e))
}

/// Index of a dataset directory; crops are ordered by manifest row, then by
/// numeric crop index.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub bags: Vec<BagEntry>,
    pub crops: Vec<CropRecord>,
}

impl DatasetIndex {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let bags = read_manifest(&root.join(MANIFEST))?;
        let mut crops = Vec::new();
        for bag in &bags {
            let dir = root.join("crops").join(&bag.bag_id);
            let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut idx = Vec::new();
            for entry in entries {
                let p = entry.map_err(|e| Error::io(&dir, e))?.path();
                if p.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                let i: usize = stem
                    .parse()
                    .map_err(|_| Error::format(&p, "crop file name is not an index"))?;
                idx.push(i);
            }
            if idx.is_empty() {
                return Err(Error::format(&dir, "bag has no crops"));
            }
            idx.sort_unstable();
            for i in idx {
                crops.push(CropRecord {
                    bag_id: bag.bag_id.clone(),
                    index: i,
                    image: dir.join(format!("{i}.png")),
                    centroids: root.join("centroids").join(&bag.bag_id).join(format!("{i}.csv")),
                });
            }
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            bags,
            crops,
        })
    }

    pub fn load_images(&self) -> Result<Vec<Image>> {
        self.crops.par_iter().map(|c| Image::load(&c.image)).collect()
    }

    pub fn load_samples(&self) -> Result<Vec<CropSample>> {
        self.crops
            .par_iter()
            .map(|c| {
                let image = Image::load(&c.image)?;
                let centroids = CentroidMap::read_csv(&c.centroids, image.width(), image.height())?;
                Ok(CropSample { image, centroids })
            })
            .collect()
    }
}
