//! Aggregated attention, three-bin sparsity profiles, per-region attention
//! maps and overlay export.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell_prior::CellPrior;
use crate::encoder::{AttentionRecord, Encoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Column sums of a head-averaged attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention {
    pub values: Vec<f64>,
}

pub fn column_sums(a: &Tensor) -> Vec<f64> {
    let (n, m) = (a.rows(), a.cols());
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    out
}

pub fn aggregate_attention(record: &AttentionRecord, layer: usize) -> Result<AggregatedAttention> {
    let a = record.head_mean(layer)?;
    Ok(AggregatedAttention {
        values: column_sums(&a),
    })
}

/// Fractions of values in `[0, 0.5)`, `[0.5, 2]` and `(2, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub low: f64,
    pub desired: f64,
    pub high: f64,
    pub count: usize,
}

pub fn bin_profile(values: &[f64]) -> Result<SparsityProfile> {
    if values.is_empty() {
        return Err(Error::Data("bin_profile of no values".into()));
    }
    let (mut lo, mut mid, mut hi) = (0usize, 0usize, 0usize);
    for &v in values {
        if !(v >= 0.0) {
            return Err(Error::Data(format!("attention value {v} is negative or NaN")));
        }
        if v < 0.5 {
            lo += 1;
        } else if v <= 2.0 {
            mid += 1;
        } else {
            hi += 1;
        }
    }
    let n = values.len() as f64;
    Ok(SparsityProfile {
        low: lo as f64 / n,
        desired: mid as f64 / n,
        high: hi as f64 / n,
        count: values.len(),
    })
}

/// Which map to compute: the plain aggregate or one region representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Agg,
    C,
    B,
    CC,
    BB,
    CB,
    BC,
}

impl FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "agg" => Which::Agg,
            "c" => Which::C,
            "b" => Which::B,
            "cc" => Which::CC,
            "bb" => Which::BB,
            "cb" => Which::CB,
            "bc" => Which::BC,
            other => {
                return Err(Error::Config(format!(
                    "unknown map `{other}` (expected agg|c|b|cc|bb|cb|bc)"
                )))
            }
        })
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Agg => "agg",
            Which::C => "c",
            Which::B => "b",
            Which::CC => "cc",
            Which::BB => "bb",
            Which::CB => "cb",
            Which::BC => "bc",
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MaskKind {
    None,
    SameRegion,
    CrossRegion,
}

/// Restricts each row to the allowed columns and renormalizes. For a
/// post-softmax matrix this equals re-applying softmax with the additive mask.
fn remask(a: &Tensor, prior: &CellPrior, kind: MaskKind) -> Result<Tensor> {
    if kind == MaskKind::None {
        return Ok(a.clone());
    }
    let n = a.rows();
    let bits = prior.bits();
    let mut out = a.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            let same = bits[i] == bits[j];
            let allowed = match kind {
                MaskKind::SameRegion => same,
                _ => !same || i == j,
            };
            if !allowed {
                *v = 0.0;
            }
        }
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::DegenerateRow { row: i });
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Per-region attention map from per-head post-softmax matrices: rows of the
/// region are summed down the columns and scaled by `n / |region|`, so a
/// uniform matrix maps to all ones. Disentangled members first re-mask each
/// head with the self or cross mask.
pub fn representation_attention(heads: &[Tensor], prior: &CellPrior, which: Which) -> Result<Vec<f64>> {
    let first = heads.first().ok_or_else(|| Error::Data("no attention heads".into()))?;
    let n = first.rows();
    if prior.n() != n || heads.iter().any(|h| h.shape() != [n, n]) {
        return Err(Error::shape("representation_attention", first.shape(), &[prior.n(), prior.n()]));
    }
    let (kind, cell) = match which {
        Which::Agg => {
            let mut acc = vec![0.0; n];
            for h in heads {
                for (a, v) in acc.iter_mut().zip(column_sums(h)) {
                    *a += v;
                }
            }
            return Ok(acc.into_iter().map(|v| v / heads.len() as f64).collect());
        }
        Which::C => (MaskKind::None, true),
        Which::B => (MaskKind::None, false),
        Which::CC => (MaskKind::SameRegion, true),
        Which::BB => (MaskKind::SameRegion, false),
        Which::CB => (MaskKind::CrossRegion, true),
        Which::BC => (MaskKind::CrossRegion, false),
    };
    let rows = if cell { prior.cell_indices() } else { prior.back_indices() };
    if rows.is_empty() {
        return Err(Error::EmptyRegion(which.to_string()));
    }
    let mut acc = vec![0.0; n];
    for h in heads {
        let m = remask(h, prior, kind)?;
        for &i in &rows {
            for (a, v) in acc.iter_mut().zip(m.row(i)) {
                *a += v;
            }
        }
    }
    let scale = n as f64 / (rows.len() as f64 * heads.len() as f64);
    Ok(acc.into_iter().map(|v| v * scale).collect())
}

/// Writes a token map as CSV, one line per token-grid row. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn map_to_csv(map: &[f64], cols: usize) -> String {
    let mut s = String::new();
    for row in map.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn read_map_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for field in line.split(',').filter(|f| !f.trim().is_empty()) {
            out.push(field.trim().parse().map_err(|_| {
                Error::format(path, format!("line {}: bad value `{field}`", i + 1))
            })?);
        }
    }
    Ok(out)
}

/// Blends the clipped map in red (alpha `0.5 · value`) over the grayscale
/// image and writes `png_path` plus the raw map next to it as `.csv`.
/// Returns the CSV path.
pub fn export_overlay(image: &Image, map: &[f64], patch: usize, png_path: &Path) -> Result<PathBuf> {
    let overlay = render_overlay(image, map, patch)?;
    overlay.save_png(png_path)?;
    let csv = png_path.with_extension("csv");
    let cols = image.width() as usize / patch;
    std::fs::write(&csv, map_to_csv(map, cols)).map_err(|e| Error::io(&csv, e))?;
    Ok(csv)
}

pub fn render_overlay(image: &Image, map: &[f64], patch: usize) -> Result<Image> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if patch == 0 || w % patch != 0 || h % patch != 0 || map.len() != (w / patch) * (h / patch) {
        return Err(Error::Data(format!(
            "map of {} values does not fit a {w}x{h} image with patch {patch}",
            map.len()
        )));
    }
    let cols = w / patch;
    let gray = image.grayscale();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let m = map[(y / patch) * cols + x / patch];
            let m = if m.is_nan() { 0.0 } else { m.clamp(0.0, 1.0) };
            let a = 0.5 * m;
            let g = gray[y * w + x];
            data.extend_from_slice(&[(1.0 - a) * g + a, (1.0 - a) * g, (1.0 - a) * g]);
        }
    }
    Image::new(w as u32, h as u32, data)
}

/// Aggregated attention values of every crop at `layer`, concatenated in
/// crop order.
pub fn dataset_values(encoder: &Encoder, set: &ParamSet, images: &[Image], layer: usize) -> Result<Vec<f64>> {
    let per: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| {
            let (_, rec) = encoder.encode(set, img)?;
            Ok(aggregate_attention(&rec, layer)?.values)
        })
        .collect::<Result<_>>()?;
    Ok(per.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub low: f64,
    pub desired: f64,
    pub high: f64,
}

/// Machine-readable summary of one analysis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub model_id: String,
    pub dataset_id: String,
    pub bins: Bins,
    pub token_count: usize,
}

impl AttentionReport {
    pub fn new(model_id: &str, dataset_id: &str, p: &SparsityProfile) -> Self {
        AttentionReport {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            bins: Bins {
                low: p.low,
                desired: p.desired,
                high: p.high,
            },
            token_count: p.count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> Tensor {
        Tensor::full(&[n, n], 1.0 / n as f64)
    }

    #[test]
    fn aggregate_cases() {
        let rec = AttentionRecord {
            layers: vec![vec![uniform(4)], vec![Tensor::identity(3), Tensor::identity(3)]],
        };
        assert_eq!(aggregate_attention(&rec, 0).unwrap().values, vec![1.0; 4]);
        assert_eq!(aggregate_attention(&rec, 1).unwrap().values, vec![1.0; 3]);
        assert!(matches!(aggregate_attention(&rec, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn bin_cases() {
        let p = bin_profile(&[0.2, 1.0, 3.0, 0.8]).unwrap();
        assert_eq!((p.low, p.desired, p.high), (0.25, 0.5, 0.25));
        let p = bin_profile(&[0.5, 2.0, 1.0]).unwrap();
        assert_eq!(p.desired, 1.0);
        assert!(bin_profile(&[]).is_err());
        assert!(bin_profile(&[-0.1]).is_err());
    }

    #[test]
    fn uniform_maps_are_one() {
        let prior = CellPrior::from_bits(vec![true, false, true, false]);
        for w in ["agg", "c", "b"] {
            let m = representation_attention(&[uniform(4)], &prior, w.parse().unwrap()).unwrap();
            assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-12), "{w}: {m:?}");
        }
        // Masked maps keep the total mass n but spread it over the allowed
        // columns only.
        let cc = representation_attention(&[uniform(4)], &prior, Which::CC).unwrap();
        assert_eq!(cc, vec![2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn self_mask_zeroes_other_region() {
        let prior = CellPrior::from_bits(vec![true, true, false, false]);
        let a = Tensor::from_rows(&[
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.4, 0.3, 0.2, 0.1],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.7, 0.1, 0.1, 0.1],
        ])
        .unwrap();
        let cc = representation_attention(&[a.clone()], &prior, Which::CC).unwrap();
        assert_eq!(&cc[2..], &[0.0, 0.0]);
        let bb = representation_attention(&[a.clone()], &prior, Which::BB).unwrap();
        assert_eq!(&bb[..2], &[0.0, 0.0]);
        let empty = CellPrior::all(4, false);
        assert!(matches!(
            representation_attention(&[a], &empty, Which::C),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn overlay_cases() {
        let img = Image::from_gray(4, 4, &[0.5; 16]).unwrap();
        let plain = render_overlay(&img, &[0.0; 4], 2).unwrap();
        assert_eq!(plain, img);
        let hot = render_overlay(&img, &[5.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(hot.pixel(0, 0), [0.75, 0.25, 0.25]);
        assert_eq!(hot.pixel(3, 3), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn map_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_gray(4, 4, &[0.3; 16]).unwrap();
        let map = vec![0.1 + 0.2, 1.0 / 3.0, 0.0, 7.25e-9];
        let csv = export_overlay(&img, &map, 2, &dir.path().join("m.png")).unwrap();
        assert_eq!(read_map_csv(&csv).unwrap(), map);
    }
}
