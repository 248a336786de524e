//! Student/teacher network: encoder, optional disentangle block, projection
//! heads and the optional per-token cell-count head.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::cell_prior::{build_cell_counts, build_cell_prior, build_class_priors, CellPrior, CentroidMap, ClassPriorSet};
use crate::disentangle::{build_masks, DisentangleBlock};
use crate::encoder::{Encoder, INIT_STD};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Binder, ParamId, ParamSet};
use crate::tensor::Tensor;

use super::augment::View;
use super::config::DirlConfig;
use super::head::HeadBank;
use super::{RepKey, Variant};

/// One view prepared for the network: pixels plus the priors and counts
/// derived from its centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub image: Image,
    pub prior: CellPrior,
    pub classes: Option<ClassPriorSet>,
    pub counts: Vec<f64>,
}

impl ViewData {
    /// `cell_types` is needed only for per-class priors.
    pub fn new(image: Image, cm: &CentroidMap, patch: usize, cell_types: Option<usize>) -> Result<Self> {
        let classes = match cell_types {
            Some(j) => Some(build_class_priors(cm, patch, j)?),
            None => None,
        };
        Ok(ViewData {
            prior: build_cell_prior(cm, patch)?,
            counts: build_cell_counts(cm, patch)?.as_f64(),
            classes,
            image,
        })
    }

    pub fn from_view(view: &View, patch: usize, cell_types: Option<usize>) -> Result<Self> {
        Self::new(view.image.clone(), &view.centroids, patch, cell_types)
    }
}

/// Pooled representations of one view; `None` marks an empty region.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    pub reps: Vec<(RepKey, Option<Tensor>)>,
}

impl RepresentationSet {
    pub fn get(&self, key: RepKey) -> Option<&Tensor> {
        self.reps.iter().find(|(k, _)| *k == key).and_then(|(_, t)| t.as_ref())
    }
}

/// Tape handles of one view's forward pass.
pub struct ViewForward {
    pub tokens: Var,
    pub reps: Vec<(RepKey, Option<Var>)>,
    pub logits: Vec<(RepKey, Option<Var>)>,
    /// Per-token cell-count predictions `[n × 1]`.
    pub aux: Option<Var>,
}

impl ViewForward {
    pub fn logits(&self, key: RepKey) -> Option<Var> {
        self.logits.iter().find(|(k, _)| *k == key).and_then(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct DirlModel {
    pub variant: Variant,
    pub cell_types: usize,
    pub encoder: Encoder,
    pub disentangle: Option<DisentangleBlock>,
    pub heads: HeadBank,
    /// `(weight [d × 1], bias [1])` of the cell-count head.
    pub aux: Option<(ParamId, ParamId)>,
}

impl DirlModel {
    pub fn init(set: &mut ParamSet, cfg: &DirlConfig, variant: Variant, aux: bool, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::init(set, &cfg.encoder, rng)?;
        let disentangle = variant
            .uses_disentangle()
            .then(|| DisentangleBlock::init(set, &cfg.encoder, cfg.shared_disentangle, rng));
        let keys = variant.keys(cfg.cell_types);
        let heads = HeadBank::init(set, &keys, cfg.encoder.dim, &cfg.heads, rng)?;
        let aux = aux.then(|| {
            let w = set.add("aux.w", Tensor::trunc_normal(&[cfg.encoder.dim, 1], INIT_STD, rng));
            let b = set.add("aux.b", Tensor::zeros(&[1]));
            (w, b)
        });
        Ok(DirlModel {
            variant,
            cell_types: cfg.cell_types,
            encoder,
            disentangle,
            heads,
            aux,
        })
    }

    pub fn locate(set: &ParamSet, cfg: &DirlConfig, variant: Variant, aux: bool) -> Result<Self> {
        let encoder = Encoder::locate(set, &cfg.encoder)?;
        let disentangle = if variant.uses_disentangle() {
            Some(DisentangleBlock::locate(set)?)
        } else {
            None
        };
        let heads = HeadBank::locate(set, &variant.keys(cfg.cell_types))?;
        let aux = if aux {
            let f = |n: &str| set.find(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
            Some((f("aux.w")?, f("aux.b")?))
        } else {
            None
        };
        Ok(DirlModel {
            variant,
            cell_types: cfg.cell_types,
            encoder,
            disentangle,
            heads,
            aux,
        })
    }

    fn class_priors<'a>(&self, view: &'a ViewData) -> Result<&'a ClassPriorSet> {
        view.classes
            .as_ref()
            .ok_or_else(|| Error::Data("view lacks per-class priors".into()))
    }

    pub fn forward_on(&self, tape: &mut Tape, b: &mut Binder, view: &ViewData) -> Result<ViewForward> {
        let n = self.encoder.config.tokens();
        if view.prior.n() != n {
            return Err(Error::shape("prior", &[view.prior.n()], &[n]));
        }
        let trace = self.encoder.forward_on(tape, b, &view.image)?;
        let t = trace.tokens;
        let cells = view.prior.cell_indices();
        let backs = view.prior.back_indices();
        let pool = |tape: &mut Tape, x: Var, rows: &[usize]| -> Result<Option<Var>> {
            if rows.is_empty() {
                Ok(None)
            } else {
                tape.subset_mean(x, rows).map(Some)
            }
        };
        let dis = match &self.disentangle {
            Some(block) => {
                let masks = build_masks(&view.prior);
                Some(block.forward_on(tape, b, &self.encoder.config, t, &masks)?)
            }
            None => None,
        };
        let mut reps = Vec::new();
        for key in self.heads.keys() {
            let v = match key {
                RepKey::Image => Some(tape.mean_rows(t)?),
                RepKey::Cell => pool(tape, t, &cells)?,
                RepKey::Back => pool(tape, t, &backs)?,
                RepKey::Class(j) => {
                    let cp = self.class_priors(view)?;
                    let prior = cp.classes.get(j as usize).ok_or(Error::Index {
                        what: "cell type",
                        index: j as usize,
                        len: cp.classes.len(),
                    })?;
                    pool(tape, t, &prior.cell_indices())?
                }
                _ => {
                    let d = dis
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("{key} needs the disentangle block")))?;
                    match key {
                        RepKey::SelfCell => pool(tape, d.t_self, &cells)?,
                        RepKey::SelfBack => pool(tape, d.t_self, &backs)?,
                        RepKey::CrossCell => pool(tape, d.t_cross, &cells)?,
                        _ => pool(tape, d.t_cross, &backs)?,
                    }
                }
            };
            reps.push((key, v));
        }
        let mut logits = Vec::with_capacity(reps.len());
        for (key, rep) in &reps {
            let head = self.heads.get(*key).expect("bank holds every key");
            let l = match rep {
                Some(r) => Some(head.forward_on(tape, b, *r)?),
                None => None,
            };
            logits.push((*key, l));
        }
        let aux = match self.aux {
            Some((w, bias)) => {
                let wv = b.var(tape, w);
                let bv = b.var(tape, bias);
                let y = tape.matmul(t, wv)?;
                Some(tape.add_row(y, bv)?)
            }
            None => None,
        };
        Ok(ViewForward {
            tokens: t,
            reps,
            logits,
            aux,
        })
    }

    /// Head logits per key without gradients (teacher path).
    pub fn logits(&self, set: &ParamSet, view: &ViewData) -> Result<Vec<(RepKey, Option<Vec<f64>>)>> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(set);
        let f = self.forward_on(&mut tape, &mut b, view)?;
        Ok(f.logits
            .iter()
            .map(|(k, v)| (*k, v.map(|v| tape.value(v).data().to_vec())))
            .collect())
    }

    /// Pooled representations without gradients.
    pub fn represent(&self, set: &ParamSet, view: &ViewData) -> Result<RepresentationSet> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(set);
        let f = self.forward_on(&mut tape, &mut b, view)?;
        Ok(RepresentationSet {
            reps: f
                .reps
                .iter()
                .map(|(k, v)| (*k, v.map(|v| tape.value(v).clone())))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell_prior::Centroid;
    use crate::disentangle::{cell_back_pool, disentangle_block};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DirlConfig {
        let mut cfg = DirlConfig::default();
        cfg.encoder.image_w = 16;
        cfg.encoder.image_h = 16;
        cfg.encoder.dim = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.depth = 1;
        cfg.heads.hidden = 6;
        cfg.heads.bottleneck = 4;
        cfg.heads.k_region = 5;
        cfg.heads.k_dis = 3;
        cfg
    }

    fn view(cfg: &DirlConfig) -> ViewData {
        let data = (0..16 * 16 * 3).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let img = Image::new(16, 16, data).unwrap();
        let cm = CentroidMap::new(16, 16, vec![Centroid { x: 3, y: 3, class_id: 1 }, Centroid { x: 12, y: 4, class_id: 1 }]).unwrap();
        ViewData::new(img, &cm, cfg.encoder.patch, Some(cfg.cell_types)).unwrap()
    }

    #[test]
    fn representations_match_standalone_pooling() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = ParamSet::new();
        let model = DirlModel::init(&mut set, &cfg, Variant::Dirl, true, &mut rng).unwrap();
        let v = view(&cfg);
        let reps = model.represent(&set, &v).unwrap();
        let (t, _) = model.encoder.encode(&set, &v.image).unwrap();
        let (c, b) = cell_back_pool(&t, &v.prior).unwrap();
        assert_eq!(reps.get(RepKey::Cell).unwrap().data(), c.unwrap().data());
        assert_eq!(reps.get(RepKey::Back).unwrap().data(), b.unwrap().data());
        let dis = disentangle_block(&set, model.disentangle.as_ref().unwrap(), &cfg.encoder, &t, &v.prior).unwrap();
        let cb = dis.t_cross.tokens.subset_mean(&v.prior.cell_indices());
        assert_eq!(reps.get(RepKey::CrossCell).unwrap().data(), cb.data());
        let logits = model.logits(&set, &v).unwrap();
        assert_eq!(logits.len(), 6);
        assert_eq!(logits[2].1.as_ref().unwrap().len(), 3);
        // Relocating from names gives the same structure.
        let again = DirlModel::locate(&set, &cfg, Variant::Dirl, true).unwrap();
        assert_eq!(again.aux, model.aux);
    }

    #[test]
    fn empty_class_region_is_absent() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = ParamSet::new();
        let model = DirlModel::init(&mut set, &cfg, Variant::CellbackV2, false, &mut rng).unwrap();
        let logits = model.logits(&set, &view(&cfg)).unwrap();
        let keys: Vec<RepKey> = logits.iter().map(|l| l.0).collect();
        assert_eq!(keys, vec![RepKey::Image, RepKey::Class(0), RepKey::Class(1), RepKey::Back]);
        assert!(logits[1].1.is_none());
        assert!(logits[2].1.is_some());
    }
}
