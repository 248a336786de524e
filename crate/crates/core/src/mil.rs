//! Bag-level evaluation: feature extraction, a dual-stream MIL classifier and
//! its metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{ByteReader, ByteWriter};
use crate::dataset::DatasetIndex;
use crate::encoder::{mean_pool, Encoder, INIT_STD};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Binder, ParamId, ParamSet};
use crate::ssl::optim::AdamW;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"DIRLFEAT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub label: u32,
    /// `N × d`, one row per crop.
    pub features: Tensor,
}

/// Bags of per-crop features sharing one dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub dim: usize,
    pub bags: Vec<Bag>,
}

impl FeatureArchive {
    /// `magic, u32 version, u32 d`, then until end of file per bag
    /// `{u32 len, bag_id, u32 label, u32 N, N·d f64}`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(FEATURE_MAGIC);
        w.u32(FEATURE_VERSION);
        w.u32(self.dim as u32);
        for b in &self.bags {
            w.str(&b.bag_id);
            w.u32(b.label);
            w.u32(b.features.rows() as u32);
            w.f64s(b.features.data());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != FEATURE_MAGIC {
            return Err("not a feature archive (bad magic)".into());
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(format!("unsupported feature archive version {version}"));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err("feature dimension is zero".into());
        }
        let mut bags = Vec::new();
        while !r.done() {
            let bag_id = r.str()?;
            let label = r.u32()?;
            let n = r.u32()? as usize;
            if n == 0 {
                return Err(format!("bag {bag_id} is empty"));
            }
            let data = r.f64s(n * dim)?;
            let features = Tensor::new(&[n, dim], data).map_err(|e| e.to_string())?;
            bags.push(Bag { bag_id, label, features });
        }
        Ok(FeatureArchive { dim, bags })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Replaces bag labels with those of a manifest; every bag must be listed.
    pub fn relabel(&mut self, manifest: &[crate::dataset::BagEntry]) -> Result<()> {
        for b in &mut self.bags {
            let e = manifest
                .iter()
                .find(|m| m.bag_id == b.bag_id)
                .ok_or_else(|| Error::Data(format!("bag {} missing from manifest", b.bag_id)))?;
            b.label = e.label;
        }
        Ok(())
    }
}

/// Mean-pooled final tokens of each image.
pub fn crop_features(encoder: &Encoder, set: &ParamSet, images: &[Image]) -> Result<Vec<Tensor>> {
    images
        .par_iter()
        .map(|img| Ok(mean_pool(&encoder.encode(set, img)?.0)))
        .collect()
}

/// Encodes every crop of a dataset and groups the rows by bag.
pub fn extract_features(encoder: &Encoder, set: &ParamSet, data: &DatasetIndex) -> Result<FeatureArchive> {
    let images = data.load_images()?;
    let feats = crop_features(encoder, set, &images)?;
    let dim = encoder.config.dim;
    let mut bags = Vec::with_capacity(data.bags.len());
    for entry in &data.bags {
        let rows: Vec<f64> = data
            .crops
            .iter()
            .zip(&feats)
            .filter(|(c, _)| c.bag_id == entry.bag_id)
            .flat_map(|(_, f)| f.data().iter().copied())
            .collect();
        let n = rows.len() / dim;
        bags.push(Bag {
            bag_id: entry.bag_id.clone(),
            label: entry.label,
            features: Tensor::new(&[n, dim], rows)?,
        });
    }
    Ok(FeatureArchive { dim, bags })
}

/// Parameter ids of the dual-stream classifier.
#[derive(Debug, Clone)]
pub struct MilParams {
    pub classes: usize,
    pub inst_w: ParamId,
    pub inst_b: ParamId,
    pub query: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub bag_w: ParamId,
    pub bag_b: ParamId,
}

impl MilParams {
    pub fn init(set: &mut ParamSet, dim: usize, classes: usize, rng: &mut impl rand::Rng) -> Self {
        let mut w = |name: &str, shape: &[usize]| set.add(name, Tensor::trunc_normal(shape, INIT_STD, rng));
        let inst_w = w("mil.instance.w", &[dim, classes]);
        let query = w("mil.query.w", &[dim, dim]);
        let value_w = w("mil.value.w", &[dim, dim]);
        let bag_w = w("mil.bag.w", &[dim, classes]);
        MilParams {
            classes,
            inst_w,
            inst_b: set.add("mil.instance.b", Tensor::zeros(&[classes])),
            query,
            value_w,
            value_b: set.add("mil.value.b", Tensor::zeros(&[dim])),
            bag_w,
            bag_b: set.add("mil.bag.b", Tensor::zeros(&[classes])),
        }
    }
}

/// Output of [`mil_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct MilOutput {
    pub bag_logits: Vec<f64>,
    /// `N × classes` instance logits.
    pub instance_scores: Tensor,
    pub attention: Vec<f64>,
    pub critical: usize,
}

struct MilTrace {
    logits: Var,
    instances: Var,
    attention: Var,
    critical: usize,
}

fn critical_index(scores: &Tensor) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..scores.rows() {
        let m = scores.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m > best.1 {
            best = (i, m);
        }
    }
    best.0
}

fn forward_on(tape: &mut Tape, b: &mut Binder, p: &MilParams, bag: &Bag) -> Result<MilTrace> {
    let h = tape.constant(bag.features.clone());
    let lin = |tape: &mut Tape, b: &mut Binder, x: Var, w: ParamId, bias: Option<ParamId>| -> Result<Var> {
        let wv = b.var(tape, w);
        let y = tape.matmul(x, wv)?;
        match bias {
            Some(bias) => {
                let bv = b.var(tape, bias);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    };
    let inst = lin(tape, b, h, p.inst_w, Some(p.inst_b))?;
    let critical = critical_index(tape.value(inst));
    let crit_logits = tape.gather_row(inst, critical)?;

    let q = lin(tape, b, h, p.query, None)?;
    let qc = tape.gather_row(q, critical)?;
    let scores = tape.matmul_bt(q, qc)?;
    let scores = tape.transpose(scores);
    let attention = tape.softmax_rows(scores, None)?;
    let v = lin(tape, b, h, p.value_w, Some(p.value_b))?;
    let emb = tape.matmul(attention, v)?;
    let bag_logits = lin(tape, b, emb, p.bag_w, Some(p.bag_b))?;
    let logits = tape.weighted_sum(&[(bag_logits, 0.5), (crit_logits, 0.5)])?;
    Ok(MilTrace {
        logits,
        instances: inst,
        attention,
        critical,
    })
}

/// Dual-stream forward: the max-scoring instance's logits averaged with the
/// logits of an attention-pooled bag embedding.
pub fn mil_forward(set: &ParamSet, p: &MilParams, bag: &Bag) -> Result<MilOutput> {
    if bag.features.rows() == 0 {
        return Err(Error::Data(format!("bag {} is empty", bag.bag_id)));
    }
    let mut tape = Tape::new();
    let mut b = Binder::frozen(set);
    let t = forward_on(&mut tape, &mut b, p, bag)?;
    Ok(MilOutput {
        bag_logits: tape.value(t.logits).data().to_vec(),
        instance_scores: tape.value(t.instances).clone(),
        attention: tape.value(t.attention).data().to_vec(),
        critical: t.critical,
    })
}

/// Cross-entropy of the bag logits against the one-hot label.
pub fn mil_loss_on(tape: &mut Tape, b: &mut Binder, p: &MilParams, bag: &Bag) -> Result<Var> {
    let t = forward_on(tape, b, p, bag)?;
    let mut target = vec![0.0; p.classes];
    *target
        .get_mut(bag.label as usize)
        .ok_or_else(|| Error::Data(format!("label {} of bag {} out of range", bag.label, bag.bag_id)))? = 1.0;
    tape.soft_cross_entropy(t.logits, &target, 1.0)
}

/// Rank-based AUC: the probability a positive outscores a negative, ties
/// counting one half.
pub fn compute_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tied groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Binary AUC on the class-1 probability, or the one-vs-rest macro average
/// over classes present in `labels` for more classes.
pub fn multiclass_auc(probs: &[Vec<f64>], labels: &[u32], classes: usize) -> Result<f64> {
    if classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| *l == 1).collect();
        return compute_auc(&s, &pos);
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let pos: Vec<bool> = labels.iter().map(|l| *l as usize == c).collect();
        if pos.iter().all(|p| *p) || !pos.iter().any(|p| *p) {
            continue;
        }
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        total += compute_auc(&s, &pos)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("AUC needs at least two classes present".into()));
    }
    Ok(total / used as f64)
}

/// Unweighted mean of per-class F1 over classes seen in truth or predictions.
pub fn macro_f1(pred: &[u32], truth: &[u32], classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..classes as u32 {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        sum += 2.0 * tp / (2.0 * tp + fp + fn_);
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        sum / used as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig {
            epochs: 50,
            lr: 2e-4,
            weight_decay: 5e-2,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MilMetrics {
    pub accuracy: f64,
    pub auc: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub train_accuracy: f64,
    pub test: MilMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation (0 for a single value).
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MilSummary {
    pub seeds: Vec<SeedResult>,
    pub accuracy: MeanSd,
    pub auc: MeanSd,
    pub macro_f1: MeanSd,
}

/// Predictions of a trained classifier: softmax probabilities per bag.
pub fn predict(set: &ParamSet, p: &MilParams, bags: &[&Bag]) -> Result<Vec<Vec<f64>>> {
    bags.iter()
        .map(|b| {
            let out = mil_forward(set, p, b)?;
            let mut z = out.bag_logits;
            crate::tensor::softmax_in_place(&mut z).ok_or_else(|| Error::NonFinite("bag logits".into()))?;
            Ok(z)
        })
        .collect()
}

pub fn evaluate(set: &ParamSet, p: &MilParams, bags: &[&Bag]) -> Result<(MilMetrics, Vec<Vec<f64>>)> {
    let probs = predict(set, p, bags)?;
    let labels: Vec<u32> = bags.iter().map(|b| b.label).collect();
    let pred: Vec<u32> = probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    let accuracy = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
    let auc = multiclass_auc(&probs, &labels, p.classes)?;
    Ok((
        MilMetrics {
            accuracy,
            auc,
            macro_f1: macro_f1(&pred, &labels, p.classes),
        },
        probs,
    ))
}

/// Stratified split into (train, val, test) index lists.
pub fn split_bags(bags: &[Bag], classes: usize, cfg: &MilConfig, rng: &mut impl rand::Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..classes as u32 {
        let mut idx: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == c).collect();
        idx.shuffle(rng);
        let n = idx.len();
        // At least one bag of each class stays in training.
        let n_te = ((n as f64 * cfg.test_fraction).round() as usize).min(n.saturating_sub(1));
        let n_va = ((n as f64 * cfg.val_fraction).round() as usize).min((n - n_te).saturating_sub(1));
        te.extend_from_slice(&idx[..n_te]);
        va.extend_from_slice(&idx[n_te..n_te + n_va]);
        tr.extend_from_slice(&idx[n_te + n_va..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    te.sort_unstable();
    (tr, va, te)
}

/// Trains one classifier per seed (batch of one bag, Adam with decoupled
/// weight decay), keeping the epoch with the best validation AUC plus
/// accuracy, and reports test metrics.
pub fn train_mil(bags: &[Bag], cfg: &MilConfig, seeds: &[u64]) -> Result<MilSummary> {
    let first = bags.first().ok_or_else(|| Error::Config("no bags to train on".into()))?;
    let dim = first.features.cols();
    if bags.iter().any(|b| b.features.cols() != dim || b.features.rows() == 0) {
        return Err(Error::Data("bags differ in feature dimension or are empty".into()));
    }
    let classes = bags.iter().map(|b| b.label as usize).max().unwrap_or(0) + 1;
    let present = (0..classes as u32).filter(|c| bags.iter().any(|b| b.label == *c)).count();
    if present < 2 {
        return Err(Error::Config("MIL needs at least two classes among the bags".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one MIL seed is required".into()));
    }
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, val, test) = split_bags(bags, classes, cfg, &mut rng);
        let mut set = ParamSet::new();
        let p = MilParams::init(&mut set, dim, classes, &mut rng);
        let mut opt = AdamW::new(&set);
        let select: Vec<&Bag> = if val.is_empty() { &train } else { &val }.iter().map(|&i| &bags[i]).collect();
        let mut best: Option<(f64, usize, ParamSet)> = None;
        let mut order = train.clone();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let mut tape = Tape::new();
                let mut b = Binder::trainable(&set);
                let loss = mil_loss_on(&mut tape, &mut b, &p, &bags[i])?;
                let mut grads: Vec<Option<Tensor>> = vec![None; set.len()];
                for (slot, g) in tape.backward(loss)?.param_grads() {
                    grads[slot] = Some(g);
                }
                opt.update(&mut set, &grads, cfg.lr, cfg.weight_decay)?;
            }
            let score = match evaluate(&set, &p, &select) {
                Ok((m, _)) => m.auc + m.accuracy,
                Err(Error::Metric(_)) => evaluate_accuracy(&set, &p, &select)?,
                Err(e) => return Err(e),
            };
            // Later epochs win ties.
            if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
                best = Some((score, epoch, set.clone()));
            }
        }
        let (_, best_epoch, best_set) = best.ok_or_else(|| Error::Config("MIL epochs must be positive".into()))?;
        let train_refs: Vec<&Bag> = train.iter().map(|&i| &bags[i]).collect();
        let train_accuracy = evaluate_accuracy(&best_set, &p, &train_refs)?;
        let test_refs: Vec<&Bag> = if test.is_empty() {
            train_refs.clone()
        } else {
            test.iter().map(|&i| &bags[i]).collect()
        };
        let (metrics, _) = evaluate(&best_set, &p, &test_refs)?;
        results.push(SeedResult {
            seed,
            best_epoch,
            train_accuracy,
            test: metrics,
        });
    }
    let col = |f: fn(&MilMetrics) -> f64| MeanSd::of(&results.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
    Ok(MilSummary {
        accuracy: col(|m| m.accuracy),
        auc: col(|m| m.auc),
        macro_f1: col(|m| m.macro_f1),
        seeds: results,
    })
}

fn evaluate_accuracy(set: &ParamSet, p: &MilParams, bags: &[&Bag]) -> Result<f64> {
    let probs = predict(set, p, bags)?;
    let correct = probs
        .iter()
        .zip(bags)
        .filter(|(row, b)| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u32 == b.label
        })
        .count();
    Ok(correct as f64 / bags.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(dim: usize, classes: usize, seed: u64) -> (ParamSet, MilParams) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MilParams::init(&mut set, dim, classes, &mut rng);
        // Larger weights than the init so attention is far from uniform.
        for t in set.tensors_mut() {
            *t = t.map(|v| v * 40.0);
        }
        (set, p)
    }

    fn bag(rows: Vec<Vec<f64>>, label: u32) -> Bag {
        let d = rows[0].len();
        let n = rows.len();
        Bag {
            bag_id: "b".into(),
            label,
            features: Tensor::new(&[n, d], rows.concat()).unwrap(),
        }
    }

    #[test]
    fn single_instance_has_full_attention() {
        let (set, p) = params(3, 2, 1);
        let out = mil_forward(&set, &p, &bag(vec![vec![0.3, -1.0, 2.0]], 0)).unwrap();
        assert_eq!(out.attention, vec![1.0]);
        assert_eq!(out.critical, 0);
    }

    #[test]
    fn identical_instances_attend_uniformly() {
        let (set, p) = params(3, 2, 2);
        let r = vec![0.5, 0.1, -0.7];
        let out = mil_forward(&set, &p, &bag(vec![r.clone(), r.clone(), r.clone(), r], 1)).unwrap();
        for a in &out.attention {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn three_instances_match_scalar_oracle() {
        let (set, p) = params(2, 2, 3);
        let rows = vec![vec![1.0, -0.5], vec![0.2, 0.9], vec![-1.3, 0.4]];
        let out = mil_forward(&set, &p, &bag(rows.clone(), 0)).unwrap();
        let g = |id: ParamId| set.get(id).data().to_vec();
        let (iw, ib, qw, vw, vb, bw, bb) = (g(p.inst_w), g(p.inst_b), g(p.query), g(p.value_w), g(p.value_b), g(p.bag_w), g(p.bag_b));
        // x · W for a row-major [in × out] weight.
        let lin = |x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>() + b.map_or(0.0, |b| b[j]))
                .collect()
        };
        let inst: Vec<Vec<f64>> = rows.iter().map(|r| lin(r, &iw, Some(&ib), 2)).collect();
        let crit = (0..3)
            .max_by(|&a, &b| {
                let ma = inst[a].iter().cloned().fold(f64::MIN, f64::max);
                let mb = inst[b].iter().cloned().fold(f64::MIN, f64::max);
                ma.partial_cmp(&mb).unwrap()
            })
            .unwrap();
        assert_eq!(out.critical, crit);
        let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(r, &qw, None, 2)).collect();
        let s: Vec<f64> = q.iter().map(|qi| qi[0] * q[crit][0] + qi[1] * q[crit][1]).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let att: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
        let vals: Vec<Vec<f64>> = rows.iter().map(|r| lin(r, &vw, Some(&vb), 2)).collect();
        let emb: Vec<f64> = (0..2).map(|j| (0..3).map(|i| att[i] * vals[i][j]).sum()).collect();
        let bag_l = lin(&emb, &bw, Some(&bb), 2);
        for c in 0..2 {
            let want = 0.5 * (bag_l[c] + inst[crit][c]);
            assert!((out.bag_logits[c] - want).abs() < 1e-12);
        }
        for i in 0..3 {
            assert!((out.attention[i] - att[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_cases() {
        let pos = [false, false, true, true];
        assert_eq!(compute_auc(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), 0.0);
        assert!(matches!(compute_auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        // All-pairs counting with half credit for ties.
        let scores = [0.3, 0.5, 0.5, 0.1, 0.5, 0.7];
        let labels = [true, false, true, false, true, false];
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..6 {
            for j in 0..6 {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert_eq!(compute_auc(&scores, &labels).unwrap(), num / den);
    }

    #[test]
    fn f1_and_mean_sd() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2), 1.0);
        // Class 0: tp 1 fp 0 fn 1 -> 2/3; class 1: tp 2 fp 1 fn 0 -> 4/5.
        assert!((macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2) - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.sd), (2.0, 1.0));
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
    }

    fn synthetic_bags(count: usize, separable: bool, seed: u64) -> Vec<Bag> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|k| {
                let label = (k % 2) as u32;
                let n = rng.random_range(3..7);
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        let shift = if separable && label == 1 && i == 0 { 3.0 } else { 0.0 };
                        (0..4).map(|j| rng.random::<f64>() - 0.5 + if j == 0 { shift } else { 0.0 }).collect()
                    })
                    .collect();
                Bag {
                    bag_id: format!("bag{k:04}"),
                    ..bag(rows, label)
                }
            })
            .collect()
    }

    #[test]
    fn separable_bags_are_learned() {
        let bags = synthetic_bags(40, true, 7);
        let cfg = MilConfig {
            epochs: 30,
            lr: 5e-3,
            ..MilConfig::default()
        };
        let s = train_mil(&bags, &cfg, &[0, 1]).unwrap();
        for r in &s.seeds {
            assert_eq!(r.train_accuracy, 1.0, "{r:?}");
            assert_eq!(r.test.auc, 1.0, "{r:?}");
        }
        // Same inputs, same summary.
        assert_eq!(train_mil(&bags, &cfg, &[0, 1]).unwrap(), s);
    }

    #[test]
    fn unrelated_labels_give_chance_auc() {
        let bags = synthetic_bags(200, false, 8);
        let cfg = MilConfig {
            epochs: 5,
            lr: 5e-3,
            ..MilConfig::default()
        };
        let s = train_mil(&bags, &cfg, &[0, 1, 2, 3, 4]).unwrap();
        assert!((0.35..=0.65).contains(&s.auc.mean), "{:?}", s.auc);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let bags = synthetic_bags(20, false, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (tr, va, te) = split_bags(&bags, 2, &MilConfig::default(), &mut rng);
        assert_eq!((tr.len(), va.len(), te.len()), (12, 4, 4));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(te.iter().filter(|&&i| bags[i].label == 1).count(), 2);
    }

    #[test]
    fn archive_round_trip_and_corruption() {
        let archive = FeatureArchive {
            dim: 4,
            bags: synthetic_bags(5, false, 10),
        };
        let bytes = archive.to_bytes();
        let back = FeatureArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, archive);
        assert_eq!(back.to_bytes(), bytes);
        assert!(FeatureArchive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeatureArchive::from_bytes(&bad).is_err());
    }

    #[test]
    fn relabel_uses_manifest() {
        let mut archive = FeatureArchive {
            dim: 4,
            bags: synthetic_bags(2, false, 11),
        };
        let entries = vec![
            crate::dataset::BagEntry { bag_id: "bag0000".into(), label: 1 },
            crate::dataset::BagEntry { bag_id: "bag0001".into(), label: 1 },
        ];
        archive.relabel(&entries).unwrap();
        assert!(archive.bags.iter().all(|b| b.label == 1));
        assert!(archive.relabel(&entries[..1]).is_err());
    }

    proptest! {
        #[test]
        fn attention_sums_to_one_and_logits_ignore_order(
            rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 1..8),
            seed in 0u64..50,
            rot in 0usize..8,
        ) {
            let (set, p) = params(3, 2, seed);
            let b = bag(rows.clone(), 0);
            let out = mil_forward(&set, &p, &b).unwrap();
            prop_assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut shuffled = rows.clone();
            shuffled.rotate_left(rot % rows.len());
            let out2 = mil_forward(&set, &p, &bag(shuffled, 0)).unwrap();
            for c in 0..2 {
                prop_assert!((out.bag_logits[c] - out2.bag_logits[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn auc_ignores_monotone_transforms(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..30),
            labels in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let labels = &labels[..scores.len()];
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let a = compute_auc(&scores, labels).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 3.0).collect();
            prop_assert_eq!(a, compute_auc(&t, labels).unwrap());
        }
    }
}
