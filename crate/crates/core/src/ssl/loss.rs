//! Distillation losses and the weighted combination across representations.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::softmax_in_place;

use super::{LossWeights, RepKey, Variant};

/// `softmax((logits - center) / temp)`.
pub fn sharpen_and_center(logits: &[f64], temp: f64, center: Option<&[f64]>) -> Result<Vec<f64>> {
    if !(temp > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temp}")));
    }
    if let Some(c) = center {
        if c.len() != logits.len() {
            return Err(Error::shape("sharpen_and_center", &[logits.len()], &[c.len()]));
        }
    }
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, z)| (z - center.map_or(0.0, |c| c[i])) / temp)
        .collect();
    softmax_in_place(&mut p).ok_or_else(|| Error::NonFinite("logits".into()))?;
    Ok(p)
}

/// `-Σ target · log softmax(logits / temp)`.
pub fn cross_entropy(target: &[f64], logits: &[f64], temp: f64) -> f64 {
    let s: Vec<f64> = logits.iter().map(|z| z / temp).collect();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    target
        .iter()
        .zip(&s)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, v)| -t * (v - lse))
        .sum()
}

/// Temperatures of both branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temps {
    pub student: f64,
    pub teacher: f64,
}

impl Default for Temps {
    fn default() -> Self {
        Temps {
            student: 0.1,
            teacher: 0.04,
        }
    }
}

/// Symmetrized distillation loss over two views: the teacher output of each
/// view teaches the student output of the other, and the two are averaged.
pub fn dino_pair_loss(
    student: [&[f64]; 2],
    teacher: [&[f64]; 2],
    temps: Temps,
    center: Option<&[f64]>,
) -> Result<f64> {
    let k = student[0].len();
    if [student[1], teacher[0], teacher[1]].iter().any(|v| v.len() != k) {
        return Err(Error::Data("dino_pair_loss: logits differ in length".into()));
    }
    if !(temps.student > 0.0) {
        return Err(Error::Config("student temperature must be positive".into()));
    }
    let t0 = sharpen_and_center(teacher[0], temps.teacher, center)?;
    let t1 = sharpen_and_center(teacher[1], temps.teacher, center)?;
    Ok(0.5 * (cross_entropy(&t0, student[1], temps.student) + cross_entropy(&t1, student[0], temps.student)))
}

/// Tape version of [`dino_pair_loss`] with precomputed teacher targets.
pub fn dino_pair_loss_on(
    tape: &mut Tape,
    student: [Var; 2],
    targets: [&[f64]; 2],
    temp_student: f64,
) -> Result<Var> {
    let a = tape.soft_cross_entropy(student[1], targets[0], temp_student)?;
    let b = tape.soft_cross_entropy(student[0], targets[1], temp_student)?;
    tape.weighted_sum(&[(a, 0.5), (b, 0.5)])
}

/// One entry of a [`LossReport`]; `loss` is `None` when the term was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct TermReport {
    pub key: RepKey,
    pub weight: f64,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<TermReport>,
}

impl LossReport {
    pub fn skipped(&self) -> Vec<RepKey> {
        self.terms
            .iter()
            .filter(|t| t.loss.is_none())
            .map(|t| t.key)
            .collect()
    }
}

/// Weighted sum of per-representation losses. `term` returns `None` for a
/// representation absent in either view; such terms are skipped and the
/// remaining weights are left as they are. Zero-weight terms are not
/// evaluated.
pub fn composite_loss(
    variant: Variant,
    weights: &LossWeights,
    cell_types: usize,
    mut term: impl FnMut(RepKey) -> Option<f64>,
) -> Result<LossReport> {
    let mut total = 0.0;
    let mut terms = Vec::new();
    let mut any = false;
    for (key, w) in variant.weight_table(weights, cell_types) {
        let loss = if w == 0.0 { Some(0.0) } else { term(key) };
        if let Some(l) = loss {
            if w != 0.0 {
                total += w * l;
                any = true;
            }
        }
        terms.push(TermReport { key, weight: w, loss });
    }
    if !any {
        return Err(Error::NoSignal(0));
    }
    Ok(LossReport { total, terms })
}

/// Tape version of [`composite_loss`]; `term` builds each term's loss node.
pub fn composite_loss_on(
    tape: &mut Tape,
    variant: Variant,
    weights: &LossWeights,
    cell_types: usize,
    mut term: impl FnMut(&mut Tape, RepKey) -> Result<Option<Var>>,
) -> Result<(Var, LossReport)> {
    let mut nodes = Vec::new();
    let mut terms = Vec::new();
    for (key, w) in variant.weight_table(weights, cell_types) {
        if w == 0.0 {
            terms.push(TermReport {
                key,
                weight: w,
                loss: Some(0.0),
            });
            continue;
        }
        let v = term(tape, key)?;
        let loss = v.map(|v| tape.value(v).data()[0]);
        if let Some(v) = v {
            nodes.push((v, w));
        }
        terms.push(TermReport { key, weight: w, loss });
    }
    if nodes.is_empty() {
        return Err(Error::NoSignal(0));
    }
    let total = tape.weighted_sum(&nodes)?;
    let report = LossReport {
        total: tape.value(total).data()[0],
        terms,
    };
    Ok((total, report))
}

/// Mean squared error between per-token predictions and cell counts.
pub fn aux_cell_count_loss(predictions: &[f64], counts: &[f64]) -> Result<f64> {
    if predictions.len() != counts.len() || counts.is_empty() {
        return Err(Error::shape("aux_cell_count_loss", &[predictions.len()], &[counts.len()]));
    }
    Ok(predictions
        .iter()
        .zip(counts)
        .map(|(p, c)| (p - c) * (p - c))
        .sum::<f64>()
        / counts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn sharpen_cases() {
        assert_eq!(sharpen_and_center(&[0.0, 0.0], 1.0, None).unwrap(), vec![0.5, 0.5]);
        let z = [0.3, -2.0, 5.0];
        let p = sharpen_and_center(&z, 0.04, Some(&z)).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(sharpen_and_center(&z, 0.0, None).is_err());
        // Scalar oracle.
        let c = [0.1, 0.2, -0.3];
        let p = sharpen_and_center(&z, 0.5, Some(&c)).unwrap();
        let e: Vec<f64> = (0..3).map(|i| ((z[i] - c[i]) / 0.5).exp()).collect();
        let s: f64 = e.iter().sum();
        for i in 0..3 {
            close(p[i], e[i] / s, 1e-14);
        }
    }

    #[test]
    fn identical_logits_give_entropy() {
        let z = [0.5, 1.5, -0.2, 0.0];
        let temps = Temps {
            student: 0.7,
            teacher: 0.7,
        };
        let l = dino_pair_loss([&z, &z], [&z, &z], temps, None).unwrap();
        let p = sharpen_and_center(&z, 0.7, None).unwrap();
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        close(l, h, 1e-12);
    }

    #[test]
    fn sharp_teacher_limit() {
        let s = [0.2, 1.0, -0.5];
        let t = [0.0, 0.0, 1.0];
        let temps = Temps {
            student: 1.0,
            teacher: 1e-3,
        };
        let l = dino_pair_loss([&s, &s], [&t, &t], temps, None).unwrap();
        let ps = sharpen_and_center(&s, 1.0, None).unwrap();
        close(l, -ps[2].ln(), 1e-9);
    }

    #[test]
    fn tape_pair_loss_matches_scalar_route() {
        let s0 = [0.1, -0.4, 0.9, 0.3, -1.2];
        let s1 = [0.5, 0.2, -0.7, 0.0, 0.8];
        let t0 = [1.0, 0.0, 0.3, -0.2, 0.5];
        let t1 = [-0.3, 0.6, 0.1, 0.9, -0.5];
        let c = [0.05, -0.1, 0.0, 0.2, 0.1];
        let temps = Temps::default();
        let want = dino_pair_loss([&s0, &s1], [&t0, &t1], temps, Some(&c)).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(crate::tensor::Tensor::new(&[1, 5], s0.to_vec()).unwrap());
        let b = tape.constant(crate::tensor::Tensor::new(&[1, 5], s1.to_vec()).unwrap());
        let p0 = sharpen_and_center(&t0, temps.teacher, Some(&c)).unwrap();
        let p1 = sharpen_and_center(&t1, temps.teacher, Some(&c)).unwrap();
        let l = dino_pair_loss_on(&mut tape, [a, b], [&p0, &p1], temps.student).unwrap();
        close(tape.value(l).data()[0], want, 1e-12);
    }

    #[test]
    fn composite_arithmetic_and_skips() {
        let w = LossWeights::default();
        let r = composite_loss(Variant::Dirl, &w, 2, |_| Some(1.0)).unwrap();
        close(r.total, 1.1, 1e-12);
        let mut l = BTreeMap::new();
        l.insert(RepKey::Back, 2.0);
        l.insert(RepKey::SelfBack, 3.0);
        l.insert(RepKey::CrossBack, 5.0);
        let r = composite_loss(Variant::Dirl, &w, 2, |k| l.get(&k).copied()).unwrap();
        close(r.total, 0.5 * 2.0 + 0.025 * 8.0, 1e-12);
        assert_eq!(
            r.skipped(),
            vec![RepKey::Cell, RepKey::SelfCell, RepKey::CrossCell]
        );
        assert!(matches!(
            composite_loss(Variant::Cellback, &w, 2, |_| None),
            Err(Error::NoSignal(_))
        ));
    }

    #[test]
    fn aux_cases() {
        assert_eq!(aux_cell_count_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(aux_cell_count_loss(&[0.0; 4], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.5);
        assert!(aux_cell_count_loss(&[0.0], &[]).is_err());
    }
}
