//! Momentum teacher: EMA of the student plus running output centers.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::RepKey;

/// `teacher ← m·teacher + (1 − m)·student` for every tensor.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum {m} outside [0, 1]")));
    }
    teacher.check_compatible(student)?;
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// `center ← c_m·center + (1 − c_m)·mean(logits)`. An empty batch leaves the
/// center unchanged.
pub fn center_update(center: &Tensor, batch: &[&[f64]], momentum: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("center momentum {momentum} outside [0, 1]")));
    }
    if batch.is_empty() {
        return Ok(center.clone());
    }
    let k = center.len();
    let mut mean = vec![0.0; k];
    for row in batch {
        if row.len() != k {
            return Err(Error::shape("center_update", center.shape(), &[row.len()]));
        }
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let data = center
        .data()
        .iter()
        .zip(&mean)
        .map(|(c, s)| momentum * c + (1.0 - momentum) * s * inv)
        .collect();
    Tensor::new(center.shape(), data)
}

/// Teacher parameters plus one center per head.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ParamSet,
    pub centers: Vec<(RepKey, Tensor)>,
    pub center_momentum: f64,
}

impl TeacherState {
    pub fn center(&self, key: RepKey) -> Option<&Tensor> {
        self.centers.iter().find(|(k, _)| *k == key).map(|(_, c)| c)
    }

    pub fn ema(&mut self, student: &ParamSet, m: f64) -> Result<()> {
        ema_update(&mut self.params, student, m)
    }

    /// Updates every head's center from the logits gathered for it.
    pub fn update_centers(&mut self, batch: &[(RepKey, Vec<Vec<f64>>)]) -> Result<()> {
        for (key, center) in self.centers.iter_mut() {
            if let Some((_, rows)) = batch.iter().find(|(k, _)| k == key) {
                let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                *center = center_update(center, &refs, self.center_momentum)?;
            }
        }
        if self.centers.iter().any(|(_, c)| !c.is_finite()) {
            return Err(Error::NonFinite("teacher center".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_of(v: f64) -> ParamSet {
        let mut s = ParamSet::new();
        s.add("a", Tensor::full(&[2, 2], v));
        s
    }

    #[test]
    fn ema_cases() {
        let mut t = set_of(1.0);
        ema_update(&mut t, &set_of(0.0), 0.9).unwrap();
        assert!(t.tensors()[0].data().iter().all(|v| (*v - 0.9).abs() < 1e-15));
        let mut t = set_of(0.3);
        ema_update(&mut t, &set_of(0.3), 0.5).unwrap();
        assert!(t.tensors()[0].data().iter().all(|v| *v == 0.3));
        let mut other = ParamSet::new();
        other.add("a", Tensor::zeros(&[3]));
        assert!(matches!(
            ema_update(&mut set_of(1.0), &other, 0.5),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn center_cases() {
        let c = Tensor::vector(vec![5.0, 5.0]);
        let out = center_update(&c, &[&[1.0, 2.0], &[3.0, 4.0]], 0.0).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
        let l = Tensor::vector(vec![0.7, -0.2]);
        let out = center_update(&l, &[&[0.7, -0.2], &[0.7, -0.2]], 0.9).unwrap();
        assert_eq!(out, l);
        assert_eq!(center_update(&c, &[], 0.9).unwrap(), c);
    }
}
