//! Central-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst element of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.failures > 0)
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(p.clone(), i))
        .collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[1]));
    }
    let loss = v.data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss = {loss}")));
    }
    Ok(loss)
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// An element fails when `|analytic - numeric| / max(1, |numeric|) > tol`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!("grad_check step {h} outside [1e-6, 1e-4]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(p.clone(), i))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (slot, g) in grads.param_grads() {
        analytic[slot] = g;
    }

    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut check = ParamCheck {
            param: pi,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            failures: 0,
        };
        for e in 0..p.len() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > tol {
                check.failures += 1;
            }
            if rel >= check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_element = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        tol,
        params: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |t, v| {
                let sq = t.matmul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[Tensor::new(&[1, 1], vec![3.0]).unwrap()],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
        assert!((report.params[0].analytic - 6.0).abs() < 1e-12);
        assert!((report.params[0].numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::new(&[1, 4], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone(), 0);
        let s = tape.softmax_rows(v, None).unwrap();
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        for x in g.wrt(v).unwrap().data() {
            assert!(x.abs() < 1e-15);
        }
        let report = grad_check(
            |t, v| {
                let s = t.softmax_rows(v[0], None)?;
                Ok(t.sum(s))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let err = grad_check(
            |t, v| {
                let l = t.scale(v[0], f64::INFINITY);
                Ok(t.sum(l))
            },
            &[Tensor::new(&[1, 1], vec![1.0]).unwrap()],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn step_outside_range_rejected() {
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[Tensor::zeros(&[1])], 1e-2, 1e-4);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
