//! A small reverse-mode tape over [`Tensor`] values.
//!
//! A [`Tape`] lives for one forward/backward pass. Leaves are either
//! parameters (tagged with a slot id so gradients can be routed back to a
//! [`crate::params::ParamSet`]) or constants. Nodes that do not depend on any
//! parameter are never visited during backward, so a teacher forward pass on a
//! tape costs only the forward arithmetic.

use crate::error::{Error, Result};
use crate::tensor::{
    gelu, gelu_grad, gemm_acc, gemm_at_acc, gemm_bt_acc, row_stats, softmax_rows, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SubsetMean {
        x: Var,
        rows: Vec<usize>,
    },
    GatherRow {
        x: Var,
        row: usize,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        temp: f64,
        probs: Vec<f64>,
    },
    Mse {
        x: Var,
        target: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
    needs_grad: bool,
}

/// Records operations for one forward pass and replays them backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// `(slot, gradient)` for every parameter leaf that received a gradient.
    /// A slot registered twice on the tape has its gradients summed.
    pub fn param_grads(&self) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> = Vec::new();
        for &(slot, node) in &self.params {
            let Some(g) = &self.by_node[node] else {
                continue;
            };
            if let Some((_, acc)) = out.iter_mut().find(|(s, _)| *s == slot) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            } else {
                out.push((slot, g.clone()));
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, deps: &[Var]) -> Var {
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf routed to parameter slot `slot`.
    pub fn param(&mut self, value: Tensor, slot: usize) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(slot),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[p×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, p) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(Error::shape("matmul_bt", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * p];
        gemm_bt_acc(av.data(), bv.data(), &mut out, m, k, p);
        let out = Tensor::new(&[m, p], out)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        if bv.len() != c {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, rs) = row_stats(row, eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Row softmax of `x + mask`; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let out = softmax_rows(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c || len == 0 {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                self.value(parts[0]).shape(),
                self.value(parts[parts.len() - 1]).shape(),
            ));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean of the listed rows as a `1 × cols` matrix.
    pub fn subset_mean(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if rows.is_empty() {
            return Err(Error::EmptyRegion("subset_mean".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::Index {
                what: "subset_mean",
                index: bad,
                len: xv.rows(),
            });
        }
        let c = xv.cols();
        let out = xv.subset_mean(rows).reshape(&[1, c])?;
        Ok(self.push(
            out,
            Op::SubsetMean {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let rows: Vec<usize> = (0..self.value(x).rows()).collect();
        self.subset_mean(x, &rows)
    }

    pub fn gather_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xv = self.value(x);
        if row >= xv.rows() {
            return Err(Error::Index {
                what: "gather_row",
                index: row,
                len: xv.rows(),
            });
        }
        let out = Tensor::new(&[1, xv.cols()], xv.row(row).to_vec())?;
        Ok(self.push(out, Op::GatherRow { x, row }, &[x]))
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2NormRows { x, norms }, &[x])
    }

    /// `-Σ target · log softmax(logits / temp)` for a single row of logits.
    /// The target is a constant (no gradient flows into it).
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &[f64], temp: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != target.len() {
            return Err(Error::shape("soft_cross_entropy", lv.shape(), &[target.len()]));
        }
        let scaled: Vec<f64> = lv.data().iter().map(|z| z / temp).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let loss: f64 = target
            .iter()
            .zip(&scaled)
            .map(|(t, s)| if *t == 0.0 { 0.0 } else { -t * (s - lse) })
            .sum();
        let probs: Vec<f64> = scaled.iter().map(|s| (s - lse).exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target: target.to_vec(),
                temp,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(Error::shape("mse", xv.shape(), &[target.len()]));
        }
        let loss = xv
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            &[x],
        ))
    }

    /// `Σ wᵢ · xᵢ` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Data("weighted_sum of nothing".into()))?;
        let mut out = Tensor::zeros(self.value(first.0).shape());
        for &(v, w) in terms {
            let val = self.value(v);
            if val.shape() != out.shape() {
                return Err(Error::shape("weighted_sum", out.shape(), val.shape()));
            }
            for (o, x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += w * x;
            }
        }
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), &deps))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape("backward", rv.shape(), &[1]));
        }
        if !rv.is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", rv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| n.param.map(|s| (s, i)))
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, p) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    acc(*a, &mut |ga| gemm_bt_acc(gd, bv.data(), ga, m, p, k));
                }
                if needs(*b) {
                    acc(*b, &mut |gb| gemm_at_acc(av.data(), gd, gb, m, k, p));
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, p) = (av.rows(), av.cols(), bv.rows());
                if needs(*a) {
                    acc(*a, &mut |ga| gemm_acc(gd, bv.data(), ga, m, p, k));
                }
                if needs(*b) {
                    acc(*b, &mut |gb| gemm_at_acc(gd, av.data(), gb, m, p, k));
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(*a, &mut |ga| add_into(ga, gt.data()));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| add_into(gb, gd));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                let c = g.cols();
                acc(*b, &mut |gb| {
                    for (i, x) in gd.iter().enumerate() {
                        gb[i % c] += x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (o, x) in ga.iter_mut().zip(gd) {
                    *o += s * x;
                }
            }),
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, x), gi) in ga.iter_mut().zip(xv).zip(gd) {
                        *o += gi * gelu_grad(*x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let rows = g.rows();
                let gamma = self.value(*gain).data();
                acc(*bias, &mut |gb| {
                    for (i, x) in gd.iter().enumerate() {
                        gb[i % d] += x;
                    }
                });
                acc(*gain, &mut |gg| {
                    for (i, x) in gd.iter().enumerate() {
                        gg[i % d] += x * xhat[i];
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let gh = gd[r * d + j] * gamma[j];
                            mean_g += gh;
                            mean_gx += gh * xhat[r * d + j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            let gh = gd[r * d + j] * gamma[j];
                            gx[r * d + j] +=
                                rstd[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |ga| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let src_c = self.value(*x).cols();
                let len = g.cols();
                acc(*x, &mut |gx| {
                    for r in 0..g.rows() {
                        for j in 0..len {
                            gx[r * src_c + start + j] += gd[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    acc(*p, &mut |gp| {
                        for r in 0..g.rows() {
                            for j in 0..pc {
                                gp[r * pc + j] += gd[r * total + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SubsetMean { x, rows } => {
                let c = g.cols();
                let inv = 1.0 / rows.len() as f64;
                acc(*x, &mut |gx| {
                    for &r in rows {
                        for j in 0..c {
                            gx[r * c + j] += gd[j] * inv;
                        }
                    }
                });
            }
            Op::GatherRow { x, row } => {
                let c = g.cols();
                acc(*x, &mut |gx| add_into(&mut gx[row * c..(row + 1) * c], gd));
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |gx| {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                temp,
                probs,
            } => {
                let tsum: f64 = target.iter().sum();
                let s = gd[0] / temp;
                acc(*logits, &mut |gl| {
                    for ((o, p), t) in gl.iter_mut().zip(probs).zip(target) {
                        *o += s * (p * tsum - t);
                    }
                });
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let s = 2.0 * gd[0] / target.len() as f64;
                acc(*x, &mut |gx| {
                    for ((o, a), b) in gx.iter_mut().zip(xv).zip(target) {
                        *o += s * (a - b);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, &mut |gv| {
                        for (o, x) in gv.iter_mut().zip(gd) {
                            *o += w * x;
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                acc(*a, &mut |ga| {
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
