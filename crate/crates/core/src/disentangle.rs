//! Region pooling and the masked disentangle block.
//!
//! Given final tokens `T_L` and a binary cell prior `P`, tokens split into cell
//! tokens (`P = 1`) and background tokens (`P = 0`). Two additive masks
//! restrict attention: `m_self` keeps pairs from the same region, `m_cross`
//! keeps pairs from different regions plus the diagonal. Running one block
//! under each mask and pooling each output by region yields `f_cc`, `f_bb`
//! (self path) and `f_cb`, `f_bc` (cross path).

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::cell_prior::CellPrior;
use crate::encoder::{block_forward, multi_head_attention, BlockParams, EncoderConfig, TokenMatrix};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskPair {
    pub m_self: Tensor,
    pub m_cross: Tensor,
}

/// Builds `m_self` / `m_cross` (entries `0` or `-inf`) from a prior.
pub fn build_masks(prior: &CellPrior) -> AttentionMaskPair {
    let n = prior.n();
    let mut m_self = Tensor::zeros(&[n, n]);
    let mut m_cross = Tensor::zeros(&[n, n]);
    let bits = prior.bits();
    for i in 0..n {
        for j in 0..n {
            let same = bits[i] == bits[j];
            if !same {
                m_self.data_mut()[i * n + j] = f64::NEG_INFINITY;
            }
            if same && i != j {
                m_cross.data_mut()[i * n + j] = f64::NEG_INFINITY;
            }
        }
    }
    AttentionMaskPair { m_self, m_cross }
}

/// Region means `(f_c, f_b)` of a token matrix; an empty region yields `None`.
pub fn cell_back_pool(t: &TokenMatrix, prior: &CellPrior) -> Result<(Option<Tensor>, Option<Tensor>)> {
    check_prior(t, prior)?;
    Ok((region_mean(&t.tokens, &prior.cell_indices()), region_mean(&t.tokens, &prior.back_indices())))
}

fn region_mean(t: &Tensor, rows: &[usize]) -> Option<Tensor> {
    (!rows.is_empty()).then(|| t.subset_mean(rows))
}

fn check_prior(t: &TokenMatrix, prior: &CellPrior) -> Result<()> {
    if prior.n() != t.tokens.rows() {
        return Err(Error::shape("prior", &[prior.n()], t.tokens.shape()));
    }
    Ok(())
}

/// `(f_cc, f_bb, f_cb, f_bc)`: cell/background means of the self-path and
/// cross-path outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledReps {
    pub cc: Option<Tensor>,
    pub bb: Option<Tensor>,
    pub cb: Option<Tensor>,
    pub bc: Option<Tensor>,
}

pub fn disentangled_pool(
    t_self: &TokenMatrix,
    t_cross: &TokenMatrix,
    prior: &CellPrior,
) -> Result<DisentangledReps> {
    check_prior(t_self, prior)?;
    check_prior(t_cross, prior)?;
    let (cell, back) = (prior.cell_indices(), prior.back_indices());
    Ok(DisentangledReps {
        cc: region_mean(&t_self.tokens, &cell),
        bb: region_mean(&t_self.tokens, &back),
        cb: region_mean(&t_cross.tokens, &cell),
        bc: region_mean(&t_cross.tokens, &back),
    })
}

/// Parameters of the disentangle block. With shared parameters both paths
/// point at the same tensors.
#[derive(Debug, Clone)]
pub struct DisentangleBlock {
    pub self_path: BlockParams,
    pub cross_path: BlockParams,
    pub shared: bool,
}

/// Tape handles for one disentangle pass.
pub struct DisentangleTrace {
    pub t_self: Var,
    pub t_cross: Var,
    pub attn_self: Vec<Var>,
    pub attn_cross: Vec<Var>,
}

impl DisentangleBlock {
    pub fn init(set: &mut ParamSet, cfg: &EncoderConfig, shared: bool, rng: &mut impl Rng) -> Self {
        if shared {
            let p = BlockParams::init(set, "disentangle.block", cfg, rng);
            DisentangleBlock {
                self_path: p.clone(),
                cross_path: p,
                shared,
            }
        } else {
            DisentangleBlock {
                self_path: BlockParams::init(set, "disentangle.self", cfg, rng),
                cross_path: BlockParams::init(set, "disentangle.cross", cfg, rng),
                shared,
            }
        }
    }

    pub fn locate(set: &ParamSet) -> Result<Self> {
        if let Ok(p) = BlockParams::locate(set, "disentangle.block") {
            return Ok(DisentangleBlock {
                self_path: p.clone(),
                cross_path: p,
                shared: true,
            });
        }
        Ok(DisentangleBlock {
            self_path: BlockParams::locate(set, "disentangle.self")?,
            cross_path: BlockParams::locate(set, "disentangle.cross")?,
            shared: false,
        })
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        cfg: &EncoderConfig,
        t_l: Var,
        masks: &AttentionMaskPair,
    ) -> Result<DisentangleTrace> {
        let s = block_forward(tape, b, &self.self_path, cfg, t_l, Some(&masks.m_self))?;
        let c = block_forward(tape, b, &self.cross_path, cfg, t_l, Some(&masks.m_cross))?;
        Ok(DisentangleTrace {
            t_self: s.out,
            t_cross: c.out,
            attn_self: s.attention,
            attn_cross: c.attention,
        })
    }
}

/// Masked multi-head attention applied directly to `t` (no norm, no
/// residual). Returns the attention output and the per-head weights.
pub fn masked_msa(
    set: &ParamSet,
    block: &BlockParams,
    cfg: &EncoderConfig,
    t: &TokenMatrix,
    mask: &Tensor,
) -> Result<(TokenMatrix, Vec<Tensor>)> {
    let n = t.tokens.rows();
    if mask.shape() != [n, n] {
        return Err(Error::shape("masked_msa", mask.shape(), &[n, n]));
    }
    let mut tape = Tape::new();
    let mut b = Binder::frozen(set);
    let x = tape.constant(t.tokens.clone());
    let (out, attn) = multi_head_attention(&mut tape, &mut b, block, cfg, x, Some(mask))?;
    Ok((
        TokenMatrix {
            tokens: tape.value(out).clone(),
            depth: t.depth,
        },
        attn.iter().map(|a| tape.value(*a).clone()).collect(),
    ))
}

/// Output of [`disentangle_block`].
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangleOutput {
    pub t_self: TokenMatrix,
    pub t_cross: TokenMatrix,
    /// Per-head masked attention of the self path.
    pub attn_self: Vec<Tensor>,
    /// Per-head masked attention of the cross path.
    pub attn_cross: Vec<Tensor>,
}

pub fn disentangle_block(
    set: &ParamSet,
    block: &DisentangleBlock,
    cfg: &EncoderConfig,
    t_l: &TokenMatrix,
    prior: &CellPrior,
) -> Result<DisentangleOutput> {
    check_prior(t_l, prior)?;
    let masks = build_masks(prior);
    let mut tape = Tape::new();
    let mut b = Binder::frozen(set);
    let x = tape.constant(t_l.tokens.clone());
    let trace = block.forward_on(&mut tape, &mut b, cfg, x, &masks)?;
    let grab = |tape: &Tape, v: &[Var]| v.iter().map(|a| tape.value(*a).clone()).collect();
    Ok(DisentangleOutput {
        t_self: TokenMatrix {
            tokens: tape.value(trace.t_self).clone(),
            depth: t_l.depth + 1,
        },
        t_cross: TokenMatrix {
            tokens: tape.value(trace.t_cross).clone(),
            depth: t_l.depth + 1,
        },
        attn_self: grab(&tape, &trace.attn_self),
        attn_cross: grab(&tape, &trace.attn_cross),
    })
}
