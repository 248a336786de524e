//! Patch-tokenizing pre-norm transformer encoder.
//!
//! No class token: the image-level representation is the mean of the final
//! tokens. Attention probabilities of every block and head are recorded so
//! the analysis tools can inspect them.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Binder, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Which width divides the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnScale {
    /// `1/sqrt(d / h)`
    #[default]
    Head,
    /// `1/sqrt(d)`
    Model,
}

impl std::str::FromStr for AttnScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(AttnScale::Head),
            "model" => Ok(AttnScale::Model),
            other => Err(Error::Config(format!(
                "attention scale `{other}` (expected head|model)"
            ))),
        }
    }
}

impl std::fmt::Display for AttnScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttnScale::Head => "head",
            AttnScale::Model => "model",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_w: usize,
    pub image_h: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
    pub attn_scale: AttnScale,
    /// Pixels enter the patch projection as `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_w: 32,
            image_h: 32,
            patch: 8,
            dim: 32,
            depth: 3,
            heads: 4,
            mlp_ratio: 4.0,
            channels: 3,
            attn_scale: AttnScale::Head,
            pixel_mean: 0.75,
            pixel_std: 0.15,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_w % self.patch != 0 || self.image_h % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_w, self.image_h, self.patch
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if !self.pixel_mean.is_finite() || !(self.pixel_std > 0.0 && self.pixel_std.is_finite()) {
            return Err(Error::Config("pixel_std must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_w / self.patch) * (self.image_h / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn logit_scale(&self) -> f64 {
        match self.attn_scale {
            AttnScale::Head => 1.0 / (self.head_dim() as f64).sqrt(),
            AttnScale::Model => 1.0 / (self.dim as f64).sqrt(),
        }
    }
}

/// Parameter ids of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl BlockParams {
    pub fn init(set: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let hid = cfg.mlp_hidden();
        let mut w = |name: &str, shape: &[usize]| {
            set.add(
                format!("{prefix}.{name}"),
                Tensor::trunc_normal(shape, INIT_STD, rng),
            )
        };
        let wq = w("attn.wq", &[d, d]);
        let wk = w("attn.wk", &[d, d]);
        let wv = w("attn.wv", &[d, d]);
        let wo = w("attn.wo", &[d, d]);
        let fc1_w = w("mlp.fc1.w", &[d, hid]);
        let fc2_w = w("mlp.fc2.w", &[hid, d]);
        let mut c = |name: &str, len: usize, v: f64| {
            set.add(format!("{prefix}.{name}"), Tensor::full(&[len], v))
        };
        BlockParams {
            ln1_gain: c("ln1.gain", d, 1.0),
            ln1_bias: c("ln1.bias", d, 0.0),
            wq,
            bq: c("attn.bq", d, 0.0),
            wk,
            bk: c("attn.bk", d, 0.0),
            wv,
            bv: c("attn.bv", d, 0.0),
            wo,
            bo: c("attn.bo", d, 0.0),
            ln2_gain: c("ln2.gain", d, 1.0),
            ln2_bias: c("ln2.bias", d, 0.0),
            fc1_w,
            fc1_b: c("mlp.fc1.b", hid, 0.0),
            fc2_w,
            fc2_b: c("mlp.fc2.b", d, 0.0),
        }
    }

    /// Looks the block's tensors up by name in an existing set.
    pub fn locate(set: &ParamSet, prefix: &str) -> Result<Self> {
        let f = |name: &str| {
            let full = format!("{prefix}.{name}");
            set.find(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))
        };
        Ok(BlockParams {
            ln1_gain: f("ln1.gain")?,
            ln1_bias: f("ln1.bias")?,
            wq: f("attn.wq")?,
            bq: f("attn.bq")?,
            wk: f("attn.wk")?,
            bk: f("attn.bk")?,
            wv: f("attn.wv")?,
            bv: f("attn.bv")?,
            wo: f("attn.wo")?,
            bo: f("attn.bo")?,
            ln2_gain: f("ln2.gain")?,
            ln2_bias: f("ln2.bias")?,
            fc1_w: f("mlp.fc1.w")?,
            fc1_b: f("mlp.fc1.b")?,
            fc2_w: f("mlp.fc2.w")?,
            fc2_b: f("mlp.fc2.b")?,
        })
    }
}

/// Result of one block on the tape: output tokens and per-head attention.
pub struct BlockTrace {
    pub out: Var,
    pub attention: Vec<Var>,
}

pub(crate) fn linear(tape: &mut Tape, b: &mut Binder, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
    let wv = b.var(tape, w);
    let bv = b.var(tape, bias);
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

/// Multi-head self-attention over already-normalized tokens `h`, with an
/// optional additive mask shared by all heads.
pub fn multi_head_attention(
    tape: &mut Tape,
    b: &mut Binder,
    p: &BlockParams,
    cfg: &EncoderConfig,
    h: Var,
    mask: Option<&Tensor>,
) -> Result<(Var, Vec<Var>)> {
    let q = linear(tape, b, h, p.wq, p.bq)?;
    let k = linear(tape, b, h, p.wk, p.bk)?;
    let v = linear(tape, b, h, p.wv, p.bv)?;
    let dh = cfg.head_dim();
    let scale = cfg.logit_scale();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qh = tape.slice_cols(q, i * dh, dh)?;
        let kh = tape.slice_cols(k, i * dh, dh)?;
        let vh = tape.slice_cols(v, i * dh, dh)?;
        let logits = tape.matmul_bt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits, mask)?;
        heads.push(tape.matmul(attn, vh)?);
        attention.push(attn);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok((linear(tape, b, cat, p.wo, p.bo)?, attention))
}

/// `x' = x + MSA(LN(x)); out = x' + MLP(LN(x'))`.
pub fn block_forward(
    tape: &mut Tape,
    b: &mut Binder,
    p: &BlockParams,
    cfg: &EncoderConfig,
    x: Var,
    mask: Option<&Tensor>,
) -> Result<BlockTrace> {
    let g1 = b.var(tape, p.ln1_gain);
    let b1 = b.var(tape, p.ln1_bias);
    let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
    let (attn_out, attention) = multi_head_attention(tape, b, p, cfg, h, mask)?;
    let x1 = tape.add(x, attn_out)?;

    let g2 = b.var(tape, p.ln2_gain);
    let b2 = b.var(tape, p.ln2_bias);
    let h2 = tape.layer_norm(x1, g2, b2, LN_EPS)?;
    let m = linear(tape, b, h2, p.fc1_w, p.fc1_b)?;
    let m = tape.gelu(m);
    let m = linear(tape, b, m, p.fc2_w, p.fc2_b)?;
    let out = tape.add(x1, m)?;
    Ok(BlockTrace { out, attention })
}

/// Token representations at some depth.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor,
    pub depth: usize,
}

/// Post-softmax attention, indexed `[block][head]`, each `n × n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn head_mean(&self, layer: usize) -> Result<Tensor> {
        let heads = self.layers.get(layer).ok_or(Error::Index {
            what: "attention layer",
            index: layer,
            len: self.layers.len(),
        })?;
        Ok(mean_of(heads))
    }
}

pub(crate) fn mean_of(mats: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(mats[0].shape());
    for m in mats {
        for (a, x) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += x;
        }
    }
    let inv = 1.0 / mats.len() as f64;
    acc.map(|v| v * inv)
}

/// Architecture of the encoder plus the ids of its tensors in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_proj: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Tape handles for one encoder pass.
pub struct EncoderTrace {
    pub tokens: Var,
    pub attention: Vec<Vec<Var>>,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn init(set: &mut ParamSet, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_proj = set.add(
            "encoder.patch_proj",
            Tensor::trunc_normal(&[cfg.patch_dim(), cfg.dim], INIT_STD, rng),
        );
        let pos_embed = set.add(
            "encoder.pos_embed",
            Tensor::trunc_normal(&[cfg.tokens(), cfg.dim], INIT_STD, rng),
        );
        let blocks = (0..cfg.depth)
            .map(|i| BlockParams::init(set, &format!("encoder.blocks.{i}"), cfg, rng))
            .collect();
        Ok(Encoder {
            config: cfg.clone(),
            patch_proj,
            pos_embed,
            blocks,
        })
    }

    pub fn locate(set: &ParamSet, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let find = |name: &str| {
            set.find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let enc = Encoder {
            config: cfg.clone(),
            patch_proj: find("encoder.patch_proj")?,
            pos_embed: find("encoder.pos_embed")?,
            blocks: (0..cfg.depth)
                .map(|i| BlockParams::locate(set, &format!("encoder.blocks.{i}")))
                .collect::<Result<_>>()?,
        };
        let proj = set.get(enc.patch_proj).shape();
        if proj != [cfg.patch_dim(), cfg.dim] {
            return Err(Error::Checkpoint(format!(
                "patch projection {proj:?} does not match config"
            )));
        }
        Ok(enc)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if image.width() as usize != c.image_w || image.height() as usize != c.image_h {
            return Err(Error::Config(format!(
                "image {}x{} but encoder expects {}x{}",
                image.width(),
                image.height(),
                c.image_w,
                c.image_h
            )));
        }
        Ok(())
    }

    /// `T0 = patches · E + pos`.
    pub fn embed_on(&self, tape: &mut Tape, b: &mut Binder, image: &Image) -> Result<Var> {
        self.check_image(image)?;
        let (mean, std) = (self.config.pixel_mean, self.config.pixel_std);
        let x = tape.constant(image.patches(self.config.patch)?.map(|v| (v - mean) / std));
        let e = b.var(tape, self.patch_proj);
        let pos = b.var(tape, self.pos_embed);
        let t = tape.matmul(x, e)?;
        tape.add(t, pos)
    }

    pub fn forward_on(&self, tape: &mut Tape, b: &mut Binder, image: &Image) -> Result<EncoderTrace> {
        let mut x = self.embed_on(tape, b, image)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let trace = block_forward(tape, b, block, &self.config, x, None)?;
            x = trace.out;
            attention.push(trace.attention);
        }
        debug_assert!(attention.iter().all(|heads| {
            let n = self.config.tokens() as f64;
            let total: f64 =
                heads.iter().map(|h| tape.value(*h).sum()).sum::<f64>() / heads.len() as f64;
            (total - n).abs() <= 1e-4
        }));
        Ok(EncoderTrace {
            tokens: x,
            attention,
        })
    }

    /// Depth-0 tokens of an image.
    pub fn patch_embed(&self, set: &ParamSet, image: &Image) -> Result<TokenMatrix> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(set);
        let t = self.embed_on(&mut tape, &mut b, image)?;
        Ok(TokenMatrix {
            tokens: tape.value(t).clone(),
            depth: 0,
        })
    }

    /// Full encoder pass: final tokens and every block's attention.
    pub fn encode(&self, set: &ParamSet, image: &Image) -> Result<(TokenMatrix, AttentionRecord)> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(set);
        let trace = self.forward_on(&mut tape, &mut b, image)?;
        let record = AttentionRecord {
            layers: trace
                .attention
                .iter()
                .map(|heads| heads.iter().map(|h| tape.value(*h).clone()).collect())
                .collect(),
        };
        Ok((
            TokenMatrix {
                tokens: tape.value(trace.tokens).clone(),
                depth: self.blocks.len(),
            },
            record,
        ))
    }
}

/// Applies one block to a token matrix outside of training.
pub fn transformer_block(
    set: &ParamSet,
    block: &BlockParams,
    cfg: &EncoderConfig,
    t: &TokenMatrix,
) -> Result<(TokenMatrix, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let mut b = Binder::frozen(set);
    let x = tape.constant(t.tokens.clone());
    let trace = block_forward(&mut tape, &mut b, block, cfg, x, None)?;
    Ok((
        TokenMatrix {
            tokens: tape.value(trace.out).clone(),
            depth: t.depth + 1,
        },
        trace
            .attention
            .iter()
            .map(|a| tape.value(*a).clone())
            .collect(),
    ))
}

/// Mean over tokens.
pub fn mean_pool(t: &TokenMatrix) -> Tensor {
    t.tokens.mean_rows()
}
