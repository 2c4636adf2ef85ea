//! Transposed (channel) attention and the masked separable attention block.
//!
//! A branch builds `Q`, `K`, `V` with a 1×1 convolution followed by a 3×3
//! depthwise convolution each, reshapes them to `C_h × HW` per head, and
//! forms the `C_h × C_h` affinity `Q·Kᵀ / α`. The softmax runs over the last
//! axis of that matrix and the head output is `V` (as `HW × C_h`) times the
//! attention matrix. Foreground and background branches multiply `Q` and `K`
//! by the mask or its complement before the product; `V` is never masked.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::ConvOpts;
use crate::params::{Bound, Conv, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tolerance for mask values outside `[0, 1]`.
pub const MASK_TOLERANCE: f64 = 1e-6;

/// Head counts of the three groups inside one MSA block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadGroupConfig {
    pub heads_fta: usize,
    pub heads_bta: usize,
    pub heads_ta: usize,
}

impl HeadGroupConfig {
    pub const fn new(heads_fta: usize, heads_bta: usize, heads_ta: usize) -> Self {
        Self {
            heads_fta,
            heads_bta,
            heads_ta,
        }
    }

    /// Equal thirds; any remainder goes to the plain TA group.
    pub const fn split(total: usize) -> Self {
        let third = total / 3;
        Self::new(third, third, total - 2 * third)
    }

    pub const fn total(&self) -> usize {
        self.heads_fta + self.heads_bta + self.heads_ta
    }

    /// `C_d / total heads`; fails unless the division is exact.
    pub fn channels_per_head(&self, cd: usize) -> Result<usize> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("no attention heads configured".into()));
        }
        if !cd.is_multiple_of(total) {
            return Err(Error::InvalidArgument(format!(
                "{total} heads do not divide {cd} channels"
            )));
        }
        Ok(cd / total)
    }
}

/// Default head split for a decoder width: 8 heads when they divide `cd`,
/// otherwise the largest count from {6, 4, 3, 2, 1} that does.
pub fn default_heads(cd: usize) -> HeadGroupConfig {
    let total = [8, 6, 4, 3, 2, 1]
        .into_iter()
        .find(|&h| cd.is_multiple_of(h))
        .unwrap_or(1);
    HeadGroupConfig::split(total)
}

/// Checks a mask against a `C×H×W` feature: shape `1×H×W`, values in `[0, 1]`.
pub fn validate_mask(mask: &Tensor, x_shape: &[usize]) -> Result<()> {
    let expected = [1, x_shape[1], x_shape[2]];
    if mask.shape() != expected {
        return Err(Error::shape(
            "mask",
            format!("expected {:?}, got {:?}", expected, mask.shape()),
        ));
    }
    if let Some(v) = mask
        .data()
        .iter()
        .find(|v| !(-MASK_TOLERANCE..=1.0 + MASK_TOLERANCE).contains(*v))
    {
        return Err(Error::InvalidArgument(format!("mask value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Weights of one attention branch (a group of heads sharing projections).
#[derive(Debug, Clone)]
pub struct TaBranch {
    pub heads: usize,
    pub head_dim: usize,
    pub q_proj: Conv,
    pub q_dw: Conv,
    pub k_proj: Conv,
    pub k_dw: Conv,
    pub v_proj: Conv,
    pub v_dw: Conv,
    /// `ln α` per head; `α = exp(log_alpha) > 0`.
    pub log_alpha: ParamId,
}

impl TaBranch {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = heads * head_dim;
        let mut pair = |tag: &str, rng: &mut R| -> Result<(Conv, Conv)> {
            let proj = Conv::register(
                store,
                &format!("{name}.{tag}_proj"),
                c_in,
                width,
                1,
                ConvOpts::new(1),
                rng,
            )?;
            let dw = Conv::register(
                store,
                &format!("{name}.{tag}_dw"),
                width,
                width,
                3,
                ConvOpts::depthwise(),
                rng,
            )?;
            Ok((proj, dw))
        };
        let (q_proj, q_dw) = pair("q", rng)?;
        let (k_proj, k_dw) = pair("k", rng)?;
        let (v_proj, v_dw) = pair("v", rng)?;
        let log_alpha = store.add(format!("{name}.log_alpha"), Tensor::zeros([heads]));
        Ok(Self {
            heads,
            head_dim,
            q_proj,
            q_dw,
            k_proj,
            k_dw,
            v_proj,
            v_dw,
            log_alpha,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Runs the branch on `x`; with `mask`, `Q` and `K` are multiplied by it.
    /// Output has `heads · head_dim` channels at the input resolution.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let (_, h, w) = tape.value(x).dims3()?;
        if let Some(m) = mask {
            validate_mask(tape.value(m), tape.value(x).shape())?;
        }
        let project = |tape: &mut Tape, proj: &Conv, dw: &Conv| -> Result<Var> {
            let p = proj.apply(tape, bound, x)?;
            dw.apply(tape, bound, p)
        };
        let mut q = project(tape, &self.q_proj, &self.q_dw)?;
        let mut k = project(tape, &self.k_proj, &self.k_dw)?;
        let v = project(tape, &self.v_proj, &self.v_dw)?;
        if let Some(m) = mask {
            q = tape.mul(q, m)?;
            k = tape.mul(k, m)?;
        }
        let hw = h * w;
        let q = tape.reshape(q, [self.width(), hw])?;
        let k = tape.reshape(k, [self.width(), hw])?;
        let v = tape.reshape(v, [self.width(), hw])?;
        let neg = tape.scale(bound[self.log_alpha], -1.0)?;
        let inv_alpha = tape.exp(neg)?;

        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let start = head * self.head_dim;
            let qh = tape.narrow(q, start, self.head_dim)?;
            let kh = tape.narrow(k, start, self.head_dim)?;
            let vh = tape.narrow(v, start, self.head_dim)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let inv = tape.narrow(inv_alpha, head, 1)?;
            let logits = tape.scale_by(logits, inv)?;
            let attn = tape.softmax_lastdim(logits)?;
            // (V · A)ᵀ = Aᵀ · Vᵀ with V stored channel-major.
            let at = tape.transpose(attn)?;
            outs.push(tape.matmul(at, vh)?);
        }
        let joined = tape.concat(&outs)?;
        tape.reshape(joined, [self.width(), h, w])
    }
}

/// Masked separable attention: F-TA, B-TA and TA head groups, concatenated
/// and mixed by a 3×3 convolution back to `C_d` channels. With zero heads in
/// total the block is the identity.
#[derive(Debug, Clone)]
pub struct Msa {
    pub cfg: HeadGroupConfig,
    pub channels: usize,
    pub fta: Option<TaBranch>,
    pub bta: Option<TaBranch>,
    pub ta: Option<TaBranch>,
    pub out: Option<Conv>,
}

impl Msa {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cd: usize,
        cfg: HeadGroupConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.total() == 0 {
            return Ok(Self {
                cfg,
                channels: cd,
                fta: None,
                bta: None,
                ta: None,
                out: None,
            });
        }
        let head_dim = cfg.channels_per_head(cd)?;
        let mut branch = |tag: &str, heads: usize, rng: &mut R| -> Result<Option<TaBranch>> {
            if heads == 0 {
                return Ok(None);
            }
            TaBranch::register(store, &format!("{name}.{tag}"), cd, heads, head_dim, rng).map(Some)
        };
        let fta = branch("fta", cfg.heads_fta, rng)?;
        let bta = branch("bta", cfg.heads_bta, rng)?;
        let ta = branch("ta", cfg.heads_ta, rng)?;
        let out = Conv::register(store, &format!("{name}.out"), cd, cd, 3, ConvOpts::new(1), rng)?;
        Ok(Self {
            cfg,
            channels: cd,
            fta,
            bta,
            ta,
            out: Some(out),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.cfg.total() == 0
    }

    /// Concatenated `[F-TA, B-TA, TA]` outputs before the mixing conv.
    pub fn branches(&self, tape: &mut Tape, bound: &Bound, x: Var, fg_mask: Var) -> Result<Var> {
        validate_mask(tape.value(fg_mask), tape.value(x).shape())?;
        let mut parts = Vec::with_capacity(3);
        if let Some(b) = &self.fta {
            parts.push(b.forward(tape, bound, x, Some(fg_mask))?);
        }
        if let Some(b) = &self.bta {
            let ones = tape.constant(Tensor::ones(tape.value(fg_mask).shape().to_vec()));
            let bg = tape.sub(ones, fg_mask)?;
            parts.push(b.forward(tape, bound, x, Some(bg))?);
        }
        if let Some(b) = &self.ta {
            parts.push(b.forward(tape, bound, x, None)?);
        }
        tape.concat(&parts)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, fg_mask: Var) -> Result<Var> {
        let (c, _, _) = tape.value(x).dims3()?;
        if c != self.channels {
            return Err(Error::shape(
                "msa",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        match &self.out {
            None => {
                validate_mask(tape.value(fg_mask), tape.value(x).shape())?;
                Ok(x)
            }
            Some(out) => {
                let cat = self.branches(tape, bound, x, fg_mask)?;
                out.apply(tape, bound, cat)
            }
        }
    }
}

/// Plain TA on a tensor, outside any training tape.
pub fn ta_forward(x: &Tensor, store: &ParamStore, branch: &TaBranch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind_constant(&mut tape);
    let xv = tape.constant(x.clone());
    let y = branch.forward(&mut tape, &bound, xv, None)?;
    Ok(tape.value(y).clone())
}

/// Masked TA (`Q ⊙ mask`, `K ⊙ mask`, `V` unmasked) on a tensor.
pub fn masked_ta_forward(x: &Tensor, mask: &Tensor, store: &ParamStore, branch: &TaBranch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind_constant(&mut tape);
    let xv = tape.constant(x.clone());
    let mv = tape.constant(mask.clone());
    let y = branch.forward(&mut tape, &bound, xv, Some(mv))?;
    Ok(tape.value(y).clone())
}

/// Full MSA block on a tensor.
pub fn msa_forward(x: &Tensor, fg_mask: &Tensor, store: &ParamStore, msa: &Msa) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind_constant(&mut tape);
    let xv = tape.constant(x.clone());
    let mv = tape.constant(fg_mask.clone());
    let y = msa.forward(&mut tape, &bound, xv, mv)?;
    Ok(tape.value(y).clone())
}
