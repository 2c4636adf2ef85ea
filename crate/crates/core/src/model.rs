//! Encoder stub, top-level aggregation, progressive refinement decoder with
//! per-level MSA, and side-output mask heads.
//!
//! Level bookkeeping (input `H×W`):
//!
//! | level | feature | stride | mask used by the MSA producing it |
//! |-------|---------|--------|-----------------------------------|
//! | 5     | `E_5`   | 32     | –                                 |
//! | 4     | `D_4`   | 32     | `P_5`                             |
//! | 3     | `D_3`   | 16     | `P_4`                             |
//! | 2     | `D_2`   | 8      | `P_3`                             |
//! | 1     | `D_1`   | 4      | `P_2`                             |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{default_heads, HeadGroupConfig, Msa};
use crate::error::{Error, Result};
use crate::loss::{self, LossReport};
use crate::ops::{self, ConvOpts};
use crate::params::{Bound, Conv, ParamStore};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Strides of `E_1..E_5`.
pub const STRIDES: [usize; 5] = [4, 8, 16, 32, 32];
/// Decoder widths that the reference grid covers; others are accepted with a warning.
pub const KNOWN_WIDTHS: [usize; 5] = [32, 64, 128, 192, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Centered uniform, `1/sqrt(fan_in)` bound, zero biases.
    Uniform,
    /// Every parameter zero (test fixture).
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(H, W)`; both divisible by 32.
    pub input_size: (usize, usize),
    pub stage_widths: [usize; 4],
    /// Decoder width `C_d`.
    pub cd: usize,
    pub heads: HeadGroupConfig,
    pub seed: u64,
    pub init: Init,
    /// Let gradients flow into the MSA masks. Off by default: masks act as constants.
    pub mask_grad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (384, 384),
            stage_widths: [16, 32, 64, 128],
            cd: 128,
            heads: default_heads(128),
            seed: 0,
            init: Init::Uniform,
            mask_grad: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the overfit demo and gradient checks.
    pub fn micro() -> Self {
        Self {
            input_size: (64, 64),
            stage_widths: [4, 8, 8, 8],
            cd: 8,
            heads: HeadGroupConfig::new(1, 1, 2),
            seed: 7,
            init: Init::Uniform,
            mask_grad: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {h}x{w} must be positive multiples of 32"
            )));
        }
        if self.cd == 0 || self.stage_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.heads.total() > 0 {
            self.heads
                .channels_per_head(self.cd)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if !KNOWN_WIDTHS.contains(&self.cd) {
            log::warn!(
                "decoder width {} is outside the reference grid {:?}",
                self.cd,
                KNOWN_WIDTHS
            );
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl FromStr for ModelConfig {
    type Err = Error;

    /// Plain `key=value` lines; `#` starts a comment.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut heads: [Option<usize>; 3] = [None; 3];
        let mut cd_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "input_size" => {
                    cfg.input_size = match value.split_once(['x', 'X']) {
                        Some((h, w)) => (parse_num(key, h)?, parse_num(key, w)?),
                        None => {
                            let s = parse_num(key, value)?;
                            (s, s)
                        }
                    }
                }
                "cd" => {
                    cfg.cd = parse_num(key, value)?;
                    cd_set = true;
                }
                "stage_widths" => {
                    let parts: Vec<usize> = value.split(',').map(|p| parse_num(key, p)).collect::<Result<_>>()?;
                    cfg.stage_widths = parts
                        .try_into()
                        .map_err(|_| Error::Config("stage_widths needs four entries".into()))?;
                }
                "heads_fta" => heads[0] = Some(parse_num(key, value)?),
                "heads_bta" => heads[1] = Some(parse_num(key, value)?),
                "heads_ta" => heads[2] = Some(parse_num(key, value)?),
                "seed" => cfg.seed = parse_num(key, value)?,
                "init" => {
                    cfg.init = match value {
                        "uniform" => Init::Uniform,
                        "zero" => Init::Zero,
                        other => return Err(Error::Config(format!("unknown init {other:?}"))),
                    }
                }
                "mask_grad" => cfg.mask_grad = parse_num(key, value)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.heads = if heads.iter().any(Option::is_some) {
            HeadGroupConfig::new(heads[0].unwrap_or(0), heads[1].unwrap_or(0), heads[2].unwrap_or(0))
        } else if cd_set {
            default_heads(cfg.cd)
        } else {
            cfg.heads
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.stage_widths;
        writeln!(f, "input_size={}x{}", self.input_size.0, self.input_size.1)?;
        writeln!(f, "cd={}", self.cd)?;
        writeln!(f, "stage_widths={a},{b},{c},{d}")?;
        writeln!(f, "heads_fta={}", self.heads.heads_fta)?;
        writeln!(f, "heads_bta={}", self.heads.heads_bta)?;
        writeln!(f, "heads_ta={}", self.heads.heads_ta)?;
        writeln!(f, "seed={}", self.seed)?;
        let init = match self.init {
            Init::Uniform => "uniform",
            Init::Zero => "zero",
        };
        writeln!(f, "init={init}")?;
        writeln!(f, "mask_grad={}", self.mask_grad)
    }
}

/// `E_1..E_5` after reduction to `C_d` channels.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 5],
}

impl FeaturePyramid {
    pub fn strides(&self) -> [usize; 5] {
        STRIDES
    }
}

/// Side outputs `P_1..P_5` at native resolution and at input resolution.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub native: [Tensor; 5],
    pub upsampled: [Tensor; 5],
}

impl PredictionSet {
    pub fn final_map(&self) -> &Tensor {
        &self.upsampled[0]
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Unreduced encoder stage outputs (strides 4, 8, 16, 32).
    pub raw: [Var; 4],
    pub pyramid: [Var; 5],
    /// `D_1..D_4`.
    pub decoded: [Var; 4],
    /// Pre-sigmoid side outputs at native resolution.
    pub logits: [Var; 5],
    pub native: [Var; 5],
    pub upsampled: [Var; 5],
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Conv,
    stages: [Conv; 4],
    reduce: [Conv; 4],
    agg: [Conv; 2],
    /// Indexed by level - 1: `msa[3]` produces `D_4` from `E_5`.
    msa: [Msa; 4],
    heads: [Conv; 5],
}

/// The full encoder/decoder with flat parameters.
#[derive(Debug, Clone)]
pub struct CamoFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl CamoFormer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let [w1, w2, w3, w4] = config.stage_widths;
        let cd = config.cd;
        let s2 = ConvOpts::new(2);
        let s1 = ConvOpts::new(1);
        let stem = Conv::register(&mut p, "encoder.stem", 3, w1, 3, s2, &mut rng)?;
        let stages = [
            Conv::register(&mut p, "encoder.stage1", w1, w1, 3, s2, &mut rng)?,
            Conv::register(&mut p, "encoder.stage2", w1, w2, 3, s2, &mut rng)?,
            Conv::register(&mut p, "encoder.stage3", w2, w3, 3, s2, &mut rng)?,
            Conv::register(&mut p, "encoder.stage4", w3, w4, 3, s2, &mut rng)?,
        ];
        let reduce = [
            Conv::register(&mut p, "reduce1", w1, cd, 1, s1, &mut rng)?,
            Conv::register(&mut p, "reduce2", w2, cd, 1, s1, &mut rng)?,
            Conv::register(&mut p, "reduce3", w3, cd, 1, s1, &mut rng)?,
            Conv::register(&mut p, "reduce4", w4, cd, 1, s1, &mut rng)?,
        ];
        let agg = [
            Conv::register(&mut p, "aggregate.conv1", 3 * cd, cd, 3, s1, &mut rng)?,
            Conv::register(&mut p, "aggregate.conv2", cd, cd, 3, s1, &mut rng)?,
        ];
        let msa = [
            Msa::register(&mut p, "msa1", cd, config.heads, &mut rng)?,
            Msa::register(&mut p, "msa2", cd, config.heads, &mut rng)?,
            Msa::register(&mut p, "msa3", cd, config.heads, &mut rng)?,
            Msa::register(&mut p, "msa4", cd, config.heads, &mut rng)?,
        ];
        let mut heads = Vec::with_capacity(5);
        for level in 1..=5 {
            heads.push(Conv::register(&mut p, &format!("head{level}"), cd, 1, 3, s1, &mut rng)?);
        }
        let heads: [Conv; 5] = heads.try_into().expect("five heads");
        if config.init == Init::Zero {
            p.zero_all();
        }
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                stem,
                stages,
                reduce,
                agg,
                msa,
                heads,
            },
        })
    }

    /// MSA block producing `D_level` (`level` in 1..=4).
    pub fn msa(&self, level: usize) -> &Msa {
        &self.layout.msa[level - 1]
    }

    /// Mask head producing `P_level` (`level` in 1..=5).
    pub fn head(&self, level: usize) -> &Conv {
        &self.layout.heads[level - 1]
    }

    pub fn reduce_conv(&self, level: usize) -> &Conv {
        &self.layout.reduce[level - 1]
    }

    pub fn aggregate_convs(&self) -> &[Conv; 2] {
        &self.layout.agg
    }

    pub fn stem_conv(&self) -> &Conv {
        &self.layout.stem
    }

    pub fn stage_conv(&self, stage: usize) -> &Conv {
        &self.layout.stages[stage - 1]
    }

    fn check_image(img: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = img.dims3()?;
        if c != 3 {
            return Err(Error::shape("encoder", format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape("encoder", format!("input {h}x{w} is not divisible by 32")));
        }
        Ok((h, w))
    }

    /// Four stride-2 stages after a stride-2 stem; outputs at strides 4/8/16/32.
    pub fn encoder_on_tape(&self, tape: &mut Tape, b: &Bound, img: Var) -> Result<[Var; 4]> {
        Self::check_image(tape.value(img))?;
        let l = &self.layout;
        let x = l.stem.apply(tape, b, img)?;
        let mut x = tape.relu(x)?;
        let mut out = Vec::with_capacity(4);
        for conv in &l.stages {
            let y = conv.apply(tape, b, x)?;
            x = tape.relu(y)?;
            out.push(x);
        }
        Ok(out.try_into().expect("four stages"))
    }

    /// Resizes `E_2`, `E_3` onto `E_4`'s grid, concatenates, and applies
    /// conv → relu → conv back to `C_d` channels.
    pub fn aggregate_on_tape(&self, tape: &mut Tape, b: &Bound, e2: Var, e3: Var, e4: Var) -> Result<Var> {
        let cd = self.config.cd;
        for v in [e2, e3, e4] {
            let (c, _, _) = tape.value(v).dims3()?;
            if c != cd {
                return Err(Error::shape("aggregate", format!("expected {cd} channels, got {c}")));
            }
        }
        let (_, h, w) = tape.value(e4).dims3()?;
        let e2s = tape.bilinear_resize(e2, h, w)?;
        let e3s = tape.bilinear_resize(e3, h, w)?;
        let cat = tape.concat(&[e2s, e3s, e4])?;
        let [c1, c2] = &self.layout.agg;
        let y = c1.apply(tape, b, cat)?;
        let y = tape.relu(y)?;
        c2.apply(tape, b, y)
    }

    /// Returns `(logits, sigmoid(logits))` for the mask head of `level`.
    pub fn predict_on_tape(&self, tape: &mut Tape, b: &Bound, level: usize, feat: Var) -> Result<(Var, Var)> {
        let logits = self.head(level).apply(tape, b, feat)?;
        let p = tape.sigmoid(logits)?;
        Ok((logits, p))
    }

    fn mask_input(&self, tape: &mut Tape, p: Var) -> Var {
        if self.config.mask_grad {
            p
        } else {
            let v = tape.value(p).clone();
            tape.constant(v)
        }
    }

    /// Progressive refinement with product-then-sum fusion. Returns
    /// `(D_1..D_4, logits P_1..P_5, P_1..P_5)`.
    #[allow(clippy::type_complexity)]
    pub fn decoder_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        pyramid: &[Var; 5],
    ) -> Result<([Var; 4], [Var; 5], [Var; 5])> {
        let mut logits = [pyramid[0]; 5];
        let mut preds = [pyramid[0]; 5];
        let mut decoded = [pyramid[0]; 4];

        let (l5, p5) = self.predict_on_tape(tape, b, 5, pyramid[4])?;
        logits[4] = l5;
        preds[4] = p5;

        // D_4 = MSA(E_5) ⊙ up(E_4) + up(E_4)
        let mask = self.mask_input(tape, p5);
        let z = self.msa(4).forward(tape, b, pyramid[4], mask)?;
        let (_, zh, zw) = tape.value(z).dims3()?;
        let e4 = tape.bilinear_resize(pyramid[3], zh, zw)?;
        let prod = tape.mul(z, e4)?;
        decoded[3] = tape.add(prod, e4)?;
        let (l4, p4) = self.predict_on_tape(tape, b, 4, decoded[3])?;
        logits[3] = l4;
        preds[3] = p4;

        // D_i = up(MSA(D_{i+1})) ⊙ E_i + E_i
        for level in (1..=3).rev() {
            let mask = self.mask_input(tape, preds[level]);
            let z = self.msa(level).forward(tape, b, decoded[level], mask)?;
            let ei = pyramid[level - 1];
            let (_, h, w) = tape.value(ei).dims3()?;
            let zu = tape.bilinear_resize(z, h, w)?;
            let prod = tape.mul(zu, ei)?;
            decoded[level - 1] = tape.add(prod, ei)?;
            let (l, p) = self.predict_on_tape(tape, b, level, decoded[level - 1])?;
            logits[level - 1] = l;
            preds[level - 1] = p;
        }
        Ok((decoded, logits, preds))
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, b: &Bound, img: Var) -> Result<ForwardVars> {
        let (h, w) = Self::check_image(tape.value(img))?;
        let raw = self.encoder_on_tape(tape, b, img)?;
        let mut reduced = Vec::with_capacity(4);
        for (conv, &e) in self.layout.reduce.iter().zip(&raw) {
            reduced.push(conv.apply(tape, b, e)?);
        }
        let e5 = self.aggregate_on_tape(tape, b, reduced[1], reduced[2], reduced[3])?;
        let pyramid = [reduced[0], reduced[1], reduced[2], reduced[3], e5];
        let (decoded, logits, native) = self.decoder_on_tape(tape, b, &pyramid)?;
        let mut upsampled = Vec::with_capacity(5);
        for &l in &logits {
            let up = tape.bilinear_resize(l, h, w)?;
            upsampled.push(tape.sigmoid(up)?);
        }
        Ok(ForwardVars {
            raw,
            pyramid,
            decoded,
            logits,
            native,
            upsampled: upsampled.try_into().expect("five levels"),
        })
    }

    /// Inference: the five side outputs for one image.
    pub fn forward(&self, img: &Tensor) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let x = tape.constant(img.clone());
        let out = self.forward_on_tape(&mut tape, &b, x)?;
        Ok(PredictionSet {
            native: out.native.map(|v| tape.value(v).clone()),
            upsampled: out.upsampled.map(|v| tape.value(v).clone()),
        })
    }

    /// Side outputs at `(out_h, out_w)`: logits are resized, then squashed.
    pub fn predict_maps(&self, img: &Tensor, out_h: usize, out_w: usize) -> Result<[Tensor; 5]> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let x = tape.constant(img.clone());
        let vars = self.forward_on_tape(&mut tape, &b, x)?;
        let mut maps = Vec::with_capacity(5);
        for l in vars.logits {
            maps.push(ops::sigmoid(&ops::bilinear_resize(tape.value(l), out_h, out_w)?));
        }
        Ok(maps.try_into().expect("five levels"))
    }

    /// Raw encoder features for one image.
    pub fn encoder_forward(&self, img: &Tensor) -> Result<[Tensor; 4]> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let x = tape.constant(img.clone());
        let raw = self.encoder_on_tape(&mut tape, &b, x)?;
        Ok(raw.map(|v| tape.value(v).clone()))
    }

    /// Reduced pyramid `E_1..E_5` for one image.
    pub fn pyramid(&self, img: &Tensor) -> Result<FeaturePyramid> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let x = tape.constant(img.clone());
        let out = self.forward_on_tape(&mut tape, &b, x)?;
        Ok(FeaturePyramid {
            levels: out.pyramid.map(|v| tape.value(v).clone()),
        })
    }

    pub fn aggregate_top(&self, e2: &Tensor, e3: &Tensor, e4: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let [v2, v3, v4] = [e2, e3, e4].map(|t| tape.constant(t.clone()));
        let y = self.aggregate_on_tape(&mut tape, &b, v2, v3, v4)?;
        Ok(tape.value(y).clone())
    }

    /// `sigmoid(conv3x3(feat))` with the head of `level`.
    pub fn predict_mask(&self, level: usize, feat: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let x = tape.constant(feat.clone());
        let (_, p) = self.predict_on_tape(&mut tape, &b, level, x)?;
        Ok(tape.value(p).clone())
    }

    /// Runs the decoder on a given pyramid. Returns the native side outputs
    /// (upsampled copies use the stride-4 grid times four) and `D_1..D_4`.
    pub fn decoder_forward(&self, pyramid: &FeaturePyramid) -> Result<(PredictionSet, [Tensor; 4])> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let vars = pyramid.levels.clone().map(|t| tape.constant(t));
        let (decoded, logits, native) = self.decoder_on_tape(&mut tape, &b, &vars)?;
        let (_, h1, w1) = pyramid.levels[0].dims3()?;
        let (h, w) = (h1 * STRIDES[0], w1 * STRIDES[0]);
        let mut upsampled = Vec::with_capacity(5);
        for &l in &logits {
            let up = ops::bilinear_resize(tape.value(l), h, w)?;
            upsampled.push(ops::sigmoid(&up));
        }
        Ok((
            PredictionSet {
                native: native.map(|v| tape.value(v).clone()),
                upsampled: upsampled.try_into().expect("five levels"),
            },
            decoded.map(|v| tape.value(v).clone()),
        ))
    }

    /// Total loss and gradients w.r.t. every parameter, in store order.
    pub fn loss_and_grads(&self, img: &Tensor, gt: &Tensor) -> Result<(LossReport, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let (loss, report, grads) = self.record_loss(&mut tape, &b, img, gt, true)?;
        let _ = loss;
        let grads = grads.expect("requested");
        let out = self
            .params
            .ids()
            .map(|id| grads.get_or_zeros(b[id], self.params.get(id)))
            .collect();
        Ok((report, out))
    }

    /// Total loss without gradients.
    pub fn loss(&self, img: &Tensor, gt: &Tensor) -> Result<LossReport> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let (_, report, _) = self.record_loss(&mut tape, &b, img, gt, false)?;
        Ok(report)
    }

    /// Records the total loss for one image. The ground truth is resized to
    /// the image with nearest-neighbour sampling.
    pub fn loss_on_tape(&self, tape: &mut Tape, b: &Bound, img: &Tensor, gt: &Tensor) -> Result<(Var, LossReport)> {
        let (_, h, w) = img.dims3()?;
        let gt = loss::resize_nearest(gt, h, w)?;
        let x = tape.constant(img.clone());
        let g = tape.constant(gt);
        let out = self.forward_on_tape(tape, b, x)?;
        loss::total_loss_on_tape(tape, &out.upsampled, g)
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        img: &Tensor,
        gt: &Tensor,
        backward: bool,
    ) -> Result<(Var, LossReport, Option<Gradients>)> {
        let (total, report) = self.loss_on_tape(tape, b, img, gt)?;
        let grads = if backward { Some(tape.backward(total)?) } else { None };
        Ok((total, report, grads))
    }
}
