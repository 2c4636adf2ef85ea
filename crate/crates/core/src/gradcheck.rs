//! Finite-difference verification of the tape's analytic gradients.
//!
//! Every target records a computation on a tape. The checked scalar is
//! `mean(out ⊙ R)` for a fixed random `R`, so outputs whose plain mean is
//! constant (softmax rows, for one) still get a useful gradient.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{HeadGroupConfig, Msa, TaBranch};
use crate::error::{Error, Result};
use crate::loss::{BCE_EPS, IOU_SMOOTH};
use crate::model::{CamoFormer, ModelConfig};
use crate::ops::ConvOpts;
use crate::params::{Bound, ParamStore};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SAMPLES: usize = 16;
pub const MAX_SAMPLES: usize = 64;
/// Inputs are clamped to this range before checking.
pub const INPUT_BOUND: f64 = 4.0;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

type Recorder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Tamper = Box<dyn Fn(&mut [Tensor])>;

/// How coordinates are drawn from the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Up to `samples` coordinates from every input tensor.
    PerTensor,
    /// `samples` coordinates drawn uniformly over all inputs together.
    Global,
}

/// One concrete instance of a target: input values plus a recorder.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub record: Recorder,
    /// Applied to analytic gradients before comparison. Only used to build
    /// negative controls.
    pub tamper: Option<Tamper>,
}

impl Instance {
    pub fn new(inputs: Vec<Tensor>, record: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            inputs,
            record: Box::new(record),
            tamper: None,
        }
    }
}

/// A named computation whose gradients can be checked.
pub trait GradTarget: Send + Sync {
    fn name(&self) -> &str;
    fn default_shape(&self) -> Vec<usize>;
    fn sampling(&self) -> Sampling {
        Sampling::PerTensor
    }
    fn build(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Instance>;
}

type Builder = fn(&[usize], &mut ChaCha8Rng) -> Result<Instance>;

struct FnTarget {
    name: &'static str,
    shape: &'static [usize],
    sampling: Sampling,
    build: Builder,
}

impl GradTarget for FnTarget {
    fn name(&self) -> &str {
        self.name
    }

    fn default_shape(&self) -> Vec<usize> {
        self.shape.to_vec()
    }

    fn sampling(&self) -> Sampling {
        self.sampling
    }

    fn build(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Instance> {
        (self.build)(shape, rng)
    }
}

fn dims<const N: usize>(target: &str, shape: &[usize]) -> Result<[usize; N]> {
    let arr: [usize; N] = shape
        .try_into()
        .map_err(|_| Error::Config(format!("{target} expects a shape with {N} dims, got {shape:?}")))?;
    if arr.contains(&0) {
        return Err(Error::Config(format!("{target}: zero-sized shape {shape:?}")));
    }
    Ok(arr)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

fn prob_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.05, 0.95, rng)
}

fn binary_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn unary(shape: &[usize], rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<Instance> {
    Ok(Instance::new(vec![rand_t(shape, rng)], move |t, v| f(t, v[0])))
}

fn pair(shape: &[usize], rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<Instance> {
    let a = rand_t(shape, rng);
    let b = rand_t(shape, rng);
    Ok(Instance::new(vec![a, b], move |t, v| f(t, v[0], v[1])))
}

fn conv_case(
    name: &str,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
    c_out: Option<usize>,
    k: usize,
    opts: ConvOpts,
) -> Result<Instance> {
    let [c, h, w] = dims(name, shape)?;
    let c_out = c_out.unwrap_or(c);
    let w_in = if opts.depthwise { 1 } else { c };
    let inputs = vec![
        rand_t(&[c, h, w], rng),
        rand_t(&[c_out, w_in, k, k], rng),
        rand_t(&[c_out], rng),
    ];
    Ok(Instance::new(inputs, move |t, v| t.conv2d(v[0], v[1], v[2], opts)))
}

/// Leaves for `x` followed by every branch parameter.
fn branch_instance(name: &str, shape: &[usize], rng: &mut ChaCha8Rng, heads: usize, masked: bool) -> Result<Instance> {
    let [c, h, w] = dims(name, shape)?;
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "{name}: {c} channels do not split into {heads} heads"
        )));
    }
    let mut store = ParamStore::new();
    let branch = TaBranch::register(&mut store, "branch", c, heads, c / heads, rng)?;
    let mut inputs = vec![rand_t(&[c, h, w], rng)];
    inputs.extend(
        store
            .tensors()
            .iter()
            .map(|t| Tensor::uniform(t.shape().to_vec(), -0.5, 0.5, rng)),
    );
    let mask = masked.then(|| Tensor::uniform(vec![1, h, w], 0.0, 1.0, rng));
    Ok(Instance::new(inputs, move |t, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let m = mask.as_ref().map(|m| t.constant(m.clone()));
        branch.forward(t, &bound, v[0], m)
    }))
}

fn msa_instance(shape: &[usize], rng: &mut ChaCha8Rng, mask_is_input: bool) -> Result<Instance> {
    let [c, h, w] = dims("msa_forward", shape)?;
    if c % 3 != 0 {
        return Err(Error::Config(format!(
            "msa_forward needs channels divisible by 3, got {c}"
        )));
    }
    let mut store = ParamStore::new();
    let msa = Msa::register(&mut store, "msa", c, HeadGroupConfig::new(1, 1, 1), rng)?;
    let mut inputs = vec![rand_t(&[c, h, w], rng)];
    inputs.extend(
        store
            .tensors()
            .iter()
            .map(|t| Tensor::uniform(t.shape().to_vec(), -0.5, 0.5, rng)),
    );
    let mask = Tensor::uniform(vec![1, h, w], 0.05, 0.95, rng);
    let n_params = store.len();
    if mask_is_input {
        inputs.push(mask.clone());
    }
    Ok(Instance::new(inputs, move |t, v| {
        let bound = Bound::from_vars(v[1..1 + n_params].to_vec());
        let m = if mask_is_input {
            v[1 + n_params]
        } else {
            t.constant(mask.clone())
        };
        msa.forward(t, &bound, v[0], m)
    }))
}

fn model_instance(shape: &[usize], rng: &mut ChaCha8Rng, mask_grad: bool) -> Result<Instance> {
    let [h, w] = dims("full_model", shape)?;
    let config = ModelConfig {
        input_size: (h, w),
        seed: rng.gen(),
        mask_grad,
        ..ModelConfig::micro()
    };
    model_loss_instance(config, rng)
}

/// Training loss of a freshly built model, with every parameter tensor an
/// input, on a random image and mask of the configured size.
///
/// Biases are redrawn in `[-0.1, 0.1]`. With the zero-bias init a ReLU fed
/// by an all-zero neighbourhood sits exactly on its kink, where central
/// differences read 1/2 and no step size helps.
pub fn model_loss_instance(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (h, w) = config.input_size;
    let mut model = CamoFormer::new(config)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).ends_with("bias") {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let img = Tensor::uniform(vec![3, h, w], 0.0, 1.0, rng);
    let gt = binary_t(&[1, h, w], rng);
    let inputs = model.params.tensors().to_vec();
    Ok(Instance::new(inputs, move |t, v| {
        let bound = Bound::from_vars(v.to_vec());
        model.loss_on_tape(t, &bound, &img, &gt).map(|(loss, _)| loss)
    }))
}

macro_rules! target {
    ($name:literal, [$($d:expr),*], $build:expr) => {
        FnTarget { name: $name, shape: &[$($d),*], sampling: Sampling::PerTensor, build: $build }
    };
    ($name:literal, [$($d:expr),*], $build:expr, $sampling:expr) => {
        FnTarget { name: $name, shape: &[$($d),*], sampling: $sampling, build: $build }
    };
}

fn builtin_targets() -> Vec<Box<dyn GradTarget>> {
    let list: Vec<FnTarget> = vec![
        target!("matmul", [3, 4, 5], |s, rng| {
            let [m, k, n] = dims("matmul", s)?;
            let inputs = vec![rand_t(&[m, k], rng), rand_t(&[k, n], rng)];
            Ok(Instance::new(inputs, |t, v| t.matmul(v[0], v[1])))
        }),
        target!("transpose", [3, 5], |s, rng| {
            dims::<2>("transpose", s)?;
            unary(s, rng, |t, x| t.transpose(x))
        }),
        target!("softmax_lastdim", [3, 5], |s, rng| {
            dims::<2>("softmax_lastdim", s)?;
            unary(s, rng, |t, x| t.softmax_lastdim(x))
        }),
        target!("conv2d", [2, 5, 5], |s, rng| conv_case(
            "conv2d",
            s,
            rng,
            Some(3),
            3,
            ConvOpts::new(1)
        )),
        target!("conv2d_1x1", [3, 4, 5], |s, rng| conv_case(
            "conv2d_1x1",
            s,
            rng,
            Some(2),
            1,
            ConvOpts::new(1)
        )),
        target!("conv2d_stride2", [2, 6, 7], |s, rng| {
            conv_case("conv2d_stride2", s, rng, Some(3), 3, ConvOpts::new(2))
        }),
        target!("conv2d_depthwise", [3, 5, 4], |s, rng| {
            conv_case("conv2d_depthwise", s, rng, None, 3, ConvOpts::depthwise())
        }),
        target!("bilinear_resize_up", [2, 3, 4], |s, rng| {
            let [_, h, w] = dims("bilinear_resize_up", s)?;
            let x = rand_t(s, rng);
            Ok(Instance::new(vec![x], move |t, v| {
                t.bilinear_resize(v[0], 2 * h + 1, 2 * w)
            }))
        }),
        target!("bilinear_resize_down", [2, 8, 6], |s, rng| {
            let [_, h, w] = dims("bilinear_resize_down", s)?;
            let x = rand_t(s, rng);
            Ok(Instance::new(vec![x], move |t, v| {
                t.bilinear_resize(v[0], (h / 3).max(1), (w / 2).max(1))
            }))
        }),
        target!("add", [2, 3, 4], |s, rng| pair(s, rng, |t, a, b| t.add(a, b))),
        target!("sub", [2, 3, 4], |s, rng| pair(s, rng, |t, a, b| t.sub(a, b))),
        target!("mul", [2, 3, 4], |s, rng| pair(s, rng, |t, a, b| t.mul(a, b))),
        target!("mul_broadcast", [3, 4, 4], |s, rng| {
            let [_, h, w] = dims("mul_broadcast", s)?;
            let inputs = vec![rand_t(s, rng), rand_t(&[1, h, w], rng)];
            Ok(Instance::new(inputs, |t, v| t.mul(v[0], v[1])))
        }),
        target!("sub_broadcast", [3, 4, 4], |s, rng| {
            let [_, h, w] = dims("sub_broadcast", s)?;
            let inputs = vec![rand_t(&[1, h, w], rng), rand_t(s, rng)];
            Ok(Instance::new(inputs, |t, v| t.sub(v[0], v[1])))
        }),
        target!("sigmoid", [2, 3, 4], |s, rng| unary(s, rng, |t, x| t.sigmoid(x))),
        target!("relu", [2, 3, 4], |s, rng| unary(s, rng, |t, x| t.relu(x))),
        target!("exp", [2, 3, 4], |s, rng| unary(s, rng, |t, x| t.exp(x))),
        target!("scale", [2, 3, 4], |s, rng| unary(s, rng, |t, x| t.scale(x, -0.7))),
        target!("scale_by", [2, 3, 4], |s, rng| {
            let inputs = vec![rand_t(s, rng), rand_t(&[1], rng)];
            Ok(Instance::new(inputs, |t, v| t.scale_by(v[0], v[1])))
        }),
        target!("concat", [2, 3, 4], |s, rng| {
            let [c, h, w] = dims("concat", s)?;
            let inputs = vec![
                rand_t(&[c, h, w], rng),
                rand_t(&[1, h, w], rng),
                rand_t(&[c + 1, h, w], rng),
            ];
            Ok(Instance::new(inputs, |t, v| t.concat(v)))
        }),
        target!("narrow", [5, 3, 3], |s, rng| {
            let [c, _, _] = dims("narrow", s)?;
            if c < 3 {
                return Err(Error::Config(format!("narrow needs at least 3 leading rows, got {c}")));
            }
            unary(s, rng, |t, x| t.narrow(x, 1, 2))
        }),
        target!("reshape", [2, 3, 4], |s, rng| {
            let n: usize = s.iter().product();
            let x = rand_t(s, rng);
            Ok(Instance::new(vec![x], move |t, v| t.reshape(v[0], vec![n])))
        }),
        target!("sum", [2, 3, 4], |s, rng| unary(s, rng, |t, x| t.sum(x))),
        target!("mean", [2, 3, 4], |s, rng| unary(s, rng, |t, x| t.mean(x))),
        target!("bce", [1, 4, 5], |s, rng| {
            let gt = binary_t(s, rng);
            Ok(Instance::new(vec![prob_t(s, rng)], move |t, v| {
                let g = t.constant(gt.clone());
                t.bce(v[0], g, BCE_EPS)
            }))
        }),
        target!("iou", [1, 4, 5], |s, rng| {
            let gt = binary_t(s, rng);
            Ok(Instance::new(vec![prob_t(s, rng)], move |t, v| {
                let g = t.constant(gt.clone());
                t.iou(v[0], g, IOU_SMOOTH)
            }))
        }),
        target!("constant", [2, 3], |s, rng| {
            let c = rand_t(s, rng);
            Ok(Instance::new(vec![rand_t(s, rng)], move |t, _| {
                Ok(t.constant(c.clone()))
            }))
        }),
        target!("ta_forward", [4, 4, 4], |s, rng| branch_instance(
            "ta_forward",
            s,
            rng,
            2,
            false
        )),
        target!("masked_ta_forward", [4, 4, 4], |s, rng| {
            branch_instance("masked_ta_forward", s, rng, 2, true)
        }),
        target!("msa_forward", [6, 4, 4], |s, rng| msa_instance(s, rng, false)),
        target!("msa_forward_mask", [6, 4, 4], |s, rng| msa_instance(s, rng, true)),
        target!(
            "full_model",
            [32, 32],
            |s, rng| model_instance(s, rng, false),
            Sampling::Global
        ),
        target!(
            "full_model_mask_grad",
            [32, 32],
            |s, rng| model_instance(s, rng, true),
            Sampling::Global
        ),
    ];
    list.into_iter().map(|t| Box::new(t) as Box<dyn GradTarget>).collect()
}

/// Named gradient targets.
pub struct Registry {
    targets: Vec<Box<dyn GradTarget>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self { targets: Vec::new() }
    }

    /// Every built-in target; together they record every [`OpKind`].
    pub fn builtin() -> Self {
        Self {
            targets: builtin_targets(),
        }
    }

    /// Adds a target, replacing any existing target with the same name.
    pub fn register(&mut self, target: Box<dyn GradTarget>) {
        self.targets.retain(|t| t.name() != target.name());
        self.targets.push(target);
    }

    pub fn get(&self, name: &str) -> Option<&dyn GradTarget> {
        self.targets.iter().find(|t| t.name() == name).map(|t| t.as_ref())
    }

    /// Removes and returns a target, e.g. to wrap it.
    pub fn targets_owned(mut self, name: &str) -> Box<dyn GradTarget> {
        let i = self
            .targets
            .iter()
            .position(|t| t.name() == name)
            .expect("registered target");
        self.targets.swap_remove(i)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.targets.iter().map(|t| t.name())
    }

    fn lookup(&self, name: &str) -> Result<&dyn GradTarget> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("unregistered gradient target '{name}'")))
    }
}

/// One line of a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub target: String,
    /// `None` uses the target's default shape.
    pub shape: Option<Vec<usize>>,
    pub seed: u64,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckCase {
    pub fn new(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            shape: None,
            seed: 0,
            samples: DEFAULT_SAMPLES,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.samples > MAX_SAMPLES {
            return Err(Error::Config(format!(
                "{}: samples must be in 1..={MAX_SAMPLES}, got {}",
                self.target, self.samples
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!(
                "{}: step must be positive, got {}",
                self.target, self.step
            )));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!(
                "{}: tolerance must be positive, got {}",
                self.target, self.tolerance
            )));
        }
        Ok(())
    }
}

/// Parses a suite: one case per line, `target [key=value ...]`.
/// Keys are `shape` (e.g. `2x4x4`), `seed`, `samples`, `h` and `tol`.
/// `#` starts a comment.
pub fn parse_suite(text: &str) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Config(format!("suite line {}: {msg}", lineno + 1));
        let mut words = line.split_whitespace();
        let mut case = GradCheckCase::new(words.next().expect("non-empty line"));
        for word in words {
            let (key, value) = word
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got '{word}'")))?;
            let bad = |_| err(format!("invalid value for {key}: '{value}'"));
            match key {
                "shape" => {
                    let dims = value
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(bad)?;
                    case.shape = Some(dims);
                }
                "seed" => case.seed = value.parse().map_err(bad)?,
                "samples" => case.samples = value.parse().map_err(bad)?,
                "h" => {
                    case.step = value
                        .parse()
                        .map_err(|_| err(format!("invalid value for h: '{value}'")))?
                }
                "tol" => {
                    case.tolerance = value
                        .parse()
                        .map_err(|_| err(format!("invalid value for tol: '{value}'")))?
                }
                _ => return Err(err(format!("unknown key '{key}'"))),
            }
        }
        case.validate().map_err(|e| err(e.to_string()))?;
        cases.push(case);
    }
    Ok(cases)
}

/// One case per built-in target with default settings. The full-model cases
/// sample ten weights.
pub fn default_suite() -> Vec<GradCheckCase> {
    Registry::builtin()
        .names()
        .enumerate()
        .map(|(i, name)| {
            let mut case = GradCheckCase::new(name);
            case.seed = i as u64;
            if name.starts_with("full_model") {
                case.samples = 10;
            }
            case
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub case: GradCheckCase,
    pub shape: Vec<usize>,
    /// Checked coordinates as `(input index, flat index)`.
    pub coords: Vec<(usize, usize)>,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CaseResult>,
    /// Op kinds no case recorded.
    pub uncovered: Vec<OpKind>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// Fixed-width table, one row per case.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:<12} {:>6} {:>12} {:>10}  {}\n",
            "target", "shape", "coords", "max_rel_err", "tol", "status"
        );
        for r in &self.results {
            let shape = r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(
                out,
                "{:<24} {:<12} {:>6} {:>12.3e} {:>10.1e}  {}",
                r.case.target,
                shape,
                r.coords.len(),
                r.max_rel_error,
                r.case.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

fn projection(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::uniform(out.shape().to_vec(), 0.5, 1.5, &mut rng)
}

fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = projection(tape.value(out), seed);
    let r = tape.constant(r);
    let weighted = tape.mul(out, r)?;
    tape.mean(weighted)
}

fn scalar_at(inst: &Instance, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (inst.record)(&mut tape, &vars)?;
    let s = project(&mut tape, out, seed)?;
    let v = tape.value(s).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(v)
}

fn analytic(inst: &Instance, inputs: &[Tensor], seed: u64) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (inst.record)(&mut tape, &vars)?;
    let s = project(&mut tape, out, seed)?;
    let grads = tape.backward(s)?;
    let mut g: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    if let Some(tamper) = &inst.tamper {
        tamper(&mut g);
    }
    Ok(g)
}

fn sample_coords(inputs: &[Tensor], samples: usize, sampling: Sampling, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match sampling {
        Sampling::PerTensor => {
            let mut coords = Vec::new();
            for (i, t) in inputs.iter().enumerate() {
                let mut picked = index::sample(rng, t.numel(), samples.min(t.numel())).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|j| (i, j)));
            }
            coords
        }
        Sampling::Global => {
            let total: usize = inputs.iter().map(Tensor::numel).sum();
            let mut picked = index::sample(rng, total, samples.min(total)).into_vec();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|mut flat| {
                    let mut i = 0;
                    while flat >= inputs[i].numel() {
                        flat -= inputs[i].numel();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        }
    }
}

/// Checks one case against a pre-built instance.
pub fn check_instance(
    case: &GradCheckCase,
    shape: Vec<usize>,
    sampling: Sampling,
    mut inst: Instance,
    rng: &mut ChaCha8Rng,
) -> Result<CaseResult> {
    case.validate()?;
    for t in &mut inst.inputs {
        for v in t.data_mut() {
            *v = v.clamp(-INPUT_BOUND, INPUT_BOUND);
        }
    }
    let grads = analytic(&inst, &inst.inputs, case.seed)?;
    let coords = sample_coords(&inst.inputs, case.samples, sampling, rng);
    let mut inputs = inst.inputs.clone();
    let (mut max_err, mut worst) = (0.0f64, None);
    for &(i, j) in &coords {
        let orig = inputs[i].data()[j];
        inputs[i].data_mut()[j] = orig + case.step;
        let plus = scalar_at(&inst, &inputs, case.seed)?;
        inputs[i].data_mut()[j] = orig - case.step;
        let minus = scalar_at(&inst, &inputs, case.seed)?;
        inputs[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * case.step);
        let err = relative_error(grads[i].data()[j], numeric);
        log::trace!(
            "{} input {i}[{j}]: analytic {} numeric {numeric}",
            case.target,
            grads[i].data()[j]
        );
        if err > max_err || worst.is_none() {
            max_err = max_err.max(err);
            worst = Some((i, j));
        }
    }
    Ok(CaseResult {
        case: case.clone(),
        shape,
        coords,
        max_rel_error: max_err,
        worst,
        passed: max_err <= case.tolerance,
    })
}

fn instantiate(registry: &Registry, case: &GradCheckCase) -> Result<(Vec<usize>, Sampling, Instance, ChaCha8Rng)> {
    let target = registry.lookup(&case.target)?;
    let shape = case.shape.clone().unwrap_or_else(|| target.default_shape());
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let inst = target.build(&shape, &mut rng)?;
    Ok((shape, target.sampling(), inst, rng))
}

pub fn check_case(registry: &Registry, case: &GradCheckCase) -> Result<CaseResult> {
    let (shape, sampling, inst, mut rng) = instantiate(registry, case)?;
    check_instance(case, shape, sampling, inst, &mut rng)
}

/// Op kinds recorded by a case's computation, excluding the projection.
pub fn recorded_ops(registry: &Registry, case: &GradCheckCase) -> Result<BTreeSet<OpKind>> {
    let (_, _, inst, _) = instantiate(registry, case)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    (inst.record)(&mut tape, &vars)?;
    Ok(tape.recorded_kinds().collect())
}

/// Op kinds no case in `cases` records.
pub fn uncovered_ops(registry: &Registry, cases: &[GradCheckCase]) -> Result<Vec<OpKind>> {
    let mut seen = BTreeSet::new();
    for case in cases {
        seen.extend(recorded_ops(registry, case)?);
    }
    Ok(OpKind::ALL.into_iter().filter(|k| !seen.contains(k)).collect())
}

/// Runs every case, in parallel, keeping input order. An unregistered
/// target fails the whole suite before anything runs.
pub fn check_suite(registry: &Registry, cases: &[GradCheckCase]) -> Result<SuiteReport> {
    for case in cases {
        registry.lookup(&case.target)?;
        case.validate()?;
    }
    let results = cases
        .par_iter()
        .map(|case| check_case(registry, case))
        .collect::<Result<Vec<_>>>()?;
    let uncovered = uncovered_ops(registry, cases)?;
    Ok(SuiteReport { results, uncovered })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_symmetric_and_scale_free() {
        assert_eq!(relative_error(1.0, 1.5), relative_error(1.5, 1.0));
        assert_eq!(relative_error(0.0, 1e-6), 1e-6);
        assert!((relative_error(100.0, 101.0) - relative_error(1000.0, 1010.0)).abs() < 1e-15);
    }

    #[test]
    fn parses_suite_lines() {
        let cases = parse_suite("# header\nmatmul shape=2x3x4 seed=5 samples=3 h=1e-6 tol=1e-5\n\nrelu\n").unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].shape, Some(vec![2, 3, 4]));
        assert_eq!((cases[0].seed, cases[0].samples), (5, 3));
        assert_eq!(cases[0].step, 1e-6);
        assert_eq!(cases[1], GradCheckCase::new("relu"));
        assert!(parse_suite("relu colour=red").is_err());
        assert!(parse_suite("relu samples=65").is_err());
        assert!(parse_suite("relu h=0").is_err());
        assert!(parse_suite("relu seed").is_err());
    }

    #[test]
    fn empty_suite_passes() {
        let report = check_suite(&Registry::builtin(), &[]).unwrap();
        assert!(report.results.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn unknown_target_fails() {
        let err = check_suite(&Registry::builtin(), &[GradCheckCase::new("softmin")]).unwrap_err();
        assert!(err.to_string().contains("softmin"));
    }

    #[test]
    fn small_cases_pass() {
        let reg = Registry::builtin();
        for name in [
            "matmul",
            "softmax_lastdim",
            "conv2d_stride2",
            "bilinear_resize_up",
            "constant",
        ] {
            let r = check_case(&reg, &GradCheckCase::new(name)).unwrap();
            assert!(r.passed, "{name}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn global_sampling_maps_into_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![Tensor::zeros([2]), Tensor::zeros([3]), Tensor::zeros([1])];
        let coords = sample_coords(&inputs, 6, Sampling::Global, &mut rng);
        assert_eq!(coords, vec![(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 0)]);
    }
}
