//! Flat parameter storage shared by the attention and model modules.

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::ConvOpts;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Sets every value to zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles recorded elsewhere, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Centered uniform init scaled by `1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

/// Weight and bias of one convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: ConvOpts,
}

impl Conv {
    /// Registers a `k×k` convolution. Biases start at zero.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        opts: ConvOpts,
        rng: &mut R,
    ) -> Result<Self> {
        if opts.depthwise && c_in != c_out {
            return Err(Error::InvalidArgument(format!(
                "depthwise conv {name} needs c_in == c_out, got {c_in} and {c_out}"
            )));
        }
        let w_in = if opts.depthwise { 1 } else { c_in };
        let weight = init_uniform(&[c_out, w_in, k, k], w_in * k * k, rng);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out])),
            opts,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, bound[self.weight], bound[self.bias], self.opts)
    }
}
