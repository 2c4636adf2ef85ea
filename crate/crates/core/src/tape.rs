//! Reverse-mode differentiation over a recorded tape.
//!
//! Every op appends a node holding its output value, so the node list is in
//! topological order by construction. [`Tape::backward`] walks it once in
//! reverse.

use crate::error::{Error, Result};
use crate::ops::{self, BinaryOp, Broadcast, ConvOpts};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable op kinds. Used by the gradient checker's coverage guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Softmax,
    Conv2d,
    Resize,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Relu,
    Exp,
    Scale,
    ScaleBy,
    Concat,
    Narrow,
    Reshape,
    Sum,
    Mean,
    Bce,
    Iou,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::Conv2d,
        OpKind::Resize,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Scale,
        OpKind::ScaleBy,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Bce,
        OpKind::Iou,
    ];
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        opts: ConvOpts,
    },
    Resize(Var),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        kind: Broadcast,
    },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        gt: Var,
        eps: f64,
    },
    Iou {
        pred: Var,
        gt: Var,
        smooth: f64,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Resize(_) => OpKind::Resize,
            Op::Binary { op: BinaryOp::Add, .. } => OpKind::Add,
            Op::Binary { op: BinaryOp::Sub, .. } => OpKind::Sub,
            Op::Binary { op: BinaryOp::Mul, .. } => OpKind::Mul,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Exp(_) => OpKind::Exp,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::Concat(_) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Bce { .. } => OpKind::Bce,
            Op::Iou { .. } => OpKind::Iou,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not influence the loss or is a constant.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros of `like`'s shape when absent.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

/// Single-threaded recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Op kinds recorded so far, in recording order.
    pub fn recorded_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().filter_map(|n| n.op.kind())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = ops::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a), &[a]))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_lastdim(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x), &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, opts: ConvOpts) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), opts)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, opts }, &[x, w, b]))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize(x), &[x]))
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let kind = ops::broadcast_kind(self.value(a).shape(), self.value(b).shape())?;
        let y = ops::binary(op, self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Binary { op, a, b, kind }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = ops::sigmoid(self.value(x));
        Ok(self.push(y, Op::Sigmoid(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        Ok(self.push(y, Op::Relu(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(f64::exp).ensure_finite("exp")?;
        Ok(self.push(y, Op::Exp(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor).ensure_finite("scale")?;
        Ok(self.push(y, Op::Scale(x, factor), &[x]))
    }

    /// Multiplies every entry of `x` by the single entry of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("factor must hold one value, got {:?}", sv.shape()),
            ));
        }
        let f = sv.data()[0];
        let y = self.value(x).map(|v| v * f).ensure_finite("scale_by")?;
        Ok(self.push(y, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&tensors)?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::narrow(self.value(x), start, len)?;
        Ok(self.push(y, Op::Narrow { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum()).ensure_finite("sum")?;
        Ok(self.push(y, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).mean()).ensure_finite("mean")?;
        Ok(self.push(y, Op::Mean(x), &[x]))
    }

    /// Mean binary cross-entropy; `pred` is clamped to `[eps, 1 - eps]`.
    /// The target is treated as constant.
    pub fn bce(&mut self, pred: Var, gt: Var, eps: f64) -> Result<Var> {
        let y = crate::loss::bce_value(self.value(pred), self.value(gt), eps)?;
        Ok(self.push(Tensor::scalar(y), Op::Bce { pred, gt, eps }, &[pred]))
    }

    /// Smoothed soft-IoU loss. The target is treated as constant.
    pub fn iou(&mut self, pred: Var, gt: Var, smooth: f64) -> Result<Var> {
        let y = crate::loss::iou_value(self.value(pred), self.value(gt), smooth)?;
        Ok(self.push(Tensor::scalar(y), Op::Iou { pred, gt, smooth }, &[pred]))
    }

    /// Propagates d`loss` to every recorded node. Consumes the recording: a
    /// second call fails until [`reset`](Self::reset).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this recording; reset and re-record first".into(),
            ));
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(shape));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = ops::matmul(g, &ops::transpose(bv)?)?;
                let db = ops::matmul(&ops::transpose(av)?, g)?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, ops::transpose(g)?);
            }
            Op::Softmax(x) => {
                self.accumulate(grads, *x, ops::softmax_backward(y, g));
            }
            Op::Conv2d { x, w, b, opts } => {
                let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), self.value(*b), *opts, g)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Resize(x) => {
                let dx = ops::bilinear_resize_backward(self.value(*x).shape(), g)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Binary { op, a, b, kind } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => {
                        // Expand each operand to the output shape before the product.
                        let bx = ops::binary(BinaryOp::Add, bv, &Tensor::zeros(y.shape().to_vec()))?;
                        let ax = ops::binary(BinaryOp::Add, av, &Tensor::zeros(y.shape().to_vec()))?;
                        (ops::binary(BinaryOp::Mul, g, &bx)?, ops::binary(BinaryOp::Mul, g, &ax)?)
                    }
                };
                let (ga, gb) = match kind {
                    Broadcast::Same => (ga, gb),
                    Broadcast::Lhs => (ops::reduce_channels(&ga)?, gb),
                    Broadcast::Rhs => (ga, ops::reduce_channels(&gb)?),
                };
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sigmoid(x) => {
                let dx = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = zip_map(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, zip_map(g, y, |gv, yv| gv * yv));
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::ScaleBy(x, s) => {
                let f = self.value(*s).data()[0];
                let xv = self.value(*x);
                let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *x, g.map(|v| v * f));
                self.accumulate(grads, *s, Tensor::new(self.value(*s).shape().to_vec(), vec![ds])?);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).shape()[0];
                    self.accumulate(grads, *p, ops::narrow(g, start, len)?);
                    start += len;
                }
            }
            Op::Narrow { x, start } => {
                let xv = self.value(*x);
                let inner: usize = xv.shape()[1..].iter().product();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.value(*x).shape().to_vec())?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.data()[0] / xv.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), v));
            }
            Op::Bce { pred, gt, eps } => {
                let dp = crate::loss::bce_grad(self.value(*pred), self.value(*gt), *eps)?;
                self.accumulate(grads, *pred, dp.map(|v| v * g.data()[0]));
            }
            Op::Iou { pred, gt, smooth } => {
                let dp = crate::loss::iou_grad(self.value(*pred), self.value(*gt), *smooth)?;
                self.accumulate(grads, *pred, dp.map(|v| v * g.data()[0]));
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn product_gradient_is_the_other_factor() {
        let mut tape = Tape::new();
        let xv = Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let yv = Tensor::new([4], vec![-1.0, 0.5, 0.25, 2.0]).unwrap();
        let x = tape.leaf(xv);
        let y = tape.leaf(yv.clone());
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &yv);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([3]));
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn second_backward_fails_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([3]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.leaf(Tensor::ones([3]));
        let s = tape.sum(x).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]));
        let c = tape.constant(Tensor::full([2], 3.0));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.5, -2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn broadcast_mask_gradient_sums_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([3, 2, 2]));
        let m = tape.leaf(Tensor::full([1, 2, 2], 0.5));
        let p = tape.mul(x, m).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(m).unwrap(), &Tensor::full([1, 2, 2], 3.0));
        assert_eq!(grads.get(x).unwrap(), &Tensor::full([3, 2, 2], 0.5));
    }
}
