//! The computation tape: define-by-run recording with replayable adjoints.
//!
//! Every adjoint rule is expressed in terms of recorded primitives, so the
//! gradient of a loss is itself a differentiable node. One tape serves one
//! forward pass (plus any backward passes derived from it); tapes are cheap
//! to create and are not shared across threads.

use std::cell::RefCell;
use std::rc::Rc;

use super::{strides, Element, Tensor};
use crate::error::{Error, Result};

/// Geometry of a conv2d application, shared by the forward op and both
/// adjoint ops.
#[derive(Clone, Copy, Debug)]
struct ConvSpec {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d { x: usize, k: usize, spec: ConvSpec },
    ConvInputGrad { gy: usize, k: usize, spec: ConvSpec },
    ConvKernelGrad { gy: usize, x: usize, spec: ConvSpec },
    Take { x: usize, idx: Rc<Vec<usize>> },
    Put { x: usize, idx: Rc<Vec<usize>> },
    SumAll(usize),
    SumAxis { x: usize, axis: usize },
    ExpandScalar { x: usize },
    ExpandAxis { x: usize, axis: usize },
    LogSumExp { x: usize, axis: usize },
    Reshape(usize),
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
    grad: Option<usize>,
}

struct TapeInner<E> {
    nodes: Vec<Node<E>>,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<E> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Registers a value on the tape. Gradients are only tracked into leaves
    /// with `requires_grad` set.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<E> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<E>, op: Op, requires_grad: bool) -> Var<E> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn handle(&self, id: usize) -> Var<E> {
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }
}

/// A tensor tracked on a tape.
pub struct Var<E> {
    tape: Tape<E>,
    id: usize,
}

impl<E> Clone for Var<E> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<E: Element> Var<E> {
    pub fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    pub fn value(&self) -> Tensor<E> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Read access to the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<E>) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn item(&self) -> Result<E> {
        self.with_value(|v| v.item())
    }

    /// Gradient recorded by the most recent backward pass, as a tracked Var.
    pub fn grad(&self) -> Option<Var<E>> {
        let gid = self.tape.inner.borrow().nodes[self.id].grad?;
        Some(self.tape.handle(gid))
    }

    pub fn grad_value(&self) -> Option<Tensor<E>> {
        self.grad().map(|g| g.value())
    }

    /// Re-registers the current value as an untracked constant.
    pub fn detach(&self) -> Var<E> {
        self.tape.leaf(self.value(), false)
    }

    fn same_tape(&self, other: &Var<E>) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars must live on the same tape"
        );
    }

    fn binary(&self, other: &Var<E>, op: Op, f: impl FnOnce(&[E], &[E]) -> Vec<E>) -> Var<E> {
        self.same_tape(other);
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let data = f(a.value.data(), b.value.data());
            (
                Tensor::new(a.value.shape().to_vec(), data).expect("binary op preserves shape"),
                a.requires_grad || b.requires_grad,
            )
        };
        self.tape.push(value, op, rg)
    }

    fn check_same_shape(&self, other: &Var<E>, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{what}: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<E>) -> Result<Var<E>> {
        self.check_same_shape(other, "add")?;
        Ok(self.binary(other, Op::Add(self.id, other.id), |a, b| {
            a.iter().zip(b).map(|(&x, &y)| x + y).collect()
        }))
    }

    pub fn sub(&self, other: &Var<E>) -> Result<Var<E>> {
        self.check_same_shape(other, "sub")?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            a.iter().zip(b).map(|(&x, &y)| x - y).collect()
        }))
    }

    pub fn mul(&self, other: &Var<E>) -> Result<Var<E>> {
        self.check_same_shape(other, "mul")?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            a.iter().zip(b).map(|(&x, &y)| x * y).collect()
        }))
    }

    pub fn scale(&self, c: f64) -> Var<E> {
        let ce = E::from_f64(c);
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.map(|v| v * ce), n.requires_grad)
        };
        self.tape.push(value, Op::Scale(self.id, c), rg)
    }

    pub fn neg(&self) -> Var<E> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var<E> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.map(|v| v.exp()), n.requires_grad)
        };
        self.tape.push(value, Op::Exp(self.id), rg)
    }

    /// Rectified linear unit; the gradient at exactly 0 is defined as 0.
    pub fn relu(&self) -> Var<E> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (
                n.value.map(|v| if v > E::zero() { v } else { E::zero() }),
                n.requires_grad,
            )
        };
        self.tape.push(value, Op::Relu(self.id), rg)
    }

    pub fn matmul(&self, other: &Var<E>) -> Result<Var<E>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul requires rank-2 tensors, got {sa:?} and {sb:?}"
            )));
        }
        if sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = {
            let inner = self.tape.inner.borrow();
            let a = inner.nodes[self.id].value.data();
            let b = inner.nodes[other.id].value.data();
            let mut out = vec![E::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = E::zero();
                    for p in 0..k {
                        acc += a[i * k + p] * b[p * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
            Tensor::new(vec![m, n], out).expect("matmul output shape")
        };
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Var<E>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose requires rank-2 tensor, got {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let value = {
            let inner = self.tape.inner.borrow();
            let a = inner.nodes[self.id].value.data();
            let mut out = vec![E::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out).expect("transpose output shape")
        };
        let rg = self.tape.rg(self.id);
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    /// 2-D cross-correlation. Accepts `[C,H,W]` (treated as batch 1) or
    /// `[B,C,H,W]` input; kernels are `[C_out, C_in, KH, KW]`.
    pub fn conv2d(&self, kernels: &Var<E>, stride: usize, pad: usize) -> Result<Var<E>> {
        self.same_tape(kernels);
        let s = self.shape();
        let ks = kernels.shape();
        if ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d kernels must be rank 4, got {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let unbatched = match s.len() {
            3 => true,
            4 => false,
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d input must be rank 3 or 4, got {s:?}"
                )))
            }
        };
        let x = if unbatched {
            let mut bs = vec![1];
            bs.extend_from_slice(&s);
            self.reshape(&bs)?
        } else {
            self.clone()
        };
        let xs = x.shape();
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {c_in}, kernels expect {kc}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let spec = ConvSpec {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let out = conv_forward(&x, kernels, spec);
        if unbatched {
            let os = out.shape();
            out.reshape(&os[1..])
        } else {
            Ok(out)
        }
    }

    /// 2x2 max pooling with stride 2 on `[B,C,H,W]`; odd trailing rows or
    /// columns are dropped.
    pub fn maxpool2(&self) -> Result<Var<E>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "maxpool2 input must be rank 4, got {s:?}"
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "maxpool2 needs spatial dims >= 2, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let idx = {
            let inner = self.tape.inner.borrow();
            let data = inner.nodes[self.id].value.data();
            let mut idx = Vec::with_capacity(b * c * oh * ow);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best = base + (2 * i) * w + 2 * j;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let cand = base + (2 * i + di) * w + (2 * j + dj);
                                    if data[cand] > data[best] {
                                        best = cand;
                                    }
                                }
                            }
                            idx.push(best);
                        }
                    }
                }
            }
            idx
        };
        Ok(self.take_indices(Rc::new(idx), vec![b, c, oh, ow]))
    }

    /// Picks `out[b] = in[b, labels[b]]` from a `[B,K]` tensor.
    pub fn select_classes(&self, labels: &[usize]) -> Result<Var<E>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "select_classes input must be rank 2, got {s:?}"
            )));
        }
        let (b, k) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "select_classes: {} labels for batch {b}",
                labels.len()
            )));
        }
        let mut idx = Vec::with_capacity(b);
        for (row, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Input(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            idx.push(row * k + y);
        }
        Ok(self.take_indices(Rc::new(idx), vec![b]))
    }

    fn take_indices(&self, idx: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Var<E> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let data = idx.iter().map(|&i| n.value.data()[i]).collect();
            (
                Tensor::new(out_shape, data).expect("take output shape"),
                n.requires_grad,
            )
        };
        self.tape.push(
            value,
            Op::Take {
                x: self.id,
                idx,
            },
            rg,
        )
    }

    fn put_indices(&self, idx: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Var<E> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            debug_assert_eq!(n.value.numel(), idx.len());
            let mut data = vec![E::zero(); out_shape.iter().product()];
            for (j, &i) in idx.iter().enumerate() {
                data[i] += n.value.data()[j];
            }
            (
                Tensor::new(out_shape, data).expect("put output shape"),
                n.requires_grad,
            )
        };
        self.tape.push(
            value,
            Op::Put {
                x: self.id,
                idx,
            },
            rg,
        )
    }

    pub fn sum_all(&self) -> Var<E> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let mut acc = E::zero();
            for &v in n.value.data() {
                acc += v;
            }
            (Tensor::scalar(acc), n.requires_grad)
        };
        self.tape.push(value, Op::SumAll(self.id), rg)
    }

    pub fn mean_all(&self) -> Var<E> {
        let numel = self.with_value(|v| v.numel());
        self.sum_all().scale(1.0 / numel as f64)
    }

    fn check_axis(&self, axis: usize, insert: bool) -> Result<Vec<usize>> {
        let s = self.shape();
        let limit = if insert { s.len() } else { s.len().saturating_sub(1) };
        if (insert && axis > s.len()) || (!insert && (s.is_empty() || axis > limit)) {
            return Err(Error::Dimension(format!(
                "axis {axis} invalid for shape {s:?}"
            )));
        }
        Ok(s)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<E>> {
        let s = self.check_axis(axis, false)?;
        let (outer, n, inner) = split_axis(&s, axis);
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let (value, rg) = {
            let tape = self.tape.inner.borrow();
            let node = &tape.nodes[self.id];
            let x = node.value.data();
            let mut out = vec![E::zero(); outer * inner];
            for o in 0..outer {
                for a in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += x[(o * n + a) * inner + i];
                    }
                }
            }
            (
                Tensor::new(out_shape, out).expect("sum_axis output shape"),
                node.requires_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::SumAxis { x: self.id, axis }, rg))
    }

    /// Repeats the tensor `n` times along a new axis inserted at `axis`.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Var<E>> {
        let s = self.check_axis(axis, true)?;
        let (outer, inner) = {
            let mut with_axis = s.clone();
            with_axis.insert(axis, n);
            let (o, _, i) = split_axis(&with_axis, axis);
            (o, i)
        };
        let mut out_shape = s.clone();
        out_shape.insert(axis, n);
        let (value, rg) = {
            let tape = self.tape.inner.borrow();
            let node = &tape.nodes[self.id];
            let x = node.value.data();
            let mut out = vec![E::zero(); outer * n * inner];
            for o in 0..outer {
                for a in 0..n {
                    for i in 0..inner {
                        out[(o * n + a) * inner + i] = x[o * inner + i];
                    }
                }
            }
            (
                Tensor::new(out_shape, out).expect("expand_axis output shape"),
                node.requires_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::ExpandAxis { x: self.id, axis }, rg))
    }

    /// Broadcasts a scalar to an arbitrary shape.
    pub fn expand_scalar(&self, shape: &[usize]) -> Result<Var<E>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.value.numel() != 1 {
                return Err(Error::Contract(format!(
                    "expand_scalar on tensor of shape {:?}",
                    n.value.shape()
                )));
            }
            (
                Tensor::filled(shape, n.value.data()[0]),
                n.requires_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::ExpandScalar { x: self.id }, rg))
    }

    /// Log-sum-exp along `axis`, always computed with max subtraction.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<E>> {
        let s = self.check_axis(axis, false)?;
        let (outer, n, inner) = split_axis(&s, axis);
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let (value, rg) = {
            let tape = self.tape.inner.borrow();
            let node = &tape.nodes[self.id];
            let x = node.value.data();
            let mut out = vec![E::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut m = x[(o * n) * inner + i];
                    for a in 1..n {
                        let v = x[(o * n + a) * inner + i];
                        if v > m {
                            m = v;
                        }
                    }
                    let mut acc = E::zero();
                    for a in 0..n {
                        acc += (x[(o * n + a) * inner + i] - m).exp();
                    }
                    out[o * inner + i] = m + acc.ln();
                }
            }
            (
                Tensor::new(out_shape, out).expect("logsumexp output shape"),
                node.requires_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::LogSumExp { x: self.id, axis }, rg))
    }

    /// Softmax along `axis`, via `exp(x - logsumexp(x))`.
    pub fn softmax(&self, axis: usize) -> Result<Var<E>> {
        let s = self.check_axis(axis, false)?;
        let n = s[axis];
        let lse = self.logsumexp(axis)?;
        Ok(self.sub(&lse.expand_axis(axis, n)?)?.exp())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<E>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.reshaped(shape)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Reverse pass from a scalar. Populates the `grad` slot of every node a
    /// gradient reaches; the recorded gradient is itself differentiable.
    pub fn backward(&self) -> Result<()> {
        let numel = self.with_value(|v| v.numel());
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let n = self.tape.len();
        // Drop grad pointers from any previous backward pass so unreached
        // nodes read as "no gradient" instead of a stale one.
        {
            let mut inner = self.tape.inner.borrow_mut();
            for node in inner.nodes.iter_mut() {
                node.grad = None;
            }
        }
        let mut adj: Vec<Option<usize>> = vec![None; n];
        let seed = self
            .tape
            .leaf(Tensor::filled(&self.shape(), E::one()), false);
        adj[self.id] = Some(seed.id);

        for id in (0..n).rev() {
            let Some(gid) = adj[id] else { continue };
            {
                let mut inner = self.tape.inner.borrow_mut();
                inner.nodes[id].grad = Some(gid);
            }
            let (op, rg) = {
                let inner = self.tape.inner.borrow();
                (inner.nodes[id].op.clone(), inner.nodes[id].requires_grad)
            };
            if !rg {
                continue;
            }
            let g = self.tape.handle(gid);
            self.distribute(id, &op, &g, &mut adj)?;
        }
        Ok(())
    }

    fn distribute(
        &self,
        id: usize,
        op: &Op,
        g: &Var<E>,
        adj: &mut [Option<usize>],
    ) -> Result<()> {
        let tape = &self.tape;
        let mut acc = |pid: usize, contrib: Var<E>| -> Result<()> {
            adj[pid] = Some(match adj[pid] {
                None => contrib.id,
                Some(prev) => tape.handle(prev).add(&contrib)?.id,
            });
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if tape.rg(*a) {
                    acc(*a, g.clone())?;
                }
                if tape.rg(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if tape.rg(*a) {
                    acc(*a, g.clone())?;
                }
                if tape.rg(*b) {
                    acc(*b, g.neg())?;
                }
            }
            Op::Mul(a, b) => {
                if tape.rg(*a) {
                    acc(*a, g.mul(&tape.handle(*b))?)?;
                }
                if tape.rg(*b) {
                    acc(*b, g.mul(&tape.handle(*a))?)?;
                }
            }
            Op::Scale(a, c) => {
                if tape.rg(*a) {
                    acc(*a, g.scale(*c))?;
                }
            }
            Op::Exp(a) => {
                if tape.rg(*a) {
                    acc(*a, g.mul(&tape.handle(id))?)?;
                }
            }
            Op::Relu(a) => {
                if tape.rg(*a) {
                    let mask = {
                        let inner = tape.inner.borrow();
                        inner.nodes[*a]
                            .value
                            .map(|v| if v > E::zero() { E::one() } else { E::zero() })
                    };
                    let mask = tape.leaf(mask, false);
                    acc(*a, g.mul(&mask)?)?;
                }
            }
            Op::MatMul(a, b) => {
                if tape.rg(*a) {
                    acc(*a, g.matmul(&tape.handle(*b).t()?)?)?;
                }
                if tape.rg(*b) {
                    acc(*b, tape.handle(*a).t()?.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => {
                if tape.rg(*a) {
                    acc(*a, g.t()?)?;
                }
            }
            Op::Conv2d { x, k, spec } => {
                if tape.rg(*x) {
                    acc(*x, conv_input_grad(g, &tape.handle(*k), *spec))?;
                }
                if tape.rg(*k) {
                    acc(*k, conv_kernel_grad(g, &tape.handle(*x), *spec))?;
                }
            }
            Op::ConvInputGrad { gy, k, spec } => {
                // Output is input-shaped; its cotangent g plays the input role.
                if tape.rg(*gy) {
                    acc(*gy, conv_forward(g, &tape.handle(*k), *spec))?;
                }
                if tape.rg(*k) {
                    acc(*k, conv_kernel_grad(&tape.handle(*gy), g, *spec))?;
                }
            }
            Op::ConvKernelGrad { gy, x, spec } => {
                // Output is kernel-shaped; its cotangent g plays the kernel role.
                if tape.rg(*gy) {
                    acc(*gy, conv_forward(&tape.handle(*x), g, *spec))?;
                }
                if tape.rg(*x) {
                    acc(*x, conv_input_grad(&tape.handle(*gy), g, *spec))?;
                }
            }
            Op::Take { x, idx } => {
                if tape.rg(*x) {
                    let shape = tape.shape_of(*x);
                    acc(*x, g.put_indices(Rc::clone(idx), shape))?;
                }
            }
            Op::Put { x, idx } => {
                if tape.rg(*x) {
                    let shape = tape.shape_of(*x);
                    acc(*x, g.take_indices(Rc::clone(idx), shape))?;
                }
            }
            Op::SumAll(a) => {
                if tape.rg(*a) {
                    let shape = tape.shape_of(*a);
                    acc(*a, g.expand_scalar(&shape)?)?;
                }
            }
            Op::SumAxis { x, axis } => {
                if tape.rg(*x) {
                    let n = tape.shape_of(*x)[*axis];
                    acc(*x, g.expand_axis(*axis, n)?)?;
                }
            }
            Op::ExpandScalar { x } => {
                if tape.rg(*x) {
                    let shape = tape.shape_of(*x);
                    acc(*x, g.sum_all().reshape(&shape)?)?;
                }
            }
            Op::ExpandAxis { x, axis } => {
                if tape.rg(*x) {
                    acc(*x, g.sum_axis(*axis)?)?;
                }
            }
            Op::LogSumExp { x, axis } => {
                if tape.rg(*x) {
                    let n = tape.shape_of(*x)[*axis];
                    // softmax(x) = exp(x - lse(x)), reusing this node's output.
                    let sm = tape
                        .handle(*x)
                        .sub(&tape.handle(id).expand_axis(*axis, n)?)?
                        .exp();
                    acc(*x, sm.mul(&g.expand_axis(*axis, n)?)?)?;
                }
            }
            Op::Reshape(a) => {
                if tape.rg(*a) {
                    let shape = tape.shape_of(*a);
                    acc(*a, g.reshape(&shape)?)?;
                }
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let st = strides(shape);
    let outer: usize = shape[..axis].iter().product();
    (outer, shape[axis], st[axis])
}

/// Shared triple-loop core for conv2d and its two adjoints. Which buffer is
/// accumulated into depends on the mode; the index space is identical, which
/// keeps the three operations exact adjoints of one another.
enum ConvMode {
    Forward,
    InputGrad,
    KernelGrad,
}

fn conv_core<E: Element>(
    mode: ConvMode,
    spec: ConvSpec,
    x: &[E],
    k: &[E],
    gy: &[E],
    out: &mut [E],
) {
    let ConvSpec {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        out_h,
        out_w,
    } = spec;
    for b in 0..batch {
        for co in 0..c_out {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let y_idx = ((b * c_out + co) * out_h + oh) * out_w + ow;
                    let mut acc = E::zero();
                    for ci in 0..c_in {
                        for p in 0..kh {
                            let ih = oh * stride + p;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            for q in 0..kw {
                                let iw = ow * stride + q;
                                if iw < pad || iw - pad >= w {
                                    continue;
                                }
                                let x_idx = ((b * c_in + ci) * h + (ih - pad)) * w + (iw - pad);
                                let k_idx = ((co * c_in + ci) * kh + p) * kw + q;
                                match mode {
                                    ConvMode::Forward => acc += x[x_idx] * k[k_idx],
                                    ConvMode::InputGrad => out[x_idx] += gy[y_idx] * k[k_idx],
                                    ConvMode::KernelGrad => out[k_idx] += gy[y_idx] * x[x_idx],
                                }
                            }
                        }
                    }
                    if let ConvMode::Forward = mode {
                        out[y_idx] = acc;
                    }
                }
            }
        }
    }
}

fn conv_forward<E: Element>(x: &Var<E>, k: &Var<E>, spec: ConvSpec) -> Var<E> {
    let tape = x.tape.clone();
    let value = {
        let inner = tape.inner.borrow();
        let xd = inner.nodes[x.id].value.data();
        let kd = inner.nodes[k.id].value.data();
        let mut out = vec![E::zero(); spec.batch * spec.c_out * spec.out_h * spec.out_w];
        conv_core(ConvMode::Forward, spec, xd, kd, &[], &mut out);
        Tensor::new(vec![spec.batch, spec.c_out, spec.out_h, spec.out_w], out)
            .expect("conv output shape")
    };
    let rg = tape.rg(x.id) || tape.rg(k.id);
    tape.push(
        value,
        Op::Conv2d {
            x: x.id,
            k: k.id,
            spec,
        },
        rg,
    )
}

fn conv_input_grad<E: Element>(gy: &Var<E>, k: &Var<E>, spec: ConvSpec) -> Var<E> {
    let tape = gy.tape.clone();
    let value = {
        let inner = tape.inner.borrow();
        let gyd = inner.nodes[gy.id].value.data();
        let kd = inner.nodes[k.id].value.data();
        let mut out = vec![E::zero(); spec.batch * spec.c_in * spec.h * spec.w];
        conv_core(ConvMode::InputGrad, spec, &[], kd, gyd, &mut out);
        Tensor::new(vec![spec.batch, spec.c_in, spec.h, spec.w], out)
            .expect("conv input grad shape")
    };
    let rg = tape.rg(gy.id) || tape.rg(k.id);
    tape.push(
        value,
        Op::ConvInputGrad {
            gy: gy.id,
            k: k.id,
            spec,
        },
        rg,
    )
}

fn conv_kernel_grad<E: Element>(gy: &Var<E>, x: &Var<E>, spec: ConvSpec) -> Var<E> {
    let tape = gy.tape.clone();
    let value = {
        let inner = tape.inner.borrow();
        let gyd = inner.nodes[gy.id].value.data();
        let xd = inner.nodes[x.id].value.data();
        let mut out = vec![E::zero(); spec.c_out * spec.c_in * spec.kh * spec.kw];
        conv_core(ConvMode::KernelGrad, spec, xd, &[], gyd, &mut out);
        Tensor::new(vec![spec.c_out, spec.c_in, spec.kh, spec.kw], out)
            .expect("conv kernel grad shape")
    };
    let rg = tape.rg(gy.id) || tape.rg(x.id);
    tape.push(
        value,
        Op::ConvKernelGrad {
            gy: gy.id,
            x: x.id,
            spec,
        },
        rg,
    )
}
