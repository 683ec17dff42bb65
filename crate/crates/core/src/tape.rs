//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node whose inputs are earlier nodes, so node
//! order is already a topological order and [`Tape::backward`] is a single
//! reverse sweep. Values flowing into a node that does not require a
//! gradient are recorded as plain constants, which keeps frozen sub-graphs
//! (a teacher network, say) free of saved intermediates.
//!
//! Learnable state lives in [`Param`]s. A forward pass binds each parameter
//! once per tape with [`Tape::param`]; after `backward` the leaf gradients
//! are moved onto the parameters with [`Tape::accumulate_into`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{dim_err, Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::loss;
use crate::kernels::norm::{self, NormAxis};
use crate::kernels::pool::{self, PoolKind};
use crate::kernels::resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable tensor with its gradient buffer and optimizer velocity.
#[derive(Debug)]
pub struct Param<T: Scalar = f64> {
    id: ParamId,
    value: Tensor<T>,
    grad: Vec<T>,
    velocity: Vec<T>,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let len = value.numel();
        Param {
            id: ParamId::fresh(),
            value,
            grad: vec![T::zero(); len],
            velocity: vec![T::zero(); len],
            trainable: true,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(dim_err!(
                "parameter shape {:?} cannot take {:?}",
                self.value.shape(),
                value.shape()
            ));
        }
        self.value = value;
        Ok(())
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Mutable access for an optimizer: `(value, grad, velocity)`.
    pub fn split_mut(&mut self) -> (&mut [T], &[T], &mut [T]) {
        (self.value.data_mut(), &self.grad, &mut self.velocity)
    }
}

impl<T: Scalar> Clone for Param<T> {
    /// Copies value, gradient and state under a fresh identity.
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            velocity: self.velocity.clone(),
            trainable: self.trainable,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    PoolSpatial {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    PoolChannel {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BroadcastMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Resize {
        x: Var,
    },
    Normalize {
        x: Var,
        axis: NormAxis,
        norms: Vec<T>,
    },
    AtMap {
        x: Var,
        power: i32,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore_index: u8,
        probs: Vec<T>,
        counted: usize,
    },
    Kd {
        student: Var,
        student_probs: Vec<T>,
        teacher_probs: Vec<T>,
        temperature: T,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Activation { .. } => "activation",
            Op::PoolSpatial { .. } => "pool_spatial",
            Op::PoolChannel { .. } => "pool_channel",
            Op::Dense { .. } => "dense",
            Op::BroadcastMul { .. } => "broadcast_mul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Resize { .. } => "bilinear_resize",
            Op::Normalize { .. } => "normalize",
            Op::AtMap { .. } => "at_map",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
            Op::Kd { .. } => "kd_loss",
            Op::Mse { .. } => "mse",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    bindings: HashMap<ParamId, Var>,
    grad_enabled: bool,
    checked: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Pads a shape to four extents by prepending ones.
fn dims4(d: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    out[4 - d.len()..].copy_from_slice(d);
    out
}

fn strides4(d: &[usize; 4]) -> [usize; 4] {
    [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1]
}

impl<T: Scalar> Tape<T> {
    /// A tape that records gradients and rejects non-finite op outputs.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            bindings: HashMap::new(),
            grad_enabled: true,
            checked: true,
        }
    }

    /// Forward-only tape: nothing it produces requires a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes that will take part in `backward`.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.check(&value, "leaf")?;
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy of `v` as a constant: nothing recorded after it reaches `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf, once per tape.
    pub fn param(&mut self, p: &Param<T>) -> Result<Var> {
        if let Some(&v) = self.bindings.get(&p.id) {
            return Ok(v);
        }
        let v = self.leaf(p.value.clone(), p.trainable)?;
        self.bindings.insert(p.id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Adds the leaf gradients of bound, trainable parameters onto their
    /// gradient buffers. Returns how many parameters received a gradient.
    pub fn accumulate_into<'a, I>(&self, params: I) -> usize
    where
        I: IntoIterator<Item = &'a mut Param<T>>,
    {
        let mut touched = 0;
        for p in params {
            if !p.trainable {
                continue;
            }
            let Some(v) = self.bindings.get(&p.id) else {
                continue;
            };
            if let Some(g) = self.leaf_grads.get(&v.0) {
                for (acc, d) in p.grad.iter_mut().zip(g) {
                    *acc += *d;
                }
                touched += 1;
            }
        }
        touched
    }

    fn check(&self, value: &Tensor<T>, op: &str) -> Result<()> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        self.check(&value, op.name())?;
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn nchw(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v).shape().nchw()
    }

    // ---- operations -----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).dims(), self.value(kernel).dims(), stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).dims() != [geom.co] {
                return Err(dim_err!(
                    "conv2d bias {:?} for {} output channels",
                    self.value(b).dims(),
                    geom.co
                ));
            }
        }
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&geom.out_dims(), out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(value, Op::Activation { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Global pooling over `(h, w)`: `[n,c,h,w] -> [n,c,1,1]`.
    pub fn pool_spatial(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        if h * w == 0 {
            return Err(Error::Geometry("pool over an empty plane".into()));
        }
        let (out, argmax) = pool::spatial_forward(self.value(x).data(), n, c, h * w, kind);
        let value = Tensor::from_vec(&[n, c, 1, 1], out)?;
        self.push(value, Op::PoolSpatial { x, kind, argmax }, &[x])
    }

    /// Pooling across channels: `[n,c,h,w] -> [n,1,h,w]`.
    pub fn pool_channel(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        if c == 0 {
            return Err(Error::Geometry("pool over zero channels".into()));
        }
        let (out, argmax) = pool::channel_forward(self.value(x).data(), n, c, h * w, kind);
        let value = Tensor::from_vec(&[n, 1, h, w], out)?;
        self.push(value, Op::PoolChannel { x, kind, argmax }, &[x])
    }

    /// Affine map `x @ w^T + b` for `x: [n, d_in]`, `w: [d_out, d_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = match *self.value(x).dims() {
            [n, d] => (n, d),
            ref d => return Err(dim_err!("dense input {:?} is not rank 2", d)),
        };
        let dout = match *self.value(w).dims() {
            [o, i] if i == din => o,
            ref d => return Err(dim_err!("dense weight {:?} for input width {}", d, din)),
        };
        if let Some(b) = b {
            if self.value(b).dims() != [dout] {
                return Err(dim_err!(
                    "dense bias {:?} for width {}",
                    self.value(b).dims(),
                    dout
                ));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += *bv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Dense { x, w, b }, &inputs)
    }

    /// Elementwise `a * b` where every extent of `b` equals that of `a` or 1.
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.value(a).dims(), self.value(b).dims());
        if ad.len() != bd.len() || ad.iter().zip(bd).any(|(x, y)| y != x && *y != 1) {
            return Err(dim_err!("cannot broadcast {:?} onto {:?}", bd, ad));
        }
        let a4 = dims4(ad);
        let b4 = dims4(bd);
        let bs = broadcast_strides(&b4);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len());
        for_each_index(&a4, |flat, idx| {
            out.push(av[flat] * bv[offset(&idx, &bs)]);
        });
        let value = Tensor::from_vec(ad, out)?;
        self.push(value, Op::BroadcastMul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::from_vec(self.value(a).dims(), data)?;
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Concatenates `[n, c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.nchw(first)?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.nchw(p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(dim_err!("concat of mismatched tensors"));
            }
            channels += pc;
        }
        let mut out = Vec::with_capacity(n * channels * h * w);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let stride = t.dims()[1] * h * w;
                out.extend_from_slice(&t.data()[s * stride..(s + 1) * stride]);
            }
        }
        let value = Tensor::from_vec(&[n, channels, h, w], out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Per-channel `x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        if self.value(scale).dims() != [c] || self.value(shift).dims() != [c] {
            return Err(dim_err!(
                "channel affine parameters must have {} entries",
                c
            ));
        }
        let (xv, sv, tv) = (
            self.value(x).data(),
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let hw = h * w;
        let mut out = Vec::with_capacity(xv.len());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                out.extend(xv[base..base + hw].iter().map(|v| *v * sv[ch] + tv[ch]));
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        self.push(
            value,
            Op::ChannelAffine { x, scale, shift },
            &[x, scale, shift],
        )
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(Error::Geometry(format!("resize {h}x{w} to {oh}x{ow}")));
        }
        let out = resize::forward(self.value(x).data(), n * c, h, w, oh, ow);
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        self.push(value, Op::Resize { x }, &[x])
    }

    /// Unit L2 norm per group; groups below the degenerate threshold pass
    /// through unchanged.
    pub fn normalize(&mut self, x: Var, axis: NormAxis) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x)?;
        let r = norm::normalize_forward(self.value(x).data(), axis, n, c, h * w);
        let value = Tensor::from_vec(&[n, c, h, w], r.values)?;
        self.push(
            value,
            Op::Normalize {
                x,
                axis,
                norms: r.norms,
            },
            &[x],
        )
    }

    /// Attention-transfer map `[n,c,h,w] -> [n,1,h,w]` and per-sample flags
    /// marking all-zero inputs.
    pub fn at_map(&mut self, x: Var, power: i32) -> Result<(Var, Vec<bool>)> {
        if power < 1 {
            return Err(Error::Contract(format!("attention power {power} < 1")));
        }
        let (n, c, h, w) = self.nchw(x)?;
        let r = norm::at_map_forward(self.value(x).data(), n, c, h * w, power);
        let value = Tensor::from_vec(&[n, 1, h, w], r.map)?;
        let v = self.push(
            value,
            Op::AtMap {
                x,
                power,
                norms: r.norms,
            },
            &[x],
        )?;
        Ok((v, r.degenerate))
    }

    /// Mean pixel cross-entropy of `[n,K,h,w]` logits against `[n*h*w]`
    /// labels, skipping `ignore_index`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore_index: u8,
    ) -> Result<Var> {
        let (n, k, h, w) = self.nchw(logits)?;
        let r = loss::cross_entropy_forward(
            self.value(logits).data(),
            labels,
            n,
            k,
            h * w,
            ignore_index,
        )?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            ignore_index,
            probs: r.probs,
            counted: r.counted,
        };
        self.push(Tensor::scalar(r.loss), op, &[logits])
    }

    /// Temperature-softened KL divergence from the teacher distribution to
    /// the student's. The teacher side is treated as a constant.
    pub fn kd_loss(&mut self, student: Var, teacher: Var, temperature: T) -> Result<Var> {
        if self.value(student).shape() != self.value(teacher).shape() {
            return Err(dim_err!(
                "kd logits {:?} vs {:?}",
                self.value(student).shape(),
                self.value(teacher).shape()
            ));
        }
        if !(temperature > T::zero()) {
            return Err(Error::Contract("kd temperature must be positive".into()));
        }
        let (n, k, h, w) = self.nchw(student)?;
        let r = loss::kd_forward(
            self.value(student).data(),
            self.value(teacher).data(),
            n,
            k,
            h * w,
            temperature,
        );
        let op = Op::Kd {
            student,
            student_probs: r.student_probs,
            teacher_probs: r.teacher_probs,
            temperature,
        };
        self.push(Tensor::scalar(r.loss), op, &[student])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err!("mse {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let sum: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum();
        let mean = sum / T::from_usize(av.numel().max(1)).unwrap();
        self.push(Tensor::scalar(mean), Op::Mse { a, b }, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    // ---- reverse sweep --------------------------------------------------

    /// Propagates `d loss / d loss = 1` back to every leaf that requires a
    /// gradient. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    let acc = self
                        .leaf_grads
                        .entry(i)
                        .or_insert_with(|| vec![T::zero(); g.len()]);
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += *d;
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let want = (
                    nodes[x.0].requires_grad,
                    nodes[kernel.0].requires_grad,
                    bias.is_some_and(|b| nodes[b.0].requires_grad),
                );
                let r = conv::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    want,
                );
                if let (Some(acc), Some(d)) = (slot!(*x), r.input) {
                    add_into(acc, &d);
                }
                if let (Some(acc), Some(d)) = (slot!(*kernel), r.kernel) {
                    add_into(acc, &d);
                }
                if let Some(b) = bias {
                    if let (Some(acc), Some(d)) = (slot!(*b), r.bias) {
                        add_into(acc, &d);
                    }
                }
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                if let Some(acc) = slot!(*x) {
                    match kind {
                        Activation::Relu => {
                            for ((a, d), v) in acc.iter_mut().zip(g).zip(xv) {
                                if *v > T::zero() {
                                    *a += *d;
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for ((a, d), s) in acc.iter_mut().zip(g).zip(y) {
                                *a += *d * *s * (T::one() - *s);
                            }
                        }
                    }
                }
            }
            Op::PoolSpatial { x, kind, argmax } => {
                let (_, _, h, w) = self.nchw(*x)?;
                if let Some(acc) = slot!(*x) {
                    pool::spatial_backward(g, h * w, *kind, argmax, acc);
                }
            }
            Op::PoolChannel { x, kind, argmax } => {
                let (n, c, h, w) = self.nchw(*x)?;
                if let Some(acc) = slot!(*x) {
                    pool::channel_backward(g, n, c, h * w, *kind, argmax, acc);
                }
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x);
                let (n, din) = (xv.dims()[0], xv.dims()[1]);
                let dout = self.value(*w).dims()[0];
                if let Some(acc) = slot!(*x) {
                    // dx = g @ w
                    T::gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        g,
                        false,
                        self.value(*w).data(),
                        false,
                        T::one(),
                        acc,
                    );
                }
                if let Some(acc) = slot!(*w) {
                    // dw = g^T @ x
                    T::gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        g,
                        true,
                        xv.data(),
                        false,
                        T::one(),
                        acc,
                    );
                }
                if let Some(b) = b {
                    if let Some(acc) = slot!(*b) {
                        for row in g.chunks(dout) {
                            add_into(acc, row);
                        }
                    }
                }
            }
            Op::BroadcastMul { a, b } => {
                let a4 = dims4(self.value(*a).dims());
                let b4 = dims4(self.value(*b).dims());
                let bs = broadcast_strides(&b4);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(acc) = slot!(*a) {
                    for_each_index(&a4, |flat, idx| {
                        acc[flat] += g[flat] * bv[offset(&idx, &bs)]
                    });
                }
                if let Some(acc) = slot!(*b) {
                    for_each_index(&a4, |flat, idx| {
                        acc[offset(&idx, &bs)] += g[flat] * av[flat]
                    });
                }
            }
            Op::Add { a, b } => {
                if let Some(acc) = slot!(*a) {
                    add_into(acc, g);
                }
                if let Some(acc) = slot!(*b) {
                    add_into(acc, g);
                }
            }
            Op::Scale { x, factor } => {
                if let Some(acc) = slot!(*x) {
                    for (a, d) in acc.iter_mut().zip(g) {
                        *a += *d * *factor;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(acc) = slot!(*x) {
                    add_into(acc, g);
                }
            }
            Op::Concat { parts } => {
                let (n, total, h, w) = node.value.shape().nchw()?;
                let hw = h * w;
                let mut ch = 0;
                for p in parts {
                    let pc = self.value(*p).dims()[1];
                    if let Some(acc) = slot!(*p) {
                        for s in 0..n {
                            let src = &g[(s * total + ch) * hw..(s * total + ch + pc) * hw];
                            add_into(&mut acc[s * pc * hw..(s + 1) * pc * hw], src);
                        }
                    }
                    ch += pc;
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c, h, w) = self.nchw(*x)?;
                let hw = h * w;
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                if let Some(acc) = slot!(*x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for q in base..base + hw {
                                acc[q] += g[q] * sv[ch];
                            }
                        }
                    }
                }
                if let Some(acc) = slot!(*scale) {
                    for s in 0..n {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            let base = (s * c + ch) * hw;
                            *a += (base..base + hw).map(|q| g[q] * xv[q]).sum::<T>();
                        }
                    }
                }
                if let Some(acc) = slot!(*shift) {
                    for s in 0..n {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            let base = (s * c + ch) * hw;
                            *a += g[base..base + hw].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::Resize { x } => {
                let (n, c, h, w) = self.nchw(*x)?;
                let (_, _, oh, ow) = node.value.shape().nchw()?;
                if let Some(acc) = slot!(*x) {
                    resize::backward(g, n * c, h, w, oh, ow, acc);
                }
            }
            Op::Normalize { x, axis, norms } => {
                let (n, c, h, w) = self.nchw(*x)?;
                if let Some(acc) = slot!(*x) {
                    norm::normalize_backward(g, node.value.data(), norms, *axis, n, c, h * w, acc);
                }
            }
            Op::AtMap { x, power, norms } => {
                let (n, c, h, w) = self.nchw(*x)?;
                let xv = self.value(*x).data();
                if let Some(acc) = slot!(*x) {
                    norm::at_map_backward(
                        g,
                        xv,
                        (node.value.data(), norms),
                        n,
                        c,
                        h * w,
                        *power,
                        acc,
                    );
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore_index,
                probs,
                counted,
            } => {
                let (n, k, h, w) = self.nchw(*logits)?;
                if let Some(acc) = slot!(*logits) {
                    loss::cross_entropy_backward(
                        g[0],
                        probs,
                        labels,
                        n,
                        k,
                        h * w,
                        *ignore_index,
                        *counted,
                        acc,
                    );
                }
            }
            Op::Kd {
                student,
                student_probs,
                teacher_probs,
                temperature,
            } => {
                let (n, _, h, w) = self.nchw(*student)?;
                if let Some(acc) = slot!(*student) {
                    loss::kd_backward(
                        g[0],
                        (student_probs, teacher_probs),
                        n * h * w,
                        *temperature,
                        acc,
                    );
                }
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = g[0] * T::from_f64_lossy(2.0) / T::from_usize(av.len().max(1)).unwrap();
                if let Some(acc) = slot!(*a) {
                    for ((d, x), y) in acc.iter_mut().zip(av).zip(bv) {
                        *d += scale * (*x - *y);
                    }
                }
                if let Some(acc) = slot!(*b) {
                    for ((d, x), y) in acc.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (*x - *y);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(acc) = slot!(*x) {
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(acc) = slot!(*x) {
                    let share = g[0] / T::from_usize(acc.len().max(1)).unwrap();
                    for a in acc.iter_mut() {
                        *a += share;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1).
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let half = T::from_f64_lossy(0.5);
    s.max(T::min_positive_value())
        .min(T::one() - T::epsilon() * half)
}

/// Gradient buffer of `v`, or None when `v` needs none.
fn grad_slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(acc: &mut [T], d: &[T]) {
    for (a, v) in acc.iter_mut().zip(d) {
        *a += *v;
    }
}

fn broadcast_strides(d: &[usize; 4]) -> [usize; 4] {
    let s = strides4(d);
    let mut out = [0; 4];
    for k in 0..4 {
        out[k] = if d[k] == 1 { 0 } else { s[k] };
    }
    out
}

fn offset(idx: &[usize; 4], strides: &[usize; 4]) -> usize {
    idx.iter().zip(strides).map(|(i, s)| i * s).sum()
}

fn for_each_index(d: &[usize; 4], mut f: impl FnMut(usize, [usize; 4])) {
    let mut flat = 0;
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                for i3 in 0..d[3] {
                    f(flat, [i0, i1, i2, i3]);
                    flat += 1;
                }
            }
        }
    }
}
