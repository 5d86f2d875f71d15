//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to run its backward rule. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and [`Tape::backward`] walks
//! it once in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::kernels::{self, ConvGeom};
use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Neg,
    Abs,
    Exp,
    Relu,
    Elu,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    L1,
}

/// Explicit per-side zero padding for 2-D convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    pub const NONE: Pad2d = Pad2d {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    /// Size-preserving padding for a stride-1 kernel; odd remainders go after.
    pub fn same(k_h: usize, k_w: usize) -> Self {
        let (ph, pw) = (k_h - 1, k_w - 1);
        Pad2d {
            top: ph / 2,
            bottom: ph - ph / 2,
            left: pw / 2,
            right: pw - pw / 2,
        }
    }
}

/// A fixed linear map with a known adjoint, recorded as a single tape node.
pub trait LinearOp<T>: Send + Sync {
    fn name(&self) -> &'static str;
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[T]) -> Vec<T>;
    fn adjoint(&self, g: &[T]) -> Vec<T>;
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Abs(Var),
    Exp(Var),
    Relu(Var),
    Elu(Var),
    Scale(Var, T),
    AddConst(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        dims: [usize; 4],
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    /// Adjoint of the stored forward convolution geometry.
    TConv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    AvgPool(Var),
    MaxPool(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    L1(Var),
    CMag(Var),
    MagSoftmax {
        re: Var,
        im: Var,
    },
    ColSoftmax(Var),
    Linear {
        x: Var,
        map: Arc<dyn LinearOp<T>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Elu(..) => "elu",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::TConv2d { .. } => "tconv2d",
            Op::AvgPool(..) => "avg_pool",
            Op::MaxPool(..) => "max_pool",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L1(..) => "l1",
            Op::CMag(..) => "cmag",
            Op::MagSoftmax { .. } => "mag_softmax",
            Op::ColSoftmax(..) => "col_softmax",
            Op::Linear { map, .. } => map.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Abs(a)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::AvgPool(a)
            | Op::MaxPool(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L1(a)
            | Op::CMag(a)
            | Op::ColSoftmax(a) => vec![*a],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } | Op::TConv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { x, .. } | Op::Permute { x, .. } | Op::Linear { x, .. } => vec![*x],
            Op::MagSoftmax { re, im } => vec![*re, *im],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct NodeGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> NodeGrads<T> {
    /// Gradient with respect to `v`; `None` when `v` does not require grad
    /// or does not reach the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Splits a shape into (batch, rows, cols) for the last two axes.
fn as_batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((1, shape[0], shape[1])),
        3 => Some((shape[0], shape[1], shape[2])),
        _ => None,
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Operation names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Which side of every non-differentiable point the recorded values lie
    /// on: input signs of abs, relu, elu and l1 nodes, and max-pool winners.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Abs(a) | Op::Relu(a) | Op::Elu(a) | Op::L1(a) => {
                    sig.extend(self.nodes[a.0].value.data().iter().map(|&v| (v > T::zero()) as u32));
                }
                Op::MaxPool(_, winners) => sig.extend(winners.iter().map(|&w| w as u32)),
                _ => {}
            }
        }
        sig
    }

    /// Input node ids of `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.tensor(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => match kind {
                Elementwise::Add => self.add(a, b),
                Elementwise::Sub => self.sub(a, b),
                _ => self.mul(a, b),
            },
            (false, None) => Ok(match kind {
                Elementwise::Neg => self.neg(a),
                Elementwise::Abs => self.abs(a),
                Elementwise::Exp => self.exp(a),
                Elementwise::Relu => self.relu(a),
                _ => self.elu(a),
            }),
            _ => Err(Error::invalid_shape(
                "elementwise",
                format!("{kind:?} given the wrong number of operands"),
            )),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu);
        self.push(v, Op::Elu(a))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    /// Addition of a constant.
    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    /// Matrix product on the last two axes; rank-2 operands or rank-3
    /// operands with a shared leading batch extent.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (Some((ba, ra, ca)), Some((bb, rb, cb))) = (as_batched(&sa), as_batched(&sb)) else {
            return Err(Error::shape("matmul", &sa, &sb));
        };
        let (m, ka) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if ba != bb || ka != kb || sa.len() != sb.len() {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let data = kernels::gemm(
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            ba,
            m,
            ka,
            n,
        );
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![ba, m, n] };
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                dims: [ba, m, ka, n],
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    fn conv_geom(
        op: &'static str,
        xs: &[usize],
        k_h: usize,
        k_w: usize,
        c_in: usize,
        c_out: usize,
        stride: (usize, usize),
        pad: Pad2d,
    ) -> Result<ConvGeom> {
        if xs.len() != 3 || xs[2] != c_in {
            return Err(Error::invalid_shape(
                op,
                format!("input {xs:?} does not have {c_in} channels in H×W×C layout"),
            ));
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::invalid_shape(op, "stride must be positive"));
        }
        let ph = xs[0] + pad.top + pad.bottom;
        let pw = xs[1] + pad.left + pad.right;
        if ph < k_h || pw < k_w {
            return Err(Error::invalid_shape(
                op,
                format!("padded extent {ph}×{pw} smaller than kernel {k_h}×{k_w}"),
            ));
        }
        if (ph - k_h) % sh != 0 || (pw - k_w) % sw != 0 {
            return Err(Error::invalid_shape(
                op,
                format!("padded extent {ph}×{pw} with kernel {k_h}×{k_w} and stride {sh}×{sw} gives a non-integral output size"),
            ));
        }
        Ok(ConvGeom {
            in_h: xs[0],
            in_w: xs[1],
            in_c: c_in,
            out_c: c_out,
            k_h,
            k_w,
            stride_h: sh,
            stride_w: sw,
            pad_top: pad.top,
            pad_left: pad.left,
            out_h: (ph - k_h) / sh + 1,
            out_w: (pw - k_w) / sw + 1,
        })
    }

    /// Cross-correlation of an `H×W×Cin` image with a `KH×KW×Cin×Cout` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), pad: Pad2d) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(Error::invalid_shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        }
        if self.shape(b) != [ws[3]] {
            return Err(Error::shape("conv2d bias", self.shape(b), &[ws[3]]));
        }
        let geom = Self::conv_geom("conv2d", self.shape(x), ws[0], ws[1], ws[2], ws[3], stride, pad)?;
        let mut data = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &geom);
        kernels::add_channel_bias(&mut data, self.value(b).data());
        let shape = vec![geom.out_h, geom.out_w, geom.out_c];
        Ok(self.push(Tensor::from_parts(shape, data), Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution: the adjoint of a stride-`s` convolution whose
    /// input is `s` times larger than `x` in both spatial extents.
    ///
    /// `w` is `KH×KW×Cout×Cin` (the forward convolution's layout, mapping
    /// `Cout` channels to `Cin`). Padding `K − s` is split with the remainder
    /// after, which makes the output exactly `s×H × s×W`.
    pub fn tconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || xs.len() != 3 || xs[2] != ws[3] {
            return Err(Error::shape("tconv2d", &xs, &ws));
        }
        if self.shape(b) != [ws[2]] {
            return Err(Error::shape("tconv2d bias", self.shape(b), &[ws[2]]));
        }
        let (k_h, k_w) = (ws[0], ws[1]);
        if stride == 0 || k_h < stride || k_w < stride {
            return Err(Error::invalid_shape(
                "tconv2d",
                format!("kernel {k_h}×{k_w} cannot scale extents by stride {stride}"),
            ));
        }
        let (ph, pw) = (k_h - stride, k_w - stride);
        let pad = Pad2d {
            top: ph / 2,
            bottom: ph - ph / 2,
            left: pw / 2,
            right: pw - pw / 2,
        };
        let out_shape = [xs[0] * stride, xs[1] * stride, ws[2]];
        let geom = Self::conv_geom("tconv2d", &out_shape, k_h, k_w, ws[2], ws[3], (stride, stride), pad)?;
        if geom.out_h != xs[0] || geom.out_w != xs[1] {
            return Err(Error::invalid_shape(
                "tconv2d",
                format!("kernel {k_h}×{k_w} with stride {stride} cannot map {xs:?} to {out_shape:?}"),
            ));
        }
        let mut data = kernels::conv_backward_input(self.value(x).data(), self.value(w).data(), &geom);
        kernels::add_channel_bias(&mut data, self.value(b).data());
        Ok(self.push(Tensor::from_parts(out_shape.to_vec(), data), Op::TConv2d { x, w, b, geom }))
    }

    /// 2×2 pooling with stride 2 over an `H×W×C` image.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::invalid_shape(
                "pool2d",
                format!("needs H×W×C with even spatial extents, got {s:?}"),
            ));
        }
        let out_shape = vec![s[0] / 2, s[1] / 2, s[2]];
        let xv = self.value(x).data();
        Ok(match kind {
            PoolKind::Avg => {
                let y = kernels::avg_pool_forward(xv, s[0], s[1], s[2]);
                self.push(Tensor::from_parts(out_shape, y), Op::AvgPool(x))
            }
            PoolKind::Max => {
                let (y, arg) = kernels::max_pool_forward(xv, s[0], s[1], s[2]);
                self.push(Tensor::from_parts(out_shape, y), Op::MaxPool(x, arg))
            }
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_axis(axis, start, len)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        Ok(self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reduce(&mut self, kind: Reduction, x: Var) -> Var {
        let xv = self.value(x);
        let (val, op) = match kind {
            Reduction::Sum => (xv.sum(), Op::Sum(x)),
            Reduction::Mean => (xv.sum() / T::of(xv.numel() as f64), Op::Mean(x)),
            Reduction::L1 => (xv.data().iter().map(|v| v.abs()).sum(), Op::L1(x)),
        };
        self.push(Tensor::scalar(val), op)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Mean, x)
    }

    pub fn l1(&mut self, x: Var) -> Var {
        self.reduce(Reduction::L1, x)
    }

    /// Magnitudes of a stacked complex tensor: the last axis holds `C` real
    /// parts followed by `C` imaginary parts; the result has `C` there.
    pub fn cmag(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().unwrap_or(&0);
        if last % 2 != 0 {
            return Err(Error::invalid_shape("cmag", format!("last extent of {s:?} must be even")));
        }
        let c = last / 2;
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(last)
            .flat_map(|row| (0..c).map(move |j| row[j].hypot(row[c + j])))
            .collect();
        let mut shape = s;
        *shape.last_mut().expect("rank ≥ 1") = c;
        Ok(self.push(Tensor::from_parts(shape, data), Op::CMag(x)))
    }

    /// Column-wise magnitude softmax with phase retention for batches of
    /// square complex matrices given as real and imaginary parts `B×C×C`.
    ///
    /// Output is `2×B×C×C` (real block then imaginary block). For each batch
    /// entry and column `c'`, magnitudes `exp|p[c,c']| / Σ_c exp|p[c,c']|`
    /// are assigned the phase of `p[c,c']` (phase 0 where `p = 0`).
    pub fn mag_softmax(&mut self, re: Var, im: Var) -> Result<Var> {
        self.same_shape("mag_softmax", re, im)?;
        let s = self.shape(re).to_vec();
        let Some((b, rows, cols)) = as_batched(&s).filter(|&(_, r, c)| r == c) else {
            return Err(Error::invalid_shape("mag_softmax", format!("needs square matrices, got {s:?}")));
        };
        let n = b * rows * cols;
        let (pr, pi) = (self.value(re).data(), self.value(im).data());
        let mut out = vec![T::zero(); 2 * n];
        let mut mags = vec![T::zero(); rows];
        for bi in 0..b {
            for col in 0..cols {
                let mut mx = T::neg_infinity();
                for (row, m) in mags.iter_mut().enumerate() {
                    let idx = (bi * rows + row) * cols + col;
                    *m = pr[idx].hypot(pi[idx]);
                    mx = mx.max(*m);
                }
                let mut total = T::zero();
                for m in mags.iter_mut() {
                    *m = (*m - mx).exp();
                    total += *m;
                }
                for (row, e) in mags.iter().enumerate() {
                    let idx = (bi * rows + row) * cols + col;
                    let w = *e / total;
                    let m = pr[idx].hypot(pi[idx]);
                    if m > T::zero() {
                        out[idx] = w * (pr[idx] / m);
                        out[n + idx] = w * (pi[idx] / m);
                    } else {
                        out[idx] = w;
                    }
                }
            }
        }
        let mut shape = vec![2];
        shape.extend_from_slice(&s);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MagSoftmax { re, im }))
    }

    /// Softmax over the row index of each column for `B×C×C` real matrices.
    pub fn col_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some((b, rows, cols)) = as_batched(&s) else {
            return Err(Error::invalid_shape("col_softmax", format!("needs rank 2 or 3, got {s:?}")));
        };
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for col in 0..cols {
                let at = |row: usize| (bi * rows + row) * cols + col;
                let mx = (0..rows).map(|r| xv[at(r)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for r in 0..rows {
                    let e = (xv[at(r)] - mx).exp();
                    out[at(r)] = e;
                    total += e;
                }
                for r in 0..rows {
                    out[at(r)] = out[at(r)] / total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::ColSoftmax(x)))
    }

    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearOp<T>>) -> Result<Var> {
        if self.shape(x) != map.input_shape().as_slice() {
            return Err(Error::shape(map.name(), self.shape(x), &map.input_shape()));
        }
        let y = map.apply(self.value(x).data());
        let shape = map.output_shape();
        Ok(self.push(Tensor::from_parts(shape, y), Op::Linear { x, map }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid_shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.node_backward(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients of `loss` for every parameter in `store`.
    pub fn param_grads(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let node_grads = self.backward(loss)?;
        let mut out = Gradients::zeros_like(store);
        for node_idx in self.params.values() {
            let node = &self.nodes[node_idx.0];
            if let (Some(id), Some(g)) = (node.param, node_grads.wrt(*node_idx)) {
                out.set(id, g.clone());
            }
        }
        Ok(out)
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let unary = |a: Var, f: &dyn Fn(T, T, T) -> T| {
            // f(input, output, grad)
            let data = val(a)
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&x, &y), &gv)| f(x, y, gv))
                .collect();
            vec![(a, like(a, data))]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |gv, y| gv * y).expect("shape")),
                (*b, g.zip_map(val(*a), |gv, x| gv * x).expect("shape")),
            ],
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Abs(a) => unary(*a, &|x, _, gv| gv * sign(x)),
            Op::Exp(a) => unary(*a, &|_, y, gv| gv * y),
            Op::Relu(a) => unary(*a, &|x, _, gv| if x > T::zero() { gv } else { T::zero() }),
            Op::Elu(a) => unary(*a, &|x, y, gv| if x > T::zero() { gv } else { gv * (y + T::one()) }),
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * *f))],
            Op::AddConst(a) => vec![(*a, g.clone())],
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                dims: [batch, m, k, n],
            } => {
                let (av, bv, gv) = (val(*a).data(), val(*b).data(), g.data());
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ga = if *trans_a {
                    kernels::gemm(bv, *trans_b, gv, true, batch, k, n, m)
                } else {
                    kernels::gemm(gv, false, bv, !*trans_b, batch, m, n, k)
                };
                let gb = if *trans_b {
                    kernels::gemm(gv, true, av, *trans_a, batch, n, m, k)
                } else {
                    kernels::gemm(av, !*trans_a, gv, false, batch, k, m, n)
                };
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Conv2d { x, w, b, geom } => {
                let gx = kernels::conv_backward_input(g.data(), val(*w).data(), geom);
                let gw = kernels::conv_backward_weight(val(*x).data(), g.data(), geom);
                let gb = kernels::channel_sum(g.data(), geom.out_c);
                vec![(*x, like(*x, gx)), (*w, like(*w, gw)), (*b, like(*b, gb))]
            }
            Op::TConv2d { x, w, b, geom } => {
                let gx = kernels::conv_forward(g.data(), val(*w).data(), geom);
                let gw = kernels::conv_backward_weight(g.data(), val(*x).data(), geom);
                let gb = kernels::channel_sum(g.data(), geom.in_c);
                vec![(*x, like(*x, gx)), (*w, like(*w, gw)), (*b, like(*b, gb))]
            }
            Op::AvgPool(x) => {
                let s = val(*x).shape();
                vec![(*x, like(*x, kernels::avg_pool_backward(g.data(), s[0], s[1], s[2])))]
            }
            Op::MaxPool(x, arg) => {
                let mut gx = vec![T::zero(); val(*x).numel()];
                for (&idx, &gv) in arg.iter().zip(g.data()) {
                    gx[idx] += gv;
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).shape()[*axis];
                        let piece = g.slice_axis(*axis, start, len).expect("concat slice");
                        start += len;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (extent, len) = (xs[*axis], g.shape()[*axis]);
                let mut gx = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.data().to_vec()))],
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*x, g.permute(&inverse).expect("inverse permutation"))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = T::of(val(*x).numel() as f64);
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::L1(x) => {
                let gv = g.item();
                vec![(*x, val(*x).map(|v| gv * sign(v)))]
            }
            Op::CMag(x) => {
                let xv = val(*x).data();
                let last = *val(*x).shape().last().expect("rank ≥ 1");
                let c = last / 2;
                let mut gx = vec![T::zero(); xv.len()];
                for ((row, grow), mag) in xv
                    .chunks_exact(last)
                    .zip(gx.chunks_exact_mut(last))
                    .zip(node.value.data().chunks_exact(c).zip(g.data().chunks_exact(c)))
                {
                    let (mrow, gm) = mag;
                    for j in 0..c {
                        if mrow[j] > T::zero() {
                            grow[j] = gm[j] * row[j] / mrow[j];
                            grow[c + j] = gm[j] * row[c + j] / mrow[j];
                        }
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::MagSoftmax { re, im } => {
                let (gre, gim) = self.mag_softmax_backward(*re, *im, &node.value, g);
                vec![(*re, gre), (*im, gim)]
            }
            Op::ColSoftmax(x) => {
                let s = val(*x).shape();
                let (b, rows, cols) = as_batched(s).expect("checked at forward");
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for bi in 0..b {
                    for col in 0..cols {
                        let at = |row: usize| (bi * rows + row) * cols + col;
                        let inner: T = (0..rows).map(|r| y[at(r)] * g.data()[at(r)]).sum();
                        for r in 0..rows {
                            gx[at(r)] = y[at(r)] * (g.data()[at(r)] - inner);
                        }
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Linear { x, map } => vec![(*x, like(*x, map.adjoint(g.data())))],
        }
    }

    fn mag_softmax_backward(&self, re: Var, im: Var, out: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let s = self.shape(re).to_vec();
        let (b, rows, cols) = as_batched(&s).expect("checked at forward");
        let n = b * rows * cols;
        let (pr, pi) = (self.value(re).data(), self.value(im).data());
        let (wr, wi) = out.data().split_at(n);
        let (gr, gi) = g.data().split_at(n);
        let mut dre = vec![T::zero(); n];
        let mut dim = vec![T::zero(); n];
        let mut soft = vec![T::zero(); rows];
        let mut gsoft = vec![T::zero(); rows];
        for bi in 0..b {
            for col in 0..cols {
                let at = |row: usize| (bi * rows + row) * cols + col;
                // Recover softmax weights and unit phases from the output.
                for r in 0..rows {
                    let idx = at(r);
                    let m = pr[idx].hypot(pi[idx]);
                    let (ur, ui) = if m > T::zero() {
                        (pr[idx] / m, pi[idx] / m)
                    } else {
                        (T::one(), T::zero())
                    };
                    soft[r] = wr[idx].hypot(wi[idx]);
                    gsoft[r] = gr[idx] * ur + gi[idx] * ui;
                }
                let inner: T = soft.iter().zip(&gsoft).map(|(&s, &gs)| s * gs).sum();
                for r in 0..rows {
                    let idx = at(r);
                    let (x, y) = (pr[idx], pi[idx]);
                    let m = x.hypot(y);
                    if m == T::zero() {
                        continue;
                    }
                    let gm = soft[r] * (gsoft[r] - inner);
                    let m3 = m * m * m;
                    let cross = gr[idx] * y - gi[idx] * x;
                    dre[idx] = gm * x / m + soft[r] * y * cross / m3;
                    dim[idx] = gm * y / m - soft[r] * x * cross / m3;
                }
            }
        }
        (
            Tensor::from_parts(s.clone(), dre),
            Tensor::from_parts(s, dim),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_zeroes_negatives() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn elu_is_continuous_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.variable(Tensor::new(&[3], vec![-1e-12, 0.0, 1e-12]).unwrap());
        let y = t.elu(x);
        assert_eq!(t.value(y).data()[1], 0.0);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        for &d in g.wrt(x).unwrap().data() {
            assert!((d - 1.0).abs() < 1e-11);
        }
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::<f64>::new();
        let x = t.variable(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn binary_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let a = t.variable(Tensor::zeros(&[2]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let unused = store.add_zeros("q", &[3]).unwrap();
        let mut t = Tape::new();
        let p = t.param(&store, id);
        let p_again = t.param(&store, id);
        assert_eq!(p, p_again);
        let s1 = t.sum(p);
        let s2 = t.sum(p_again);
        let loss = t.add(s1, s2).unwrap();
        let g = t.param_grads(loss, &store).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.by_id(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn conv_rejects_fractional_output() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[5, 5, 1]));
        let w = t.constant(Tensor::zeros(&[2, 2, 1, 1]));
        let b = t.constant(Tensor::zeros(&[1]));
        assert!(t.conv2d(x, w, b, (2, 2), Pad2d::NONE).is_err());
        assert!(t.conv2d(x, w, b, (1, 1), Pad2d::NONE).is_ok());
    }

    #[test]
    fn tconv_doubles_extents() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::scalar(3.0).reshape(&[1, 1, 1]).unwrap());
        let w = t.constant(Tensor::ones(&[2, 2, 1, 1]));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.tconv2d(x, w, b, 2).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 1]);
        assert_eq!(t.value(y).data(), &[3.0; 4]);
        let w1 = t.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(t.tconv2d(x, w1, b, 2).is_err());
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[3, 4, 1]));
        assert!(t.pool2d(x, PoolKind::Avg).is_err());
        let y = t.constant(Tensor::new(&[2, 2, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let p = t.pool2d(y, PoolKind::Avg).unwrap();
        assert_eq!(t.value(p).data(), &[4.0]);
    }

    #[test]
    fn l1_of_vector() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let l = t.l1(x);
        assert_eq!(t.value(l).item(), 6.0);
        let z = t.constant(Tensor::zeros(&[4]));
        let m = t.mean(z);
        assert_eq!(t.value(m).item(), 0.0);
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut t = Tape::<f64>::new();
        let a = t.variable(Tensor::ones(&[2]));
        let b = t.exp(a);
        let c = t.mul(a, b).unwrap();
        let _ = t.sum(c);
        for i in 0..t.len() {
            for input in t.inputs_of(Var(i)) {
                assert!(input.index() < i);
            }
        }
    }
}
