//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! replays the record in reverse and returns the adjoint of every node that
//! depends on a gradient-requiring leaf. Tapes are cheap and single-use: build
//! one per window and drop it after the gradients are read out.

use std::sync::Arc;

use super::kernels::{self, Conv1dDims, Conv2dDims, SamplePlan};
use super::param::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Ln(Var),
    Exp(Var),
    Clamp(Var, S, S),
    SmoothL1(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, usize),
    Conv1d { x: Var, w: Var, b: Var, dims: Conv1dDims },
    Conv2d { x: Var, w: Var, b: Var, dims: Conv2dDims },
    MaxPool1d(Var, Vec<usize>),
    Upsample1d(Var),
    Reverse(Var),
    Concat(Vec<Var>),
    Select(Var, usize),
    Gather(Var, Vec<usize>),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Sample { x: Var, plan: Arc<SamplePlan<S>> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(ParamId, Var)>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Places a stored parameter on the tape as a gradient-requiring leaf.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.tensor(id).clone(), true);
        self.params.push((id, v));
        v
    }

    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("operand shapes already checked")
    }

    fn unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, scale: S) -> Var {
        self.affine(a, scale, S::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= S::zero() {
                S::one() / (S::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::one() + e)
            }
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// Elementwise smooth-L1 with transition point 1.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let half = S::of(0.5);
        self.unary(a, Op::SmoothL1(a), |x| {
            let ax = x.abs();
            if ax < S::one() {
                half * x * x
            } else {
                ax - half
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum::<S>() / S::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().map(|&x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-D, got {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let mut out = vec![S::zero(); r * c];
        kernels::transpose(r, c, self.value(a).data(), &mut out);
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let mut out = vec![S::zero(); self.value(a).len()];
        kernels::softmax(&shape, axis, self.value(a).data(), &mut out);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    /// `x: [Cin, T]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 3 || sb.len() != 1 {
            return Err(shape_err(
                "conv1d",
                format!("expected x [Cin,T], w [Cout,Cin,K], b [Cout]; got {sx:?}, {sw:?}, {sb:?}"),
            ));
        }
        if sw[1] != sx[0] || sb[0] != sw[0] {
            return Err(shape_err(
                "conv1d",
                format!("input has {} channels, weight {sw:?}, bias {sb:?}", sx[0]),
            ));
        }
        if stride == 0 || sx[1] + 2 * pad < sw[2] {
            return Err(shape_err(
                "conv1d",
                format!("kernel {} too long for length {} with pad {pad} (stride {stride})", sw[2], sx[1]),
            ));
        }
        let dims = Conv1dDims { c_in: sx[0], c_out: sw[0], len_in: sx[1], kernel: sw[2], stride, pad };
        let mut out = vec![S::zero(); dims.c_out * dims.len_out()];
        kernels::conv1d_forward(&dims, self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![dims.c_out, dims.len_out()], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, dims }, &[x, w, b]))
    }

    /// `x: [Cin, H, W]`, `w: [Cout, Cin, K, K]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 || sw[2] != sw[3] {
            return Err(shape_err(
                "conv2d",
                format!("expected x [Cin,H,W], w [Cout,Cin,K,K], b [Cout]; got {sx:?}, {sw:?}, {sb:?}"),
            ));
        }
        if sw[1] != sx[0] || sb[0] != sw[0] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, weight {sw:?}, bias {sb:?}", sx[0]),
            ));
        }
        if stride == 0 || sx[1] + 2 * pad < sw[2] || sx[2] + 2 * pad < sw[2] {
            return Err(shape_err("conv2d", format!("kernel {} too large for {sx:?} with pad {pad}", sw[2])));
        }
        let dims = Conv2dDims { c_in: sx[0], c_out: sw[0], h: sx[1], w: sx[2], kernel: sw[2], stride, pad };
        let mut out = vec![S::zero(); dims.c_out * dims.h_out() * dims.w_out()];
        kernels::conv2d_forward(&dims, self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![dims.c_out, dims.h_out(), dims.w_out()], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }, &[x, w, b]))
    }

    fn rows_len(&self, a: Var) -> (usize, usize) {
        let s = self.shape(a);
        let len = *s.last().expect("tensors have at least one dimension");
        (self.value(a).len() / len, len)
    }

    /// Window 2, stride 2 along the last axis; odd length pads right with −∞.
    pub fn maxpool1d(&mut self, a: Var) -> Var {
        let (rows, len) = self.rows_len(a);
        let out_len = len.div_ceil(2);
        let mut out = vec![S::zero(); rows * out_len];
        let arg = kernels::maxpool1d(rows, len, self.value(a).data(), &mut out);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(shape, out).expect("pool output shape");
        self.push(value, Op::MaxPool1d(a, arg), &[a])
    }

    /// Doubles the last axis by half-pixel linear interpolation.
    pub fn upsample_linear1d(&mut self, a: Var) -> Var {
        let (rows, len) = self.rows_len(a);
        let mut out = vec![S::zero(); rows * len * 2];
        kernels::upsample_linear1d(rows, len, self.value(a).data(), &mut out);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = 2 * len;
        let value = Tensor::new(shape, out).expect("upsample output shape");
        self.push(value, Op::Upsample1d(a), &[a])
    }

    /// Reverses the last (time) axis.
    pub fn reverse_time(&mut self, a: Var) -> Var {
        let (rows, len) = self.rows_len(a);
        let mut out = vec![S::zero(); rows * len];
        kernels::reverse_last(rows, len, self.value(a).data(), &mut out);
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Reverse(a), &[a])
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Index `i` along axis 0, dropping that axis.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || i >= s[0] {
            return Err(shape_err("select", format!("index {i} into {s:?}")));
        }
        let per = self.value(a).len() / s[0];
        let data = self.value(a).data()[i * per..(i + 1) * per].to_vec();
        let value = Tensor::new(s[1..].to_vec(), data)?;
        Ok(self.push(value, Op::Select(a, i), &[a]))
    }

    /// Flat-index gather; repeated indices are allowed.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let n = self.value(a).len();
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("index {bad} out of range for {n} values")));
        }
        let src = self.value(a).data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        Ok(self.push(value, Op::Gather(a, indices), &[a]))
    }

    /// Per-channel (axis 0) scale and shift.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err(
                "channel_affine",
                format!("{c} channels but scale {:?}, shift {:?}", self.shape(scale), self.shape(shift)),
            ));
        }
        let mut out = vec![S::zero(); self.value(x).len()];
        kernels::channel_affine(c, self.value(x).data(), self.value(scale).data(), self.value(shift).data(), &mut out);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift]))
    }

    /// Interpolated sampling along time: `[C, T]` to `[positions, C, samples]`.
    pub fn sample_time(&mut self, x: Var, plan: Arc<SamplePlan<S>>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] != plan.len_in {
            return Err(shape_err("sample_time", format!("plan expects length {}, input {s:?}", plan.len_in)));
        }
        let c = s[0];
        let mut out = vec![S::zero(); plan.positions * c * plan.samples];
        plan.apply(c, self.value(x).data(), &mut out);
        let value = Tensor::new(vec![plan.positions, c, plan.samples], out)?;
        Ok(self.push(value, Op::Sample { x, plan }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let y = node.value.data();
        // Adds into a parent's adjoint slot; the node's own adjoint `g` lives
        // outside `grads` while this runs.
        macro_rules! acc {
            ($v:expr, |$gx:ident| $body:block) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.len();
                    let mut slot = grads[v.0].take().unwrap_or_else(|| vec![S::zero(); n]);
                    {
                        let $gx: &mut [S] = &mut slot;
                        $body
                    }
                    grads[v.0] = Some(slot);
                }
            }};
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d); });
                acc!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d); });
            }
            Op::Sub(a, b) => {
                acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d); });
                acc!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d); });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                acc!(*b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::Affine(a, s) => acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &d)| *x += *s * d); }),
            Op::Relu(a) => acc!(*a, |ga| {
                for k in 0..g.len() {
                    if y[k] > S::zero() {
                        ga[k] += g[k];
                    }
                }
            }),
            Op::Sigmoid(a) => acc!(*a, |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k] * (S::one() - y[k]);
                }
            }),
            Op::Sqrt(a) => acc!(*a, |ga| {
                let half = S::of(0.5);
                for k in 0..g.len() {
                    ga[k] += g[k] * half / y[k];
                }
            }),
            Op::Ln(a) => {
                let va = val(*a);
                acc!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / va[k];
                    }
                });
            }
            Op::Exp(a) => acc!(*a, |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k];
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc!(*a, |ga| {
                    for k in 0..g.len() {
                        if va[k] >= *lo && va[k] <= *hi {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::SmoothL1(a) => {
                let va = val(*a);
                acc!(*a, |ga| {
                    for k in 0..g.len() {
                        let x = va[k];
                        let d = if x.abs() < S::one() { x } else { x.signum() };
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::Sum(a) => acc!(*a, |ga| { ga.iter_mut().for_each(|x| *x += g[0]); }),
            Op::Mean(a) => acc!(*a, |ga| {
                let d = g[0] / S::of(ga.len() as f64);
                ga.iter_mut().for_each(|x| *x += d);
            }),
            Op::SumSquares(a) => {
                let va = val(*a);
                acc!(*a, |ga| {
                    let two = S::of(2.0);
                    for k in 0..ga.len() {
                        ga[k] += two * g[0] * va[k];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |ga| { kernels::matmul_backward(m, k, n, va, vb, g, Some(ga), None); });
                acc!(*b, |gb| { kernels::matmul_backward(m, k, n, va, vb, g, None, Some(gb)); });
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc!(*a, |ga| { kernels::transpose_acc(c, r, g, ga); });
            }
            Op::Reshape(a) => acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d); }),
            Op::Softmax(a, axis) => {
                let shape = node.value.shape();
                acc!(*a, |ga| { kernels::softmax_backward(shape, *axis, y, g, ga); });
            }
            Op::Conv1d { x, w, b, dims } => {
                let (vx, vw) = (val(*x), val(*w));
                acc!(*x, |gx| { kernels::conv1d_backward(dims, vx, vw, g, Some(gx), None, None); });
                acc!(*w, |gw| { kernels::conv1d_backward(dims, vx, vw, g, None, Some(gw), None); });
                acc!(*b, |gb| { kernels::conv1d_backward(dims, vx, vw, g, None, None, Some(gb)); });
            }
            Op::Conv2d { x, w, b, dims } => {
                let (vx, vw) = (val(*x), val(*w));
                acc!(*x, |gx| { kernels::conv2d_backward(dims, vx, vw, g, Some(gx), None, None); });
                acc!(*w, |gw| { kernels::conv2d_backward(dims, vx, vw, g, None, Some(gw), None); });
                acc!(*b, |gb| { kernels::conv2d_backward(dims, vx, vw, g, None, None, Some(gb)); });
            }
            Op::MaxPool1d(a, arg) => acc!(*a, |ga| {
                for (k, &src) in arg.iter().enumerate() {
                    ga[src] += g[k];
                }
            }),
            Op::Upsample1d(a) => {
                let s = self.nodes[a.0].value.shape();
                let len = *s.last().unwrap();
                let rows = self.nodes[a.0].value.len() / len;
                acc!(*a, |ga| { kernels::upsample_linear1d_backward(rows, len, g, ga); });
            }
            Op::Reverse(a) => {
                let len = *node.value.shape().last().unwrap();
                let rows = node.value.len() / len;
                acc!(*a, |ga| {
                    for r in 0..rows {
                        for t in 0..len {
                            ga[r * len + len - 1 - t] += g[r * len + t];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc!(p, |gp| { gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, &d)| *x += d); });
                    off += n;
                }
            }
            Op::Select(a, i) => {
                let per = g.len();
                acc!(*a, |ga| {
                    ga[i * per..(i + 1) * per].iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                });
            }
            Op::Gather(a, idx) => acc!(*a, |ga| {
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }),
            Op::ChannelAffine { x, scale, shift } => {
                let vx = val(*x);
                let vs = val(*scale);
                let c = vs.len();
                let per = vx.len() / c;
                acc!(*x, |gx| {
                    for ch in 0..c {
                        for k in ch * per..(ch + 1) * per {
                            gx[k] += g[k] * vs[ch];
                        }
                    }
                });
                acc!(*scale, |gs| {
                    for ch in 0..c {
                        gs[ch] += (ch * per..(ch + 1) * per).map(|k| g[k] * vx[k]).sum::<S>();
                    }
                });
                acc!(*shift, |gh| {
                    for ch in 0..c {
                        gh[ch] += g[ch * per..(ch + 1) * per].iter().copied().sum::<S>();
                    }
                });
            }
            Op::Sample { x, plan } => {
                let c = self.nodes[x.0].value.shape()[0];
                acc!(*x, |gx| { plan.apply_adjoint(c, g, gx); });
            }
        }
    }
}
