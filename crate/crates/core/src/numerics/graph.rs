//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Parameters are
//! loaded from a [`ParamStore`] as gradient-requiring leaves; after
//! [`Graph::backward`] their gradients are copied back with
//! [`Graph::export_grads`]. Graphs built with [`Graph::inference`] record the
//! same values but keep no backward buffers and refuse `backward`.

use std::cell::Cell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Silu,
    /// `max(x, 0)^2`
    ReluSquared,
    Exp,
    /// `exp(-exp(x))`, the per-channel decay map.
    NegExpExp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Element-wise operator selector covering both arities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

/// How one operand of a broadcast binary op maps onto the output.
#[derive(Debug)]
enum Bcast {
    Same,
    /// Operand index is `out_index % n` (row vectors, trailing-suffix shapes, scalars).
    Mod(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Mod(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

enum Op<T> {
    Leaf,
    Unary {
        op: UnaryOp,
        x: Var,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        ba: Bcast,
        bb: Bcast,
    },
    Scale {
        x: Var,
        factor: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ShiftRows {
        x: Var,
    },
    Wkv {
        r: Var,
        k: Var,
        v: Var,
        w: Var,
        u: Var,
        heads: usize,
        /// State before each step, `N * D * d_head` values.
        states: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    ColMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ColMean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: usize,
    },
    AbsError {
        pred: Var,
        target: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Thread-local count of live graph activation elements (node values plus
/// saved backward buffers) and its high-water mark.
pub mod activation_meter {
    use super::{LIVE, PEAK};

    pub fn live() -> usize {
        LIVE.with(|c| c.get())
    }

    pub fn peak() -> usize {
        PEAK.with(|c| c.get())
    }

    /// Resets the high-water mark to the current live count.
    pub fn reset_peak() {
        let now = live();
        PEAK.with(|c| c.set(now));
    }

    pub(super) fn add(n: usize) {
        LIVE.with(|c| {
            let v = c.get() + n;
            c.set(v);
            PEAK.with(|p| p.set(p.get().max(v)));
        });
    }

    pub(super) fn sub(n: usize) {
        LIVE.with(|c| c.set(c.get().saturating_sub(n)));
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    record: bool,
    footprint: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Drop for Graph<T> {
    fn drop(&mut self) {
        activation_meter::sub(self.footprint);
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl UnaryOp {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::ReluSquared => {
                let r = x.max(T::zero());
                r * r
            }
            UnaryOp::Exp => x.exp(),
            UnaryOp::NegExpExp => (-x.exp()).exp(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            UnaryOp::Sigmoid => y * (one - y),
            UnaryOp::Tanh => one - y * y,
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            UnaryOp::ReluSquared => (one + one) * x.max(T::zero()),
            UnaryOp::Exp => y,
            UnaryOp::NegExpExp => -y * x.exp(),
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn bcast_for(shape: &[usize], out: &[usize]) -> Bcast {
    if shape == out {
        return Bcast::Same;
    }
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return Bcast::Mod(trimmed.iter().product::<usize>().max(1));
    }
    // General case: strides of the operand aligned to the output rank.
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Bcast::Map(map)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

impl<T: Scalar> Graph<T> {
    /// A graph that records for backward.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
            footprint: 0,
        }
    }

    /// A graph for forward-only evaluation; `backward` is rejected.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.record = false;
        g
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Elements held by this graph (values and saved buffers).
    pub fn footprint(&self) -> usize {
        self.footprint
    }

    fn charge(&mut self, n: usize) {
        self.footprint += n;
        activation_meter::add(n);
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = self.record && inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.set_requires_grad(needs);
        let mut extra = 0;
        match &op {
            Op::Norm { xhat, rstd, .. } => extra = xhat.len() + rstd.len(),
            Op::Wkv { states, .. } => extra = states.len(),
            Op::CrossEntropy { probs, .. } => extra = probs.len(),
            _ => {}
        }
        self.charge(value.numel() + extra);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; `requires_grad` is ignored for inference graphs.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad && self.record);
        value.clear_grad();
        self.charge(value.numel());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Loads a named parameter as a gradient-requiring leaf (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(t.clone(), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Constant copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = Tensor::new(self.shape(v), self.value(v).data().to_vec())
            .expect("shape taken from existing tensor");
        self.constant(t)
    }

    // ---------------------------------------------------------------------
    // Element-wise
    // ---------------------------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, x: Var, y: Option<Var>) -> Result<Var> {
        match (op, y) {
            (Elementwise::Unary(u), None) => Ok(self.unary(u, x)),
            (Elementwise::Binary(b), Some(y)) => self.binary(b, x, y),
            (Elementwise::Unary(_), Some(_)) => Err(Error::contract("unary op given two operands")),
            (Elementwise::Binary(_), None) => Err(Error::contract("binary op given one operand")),
        }
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&a| op.apply(a)).collect())
            .expect("same shape");
        self.push(out, Op::Unary { op, x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn relu_squared(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::ReluSquared, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn neg_exp_exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::NegExpExp, x)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::dim(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let ba = bcast_for(sa, &out_shape);
        let bb = bcast_for(sb, &out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let data: Vec<T> = match op {
            BinaryOp::Add => (0..numel)
                .map(|i| av[ba.index(i)] + bv[bb.index(i)])
                .collect(),
            BinaryOp::Sub => (0..numel)
                .map(|i| av[ba.index(i)] - bv[bb.index(i)])
                .collect(),
            BinaryOp::Mul => (0..numel)
                .map(|i| av[ba.index(i)] * bv[bb.index(i)])
                .collect(),
        };
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Binary { op, a, b, ba, bb }, &[a, b]))
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

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&a| a * factor).collect())
            .expect("same shape");
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// `a + f * (b - a)` with `f` broadcast against the operands.
    pub fn lerp(&mut self, a: Var, b: Var, f: Var) -> Result<Var> {
        let diff = self.sub(b, a)?;
        let step = self.mul(diff, f)?;
        self.add(a, step)
    }

    // ---------------------------------------------------------------------
    // Linear algebra and normalisation
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Normalises each row within `groups` equal column groups, then applies
    /// the per-column affine `gamma`, `beta`. `groups == 1` is a layer norm.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if groups == 0 || cols % groups != 0 {
            return Err(Error::dim(format!("{cols} columns into {groups} groups")));
        }
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::dim("norm affine parameters must match column count"));
        }
        let size = cols / groups;
        let inv = T::one() / T::from_usize(size).unwrap();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows * groups];
        let data = xv.data();
        for r in 0..rows {
            for g in 0..groups {
                let base = r * cols + g * size;
                let seg = &data[base..base + size];
                let mean = seg.iter().copied().sum::<T>() * inv;
                let var = seg.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r * groups + g] = rs;
                for (o, &a) in xhat[base..base + size].iter_mut().zip(seg) {
                    *o = (a - mean) * rs;
                }
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % cols] + bv[i % cols])
            .collect();
        let out = Tensor::new(xv.shape(), out)?;
        let (xhat, rstd) = if self.record { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.group_norm(x, gamma, beta, 1, eps)
    }

    // ---------------------------------------------------------------------
    // Sequence ops
    // ---------------------------------------------------------------------

    /// Token shift: row `t` of the result is row `t - 1` of `x`; row 0 is the
    /// constant `first` (the carried previous token).
    pub fn shift_rows(&mut self, x: Var, first: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if xv.rank() != 2 || first.len() != cols {
            return Err(Error::dim(format!(
                "shift of {:?} with carried row of {}",
                xv.shape(),
                first.len()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        data.extend_from_slice(first);
        if rows > 1 {
            data.extend_from_slice(&xv.data()[..(rows - 1) * cols]);
        }
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(out, Op::ShiftRows { x }, &[x]))
    }

    /// Multi-head decayed linear attention scan.
    ///
    /// Per head with state `S` (`d x d`, key index first):
    /// `y_t = r_t (S + diag(u) k_tᵀ v_t)`, then `S <- diag(w_t) S + k_tᵀ v_t`.
    /// `r, k, v, w` are `[N, D]`, `u` is `[D]`, `init` holds `D * d` values
    /// laid out head by head. Returns the output and the final state.
    #[allow(clippy::too_many_arguments)]
    pub fn wkv(
        &mut self,
        r: Var,
        k: Var,
        v: Var,
        w: Var,
        u: Var,
        heads: usize,
        init: &[T],
    ) -> Result<(Var, Vec<T>)> {
        let shape = self.shape(r).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("wkv expects [N, D], got {shape:?}")));
        }
        let (n, dim) = (shape[0], shape[1]);
        for x in [k, v, w] {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim("wkv operands must share shape"));
            }
        }
        if heads == 0 || dim % heads != 0 || self.value(u).numel() != dim {
            return Err(Error::dim(format!("wkv with D={dim}, H={heads}")));
        }
        let dh = dim / heads;
        if init.len() != dim * dh {
            return Err(Error::dim(format!(
                "wkv state of {} values, expected {}",
                init.len(),
                dim * dh
            )));
        }
        let (rv, kv, vv, wv, uv) = (
            self.value(r).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(w).data(),
            self.value(u).data(),
        );
        let mut state = init.to_vec();
        let mut saved = if self.record {
            Vec::with_capacity(n * state.len())
        } else {
            Vec::new()
        };
        let mut y = vec![T::zero(); n * dim];
        for t in 0..n {
            if self.record {
                saved.extend_from_slice(&state);
            }
            let row = t * dim;
            for h in 0..heads {
                let o = h * dh;
                let s = &mut state[o * dh..(o + dh) * dh];
                let yt = &mut y[row + o..row + o + dh];
                let vt = &vv[row + o..row + o + dh];
                for i in 0..dh {
                    let ri = rv[row + o + i];
                    let ki = kv[row + o + i];
                    let wi = wv[row + o + i];
                    let uki = uv[o + i] * ki;
                    let si = &mut s[i * dh..(i + 1) * dh];
                    for j in 0..dh {
                        let vj = vt[j];
                        yt[j] = yt[j] + ri * (si[j] + uki * vj);
                        si[j] = wi * si[j] + ki * vj;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, dim], y)?;
        let var = self.push(
            out,
            Op::Wkv {
                r,
                k,
                v,
                w,
                u,
                heads,
                states: saved,
            },
            &[r, k, v, w, u],
        );
        Ok((var, state))
    }

    // ---------------------------------------------------------------------
    // Structural ops
    // ---------------------------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if xv.rank() != 2 || start + len > cols {
            return Err(Error::dim(format!(
                "column slice {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if xv.rank() != 2 || start + len > rows {
            return Err(Error::dim(format!(
                "row slice {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(&[len, cols], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(Error::dim(format!(
                "concat {:?} with {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::new(&[av.rows() + bv.rows(), av.cols()], data)?;
        Ok(self.push(out, Op::ConcatRows { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let mut out = out;
        out.clear_grad();
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Column-wise maximum over the rows of `[R, C]`, giving `[C]`.
    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if rows == 0 {
            return Err(Error::EmptySlide("max over zero rows".into()));
        }
        let mut best = xv.row(0).to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..rows {
            for (c, &a) in xv.row(r).iter().enumerate() {
                if a > best[c] {
                    best[c] = a;
                    argmax[c] = r;
                }
            }
        }
        let out = Tensor::new(&[cols], best)?;
        Ok(self.push(out, Op::ColMax { x, argmax }, &[x]))
    }

    /// Column-wise mean over the rows of `[R, C]`, giving `[C]`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if rows == 0 {
            return Err(Error::EmptySlide("mean over zero rows".into()));
        }
        let mut acc = vec![T::zero(); cols];
        for r in 0..rows {
            add_into(&mut acc, xv.row(r));
        }
        let inv = T::one() / T::from_usize(rows).unwrap();
        acc.iter_mut().for_each(|a| *a = *a * inv);
        let out = Tensor::new(&[cols], acc)?;
        Ok(self.push(out, Op::ColMean { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits).data();
        if target >= lv.len() {
            return Err(Error::contract(format!(
                "class {target} out of range for {} logits",
                lv.len()
            )));
        }
        let m = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = lv.iter().map(|&a| (a - m).exp()).collect();
        let z = exps.iter().copied().sum::<T>();
        let loss = z.ln() + m - lv[target];
        let probs = exps.into_iter().map(|e| e / z).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                target,
            },
            &[logits],
        ))
    }

    /// `|pred - target|` for a single-element prediction.
    pub fn abs_error(&mut self, pred: Var, target: T) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != 1 {
            return Err(Error::dim(format!(
                "absolute error expects one prediction, got {:?}",
                pv.shape()
            )));
        }
        let loss = (pv.data()[0] - target).abs();
        Ok(self.push(Tensor::scalar(loss), Op::AbsError { pred, target }, &[pred]))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every gradient-requiring leaf. Leaf
    /// gradients accumulate across calls; intermediate ones do not persist.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(Error::contract("backward on an inference graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g)?;
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Unary { op, x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let dx = self.slot(grads, *x);
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * op.derivative(xv[i], yv[i]);
                    }
                }
            }
            Op::Binary { op, a, b, ba, bb } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = self.slot(grads, *a);
                    for i in 0..g.len() {
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => g[i],
                            BinaryOp::Mul => g[i] * bv[bb.index(i)],
                        };
                        let j = ba.index(i);
                        da[j] = da[j] + d;
                    }
                }
                if self.needs(*b) {
                    let db = self.slot(grads, *b);
                    for i in 0..g.len() {
                        let d = match op {
                            BinaryOp::Add => g[i],
                            BinaryOp::Sub => -g[i],
                            BinaryOp::Mul => g[i] * av[ba.index(i)],
                        };
                        let j = bb.index(i);
                        db[j] = db[j] + d;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * *factor;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if self.needs(*a) {
                    let da = self.slot(grads, *a);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n as isize, 1),
                        bt.data(),
                        (1, n as isize),
                        T::one(),
                        da,
                        (k as isize, 1),
                    );
                }
                if self.needs(*b) {
                    let db = self.slot(grads, *b);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        at.data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        db,
                        (n as isize, 1),
                    );
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let size = cols / groups;
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let dg = self.slot(grads, *gamma);
                    for i in 0..g.len() {
                        dg[i % cols] = dg[i % cols] + g[i] * xhat[i];
                    }
                }
                if self.needs(*beta) {
                    let db = self.slot(grads, *beta);
                    for i in 0..g.len() {
                        db[i % cols] = db[i % cols] + g[i];
                    }
                }
                if self.needs(*x) {
                    let inv = T::one() / T::from_usize(size).unwrap();
                    let dx = self.slot(grads, *x);
                    let mut dxhat = vec![T::zero(); size];
                    for r in 0..rows {
                        for gi in 0..*groups {
                            let base = r * cols + gi * size;
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for c in 0..size {
                                let d = g[base + c] * gv[gi * size + c];
                                dxhat[c] = d;
                                mean_d = mean_d + d;
                                mean_dx = mean_dx + d * xhat[base + c];
                            }
                            mean_d = mean_d * inv;
                            mean_dx = mean_dx * inv;
                            let rs = rstd[r * groups + gi];
                            for c in 0..size {
                                let v = rs * (dxhat[c] - mean_d - xhat[base + c] * mean_dx);
                                dx[base + c] = dx[base + c] + v;
                            }
                        }
                    }
                }
            }
            Op::ShiftRows { x } => {
                if self.needs(*x) {
                    let cols = node.value.cols();
                    let dx = self.slot(grads, *x);
                    let n = g.len();
                    if n > cols {
                        add_into(&mut dx[..n - cols], &g[cols..]);
                    }
                }
            }
            Op::Wkv {
                r,
                k,
                v,
                w,
                u,
                heads,
                states,
            } => self.backprop_wkv(g, grads, [*r, *k, *v, *w, *u], *heads, states),
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let len = node.value.cols();
                    let cols = self.value(*x).cols();
                    let dx = self.slot(grads, *x);
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut dx[r * cols + start..r * cols + start + len], gr);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let cols = node.value.cols();
                    let dx = self.slot(grads, *x);
                    add_into(&mut dx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.value(*a).numel();
                if self.needs(*a) {
                    add_into(self.slot(grads, *a), &g[..na]);
                }
                if self.needs(*b) {
                    add_into(self.slot(grads, *b), &g[na..]);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    add_into(self.slot(grads, *x), g);
                }
            }
            Op::ColMax { x, argmax } => {
                if self.needs(*x) {
                    let cols = argmax.len();
                    let dx = self.slot(grads, *x);
                    for (c, &r) in argmax.iter().enumerate() {
                        dx[r * cols + c] = dx[r * cols + c] + g[c];
                    }
                }
            }
            Op::ColMean { x } => {
                if self.needs(*x) {
                    let rows = self.value(*x).rows();
                    let inv = T::one() / T::from_usize(rows).unwrap();
                    let scaled: Vec<T> = g.iter().map(|&a| a * inv).collect();
                    let dx = self.slot(grads, *x);
                    for row in dx.chunks_mut(scaled.len()) {
                        add_into(row, &scaled);
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
            } => {
                if self.needs(*logits) {
                    let dl = self.slot(grads, *logits);
                    for (i, &p) in probs.iter().enumerate() {
                        let y = if i == *target { T::one() } else { T::zero() };
                        dl[i] = dl[i] + g[0] * (p - y);
                    }
                }
            }
            Op::AbsError { pred, target } => {
                if self.needs(*pred) {
                    let p = self.value(*pred).data()[0];
                    let diff = p - *target;
                    let s = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    let dp = self.slot(grads, *pred);
                    dp[0] = dp[0] + g[0] * s;
                }
            }
        }
    }

    fn backprop_wkv(
        &self,
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
        vars: [Var; 5],
        heads: usize,
        states: &[T],
    ) {
        let [r, k, v, w, u] = vars;
        let shape = self.shape(r);
        let (n, dim) = (shape[0], shape[1]);
        let dh = dim / heads;
        let (rv, kv, vv, wv, uv) = (
            self.value(r).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(w).data(),
            self.value(u).data(),
        );
        let mut dr = vec![T::zero(); n * dim];
        let mut dk = vec![T::zero(); n * dim];
        let mut dv = vec![T::zero(); n * dim];
        let mut dw = vec![T::zero(); n * dim];
        let mut du = vec![T::zero(); dim];
        // Gradient w.r.t. the state after step t; the final state is not part of the loss.
        let mut gs = vec![T::zero(); dim * dh];
        let slen = dim * dh;
        for t in (0..n).rev() {
            let prev = &states[t * slen..(t + 1) * slen];
            let row = t * dim;
            for h in 0..heads {
                let o = h * dh;
                for i in 0..dh {
                    let (ri, ki, wi, ui) = (
                        rv[row + o + i],
                        kv[row + o + i],
                        wv[row + o + i],
                        uv[o + i],
                    );
                    let sbase = (o + i) * dh;
                    let mut dri = T::zero();
                    let mut dki = T::zero();
                    let mut dwi = T::zero();
                    let mut dui = T::zero();
                    for j in 0..dh {
                        let vj = vv[row + o + j];
                        let gy = dy[row + o + j];
                        let sp = prev[sbase + j];
                        let gst = gs[sbase + j];
                        dri = dri + gy * (sp + ui * ki * vj);
                        let common = ri * gy;
                        dui = dui + common * ki * vj;
                        dki = dki + common * ui * vj + gst * vj;
                        dv[row + o + j] = dv[row + o + j] + common * ui * ki + gst * ki;
                        dwi = dwi + gst * sp;
                        gs[sbase + j] = wi * gst + common;
                    }
                    dr[row + o + i] = dr[row + o + i] + dri;
                    dk[row + o + i] = dk[row + o + i] + dki;
                    dw[row + o + i] = dw[row + o + i] + dwi;
                    du[o + i] = du[o + i] + dui;
                }
            }
        }
        for (var, d) in [(r, dr), (k, dk), (v, dv), (w, dw), (u, du)] {
            if self.needs(var) {
                add_into(self.slot(grads, var), &d);
            }
        }
    }

    /// Adds the gradients of every loaded parameter into the store.
    pub fn export_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Names of parameters loaded into this graph.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Central differences on a single leaf, for local op checks.
    fn numeric_grad(
        x0: &Tensor<f64>,
        f: impl Fn(&mut Graph<f64>, Var) -> Var,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let y = f(&mut g, x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();
        let h = 1e-6;
        let numeric = (0..x0.numel())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut xp = x0.clone();
                    xp.data_mut()[i] += delta;
                    let mut g = Graph::inference();
                    let x = g.constant(xp);
                    let y = f(&mut g, x);
                    g.value(y).data().iter().sum::<f64>()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect();
        (analytic, numeric)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "{a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn unary_values() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t(&[2], &[-2.0, 3.0]));
        let y = g.relu_squared(x);
        assert_eq!(g.value(y).data(), &[0.0, 9.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        let e = g.neg_exp_exp(z);
        assert!((g.value(e).data()[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn unary_derivatives_match_differences() {
        let x0 = t(&[6], &[-1.3, -0.2, 0.0, 0.4, 0.9, 1.7]);
        for op in [
            UnaryOp::Sigmoid,
            UnaryOp::Tanh,
            UnaryOp::Silu,
            UnaryOp::ReluSquared,
            UnaryOp::Exp,
            UnaryOp::NegExpExp,
        ] {
            let (a, n) = numeric_grad(&x0, |g, x| g.unary(op, x));
            assert_close(&a, &n, 1e-6);
        }
    }

    #[test]
    fn broadcast_row_and_general() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = g.leaf(t(&[3], &[10.0, 20.0, 30.0]), true);
        let c = g.leaf(t(&[2, 1], &[2.0, 3.0]), true);
        let ab = g.add(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let abc = g.mul(ab, c).unwrap();
        assert_eq!(g.value(abc).data()[3], 42.0);
        let loss = g.sum(abc);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[5.0, 5.0, 5.0]);
        assert_eq!(g.grad(c).unwrap(), &[66.0, 75.0]);
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn non_broadcastable_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_map_gradient_replicates_input() {
        // loss = sum(W x): every row of dW equals x.
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64), true);
        let x = g.constant(t(&[2, 1], &[0.5, -1.5]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.scale(x, 3.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn detached_subgraph_has_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let d = g.detach(x);
        let y = g.mul(d, d).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(t(&[1], &[1.0]), true);
        let loss = g.sum(x);
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn group_norm_gradient() {
        let x0 = Tensor::from_fn(&[3, 4], |i| ((i * 7 % 5) as f64) * 0.3 - 0.4 + (i as f64) * 0.01);
        let (a, n) = numeric_grad(&x0, |g, x| {
            let gamma = g.constant(t(&[4], &[1.0, 2.0, -0.5, 0.3]));
            let beta = g.constant(t(&[4], &[0.1, 0.0, 0.2, 0.0]));
            let y = g.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
            let w = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
            g.mul(y, w).unwrap()
        });
        assert_close(&a, &n, 1e-5);
    }

    #[test]
    fn structural_ops_gradients() {
        let x0 = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.7).cos());
        let (a, n) = numeric_grad(&x0, |g, x| {
            let s = g.shift_rows(x, &[0.1, 0.2, 0.3]).unwrap();
            let c = g.slice_cols(s, 1, 2).unwrap();
            let r = g.slice_rows(x, 1, 2).unwrap();
            let r = g.slice_cols(r, 0, 2).unwrap();
            let cat = g.concat_rows(c, r).unwrap();
            let m = g.col_max(cat).unwrap();
            let mean = g.col_mean(cat).unwrap();
            let prod = g.mul(m, mean).unwrap();
            g.reshape(prod, &[1, 2]).unwrap()
        });
        assert_close(&a, &n, 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros(&[4]), true);
        let ce = g.cross_entropy(l, 2).unwrap();
        assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);
        g.backward(ce).unwrap();
        assert_close(g.grad(l).unwrap(), &[0.25, 0.25, -0.75, 0.25], 1e-12);
        assert!(g.cross_entropy(l, 4).is_err());
    }

    #[test]
    fn wkv_scalar_head_hand_computation() {
        // d_head = 1: y1 = r (S0 + u k v) = 2 (0 + 0.5 * 15) = 15; S1 = 15.
        let mut g = Graph::<f64>::new();
        let r = g.constant(t(&[2, 1], &[2.0, 1.0]));
        let k = g.constant(t(&[2, 1], &[3.0, 0.0]));
        let v = g.constant(t(&[2, 1], &[5.0, 0.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let u = g.constant(t(&[1], &[0.5]));
        let (y, s) = g.wkv(r, k, v, w, u, 1, &[0.0]).unwrap();
        assert_eq!(g.value(y).data(), &[15.0, 15.0]);
        assert_eq!(s, vec![15.0]);
    }

    #[test]
    fn wkv_gradients_match_differences() {
        let n = 4;
        let dim = 4;
        let heads = 2;
        let init: Vec<f64> = (0..dim * 2).map(|i| (i as f64 * 0.37).sin() * 0.5).collect();
        let mk = |seed: f64| Tensor::from_fn(&[n, dim], move |i| ((i as f64 + seed) * 1.3).sin());
        let wmat = Tensor::from_fn(&[n, dim], |i| 0.3 + 0.6 * ((i as f64) * 0.77).cos().abs());
        let uvec = t(&[dim], &[0.2, -0.4, 0.7, 0.1]);
        let build = |g: &mut Graph<f64>, which: usize, x: Var| -> Var {
            let mut vars = [None; 5];
            vars[which] = Some(x);
            let get = |g: &mut Graph<f64>, i: usize, vars: &[Option<Var>; 5]| {
                vars[i].unwrap_or_else(|| {
                    let tt = match i {
                        0 => mk(0.0),
                        1 => mk(1.0),
                        2 => mk(2.0),
                        3 => wmat.clone(),
                        _ => uvec.clone(),
                    };
                    g.constant(tt)
                })
            };
            let r = get(g, 0, &vars);
            let k = get(g, 1, &vars);
            let v = get(g, 2, &vars);
            let w = get(g, 3, &vars);
            let u = get(g, 4, &vars);
            let (y, _) = g.wkv(r, k, v, w, u, heads, &init).unwrap();
            let c = g.constant(Tensor::from_fn(&[n, dim], |i| (i as f64 * 0.21).cos()));
            g.mul(y, c).unwrap()
        };
        for (which, x0) in [mk(0.0), mk(1.0), mk(2.0), wmat.clone(), uvec.clone()]
            .into_iter()
            .enumerate()
        {
            let (a, num) = numeric_grad(&x0, |g, x| build(g, which, x));
            assert_close(&a, &num, 1e-6);
        }
    }

    #[test]
    fn activation_meter_tracks_graph_lifetime() {
        let before = activation_meter::live();
        {
            let mut g = Graph::<f32>::inference();
            g.constant(Tensor::zeros(&[10, 10]));
            assert_eq!(activation_meter::live(), before + 100);
        }
        assert_eq!(activation_meter::live(), before);
    }
}
