//! Reverse-mode tape. Forward ops append nodes in evaluation order, so the
//! node list is topologically sorted by construction and `backward` is a
//! single reverse sweep.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::numel;
use super::{Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout for [`Tape::attention`]: segment `i` of the queries attends to
/// segment `i` of the keys/values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub q_segments: Vec<Range<usize>>,
    pub kv_segments: Vec<Range<usize>>,
    /// Per key row; `false` rows are never attended to.
    pub key_valid: Option<Vec<bool>>,
    /// Query `i` may only attend to keys `j <= i` within its segment.
    pub causal: bool,
}

impl AttentionLayout {
    pub fn single(len_q: usize, len_kv: usize) -> Self {
        Self {
            q_segments: vec![0..len_q],
            kv_segments: vec![0..len_kv],
            key_valid: None,
            causal: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Exp,
    Tanh,
    Neg,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Matmul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Shift(Var),
    AddRow(Var, Var),
    MulConst(Var, Vec<F>),
    Unary(Var, Unary),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Concat { parts: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, len: usize, inner: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    RowNorm(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>, scale: F, probs: Vec<Vec<F>> },
    Custom { x: Var, grad: Vec<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation. One tape per training step.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    record: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that evaluates values only; nothing is kept for backward.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
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

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, inputs: &[Var], op: impl FnOnce() -> Op<F>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor; it participates in backward iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: self.record && t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.leaf(&t))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (m, k) = self.dims2(a, op)?;
        let (br, bc) = self.dims2(b, op)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            rsb,
            csb,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(self.push(out, vec![m, n], &[a, b], || Op::Matmul { a, b, trans_b }))
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(())
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<(Vec<F>, Vec<usize>)> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, self.shape(a).to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, shape, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, shape, &[a, b], || Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, shape, &[a, b], || Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, &[a], || Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, &[a], || Op::Shift(a))
    }

    /// Elementwise product with a constant buffer (dropout masks, weights).
    pub fn mul_const(&mut self, a: Var, factor: Vec<F>) -> Result<Var> {
        if factor.len() != self.value(a).len() {
            return Err(shape_err("mul_const", self.shape(a), &[factor.len()]));
        }
        let out = self.value(a).iter().zip(&factor).map(|(&x, &f)| x * f).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, &[a], || Op::MulConst(a, factor)))
    }

    /// `x + 1·biasᵀ` for `x: m×n`, `bias: n`. The one explicit row broadcast.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, &[x, bias], || Op::AddRow(x, bias)))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let xs = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = xs.iter().find(|x| **x <= F::zero() || x.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("log of non-positive value {bad}"),
                });
            }
        }
        let f: fn(F) -> F = match kind {
            Unary::Relu => |x| if x > F::zero() { x } else { F::zero() },
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Log => |x| x.ln(),
            Unary::Exp => |x| x.exp(),
            Unary::Tanh => |x| x.tanh(),
            Unary::Neg => |x| -x,
        };
        let out: Vec<F> = xs.iter().map(|&x| f(x)).collect();
        if kind == Unary::Exp && out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "exp",
                detail: "overflow".into(),
            });
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, &[a], || Op::Unary(a, kind)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu).expect("relu is total")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu).expect("gelu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).iter().copied().sum();
        self.push(vec![s], Vec::new(), &[a], || Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::of(self.value(a).len() as f64);
        let s: F = self.value(a).iter().copied().sum();
        self.push(vec![s / n], Vec::new(), &[a], || Op::Mean(a))
    }

    /// Sum of a list of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::contract("add_n of an empty list"))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(out, shape, &[a], || Op::Reshape(a)))
    }

    // --------------------------------------------------------------- softmax

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Bounds {
                op: "softmax",
                index: axis,
                extent: shape.len(),
            });
        }
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "softmax",
                detail: "non-finite logits".into(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![F::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xs[at(j)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for j in 0..len {
                    let e = (xs[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(self.push(out, shape, &[x], || Op::Softmax { x, outer, len, inner }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::contract("log_softmax of a scalar"))?;
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "log_softmax",
                detail: "non-finite logits".into(),
            });
        }
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(n) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        Ok(self.push(out, shape, &[x], || Op::LogSoftmax(x)))
    }

    // ------------------------------------------------------------ layer norm

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("layer_norm of a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).len() / d.max(1);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let dn = F::of(d as f64);
        for row in self.value(x).chunks(d) {
            let mu = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / dn;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mu) * r));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat
            .chunks(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, &h)| g[j] * h + b[j]))
            .collect();
        Ok(self.push(out, shape, &[x, gamma, beta], || Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        }))
    }

    // --------------------------------------------------------- concat/slice

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of an empty list"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Bounds {
                op: "concat",
                index: axis,
                extent: base.len(),
            });
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let chunk = sz * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let parts_owned = parts.to_vec();
        Ok(self.push(out, shape, parts, || Op::Concat {
            parts: parts_owned,
            sizes,
            outer,
            inner,
        }))
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Bounds {
                op: "slice",
                index: axis,
                extent: shape.len(),
            });
        }
        if range.start > range.end || range.end > shape[axis] {
            return Err(Error::Bounds {
                op: "slice",
                index: range.end.max(range.start),
                extent: shape[axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let w = range.len() * inner;
        let mut out = Vec::with_capacity(outer * w);
        let xs = self.value(x);
        for o in 0..outer {
            let base = o * len * inner + range.start * inner;
            out.extend_from_slice(&xs[base..base + w]);
        }
        let mut new_shape = shape;
        new_shape[axis] = range.len();
        let start = range.start;
        Ok(self.push(out, new_shape, &[x], || Op::Slice {
            x,
            outer,
            len,
            inner,
            start,
        }))
    }

    /// Rows `idx` of a 2-D node (repeats allowed); also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Bounds {
                op: "gather_rows",
                index: bad,
                extent: r,
            });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        let n = idx.len();
        Ok(self.push(out, vec![n, c], &[x], || Op::GatherRows { x, idx }))
    }

    /// Euclidean norm of every row of a 2-D node; output has one entry per row.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "row_norm")?;
        let out = self
            .value(x)
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().map(|&v| v * v).sum::<F>().sqrt())
            .collect();
        Ok(self.push(out, vec![r], &[x], || Op::RowNorm(x)))
    }

    // ------------------------------------------------------------- attention

    /// Segment-wise scaled dot-product attention:
    /// `out_seg = softmax_masked(q_seg·k_segᵀ·scale)·v_seg`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>, scale: F) -> Result<Var> {
        let (nq, dk) = self.dims2(q, "attention")?;
        let (nk, dk2) = self.dims2(k, "attention")?;
        let (nv, dv) = self.dims2(v, "attention")?;
        if dk != dk2 || nk != nv {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if layout.q_segments.len() != layout.kv_segments.len() {
            return Err(Error::contract("attention: query and key segment counts differ"));
        }
        if let Some(valid) = &layout.key_valid {
            if valid.len() != nk {
                return Err(shape_err("attention", &[valid.len()], &[nk]));
            }
        }
        let mut out = vec![F::zero(); nq * dv];
        let mut probs = Vec::with_capacity(layout.q_segments.len());
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        for (qr, kr) in layout.q_segments.iter().zip(&layout.kv_segments) {
            if qr.end > nq || kr.end > nk {
                return Err(Error::Bounds {
                    op: "attention",
                    index: qr.end.max(kr.end),
                    extent: nq.min(nk),
                });
            }
            let (lq, lk) = (qr.len(), kr.len());
            if layout.causal && lq > lk {
                return Err(Error::contract("attention: causal segment has fewer keys than queries"));
            }
            let mut p = vec![F::zero(); lq * lk];
            F::gemm(
                lq,
                dk,
                lk,
                scale,
                &qs[qr.start * dk..],
                dk as isize,
                1,
                &ks[kr.start * dk..],
                1,
                dk as isize,
                F::zero(),
                &mut p,
                lk as isize,
                1,
            );
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                let allowed = |j: usize| {
                    layout.key_valid.as_ref().is_none_or(|m| m[kr.start + j]) && (!layout.causal || j <= i)
                };
                let mut max = F::neg_infinity();
                for (j, &s) in row.iter().enumerate() {
                    if !allowed(j) {
                        continue;
                    }
                    if !s.is_finite() {
                        return Err(Error::NonFinite {
                            op: "attention",
                            detail: format!("score for query row {}", qr.start + i),
                        });
                    }
                    if s > max {
                        max = s;
                    }
                }
                if max == F::neg_infinity() {
                    return Err(Error::contract(format!(
                        "attention: query row {} has no valid key frame",
                        qr.start + i
                    )));
                }
                if !max.is_finite() {
                    return Err(Error::NonFinite {
                        op: "attention",
                        detail: "non-finite attention scores".into(),
                    });
                }
                let mut z = F::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    if allowed(j) {
                        *s = (*s - max).exp();
                        z += *s;
                    } else {
                        *s = F::zero();
                    }
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            F::gemm(
                lq,
                lk,
                dv,
                F::one(),
                &p,
                lk as isize,
                1,
                &vs[kr.start * dv..],
                dv as isize,
                1,
                F::zero(),
                &mut out[qr.start * dv..],
                dv as isize,
                1,
            );
            probs.push(p);
        }
        Ok(self.push(out, vec![nq, dv], &[q, k, v], || Op::Attention {
            q,
            k,
            v,
            layout,
            scale,
            probs,
        }))
    }

    /// Attention weights of the last `attention` node evaluated at `v`, when
    /// recorded. Used by tests and probes.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // --------------------------------------------------------------- custom

    /// A scalar node with a precomputed gradient with respect to `x`. Fused
    /// losses (CTC, cross-entropy, BCE) compute value and gradient together.
    pub fn custom_scalar(&mut self, x: Var, value: F, grad: Vec<F>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(shape_err("custom_scalar", self.shape(x), &[grad.len()]));
        }
        Ok(self.push(vec![value], Vec::new(), &[x], || Op::Custom { x, grad }))
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = node.shape[1];
                let (bv, av) = (val(*b), val(*a));
                acc(*a, &mut |da| {
                    // da += g · b (trans_b) or g · bᵀ
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    F::gemm(m, n, k, F::one(), g, n as isize, 1, bv, rsb, csb, F::one(), da, k as isize, 1);
                });
                acc(*b, &mut |db| {
                    if *trans_b {
                        // db (n×k) += gᵀ · a
                        F::gemm(n, m, k, F::one(), g, 1, n as isize, av, k as isize, 1, F::one(), db, k as isize, 1);
                    } else {
                        // db (k×n) += aᵀ · g
                        F::gemm(k, m, n, F::one(), av, 1, k as isize, g, n as isize, 1, F::one(), db, n as isize, 1);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s)),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MulConst(a, f) => acc(*a, &mut |d| {
                for ((d, &g), &f) in d.iter_mut().zip(g).zip(f) {
                    *d += g * f;
                }
            }),
            Op::AddRow(x, bias) => {
                let n = nodes[bias.0].value.len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Unary(a, kind) => {
                let (xs, ys) = (val(*a), node.value.as_slice());
                let kind = *kind;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        let (x, y) = (xs[i], ys[i]);
                        let dy = match kind {
                            Unary::Relu => {
                                if x > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::Gelu => gelu_grad(x),
                            Unary::Sigmoid => y * (F::one() - y),
                            Unary::Log => F::one() / x,
                            Unary::Exp => y,
                            Unary::Tanh => F::one() - y * y,
                            Unary::Neg => -F::one(),
                        };
                        d[i] += g[i] * dy;
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.as_slice();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap();
                let y = node.value.as_slice();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gs: F = grow.iter().copied().sum();
                        for j in 0..n {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = val(*gamma);
                acc(*gamma, &mut |dg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    let dn = F::of(d as f64);
                    for (r, ((dxrow, grow), hrow)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            dxrow[j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            Op::Concat {
                parts,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    let chunk = sz * inner;
                    acc(p, &mut |d| {
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut d[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    });
                    offset += sz;
                }
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            } => {
                let w = node.shape.iter().product::<usize>() / outer.max(&1);
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        let base = o * len * inner + start * inner;
                        add_into(&mut d[base..base + w], &g[o * w..(o + 1) * w]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::RowNorm(x) => {
                let xs = val(*x);
                let c = nodes[x.0].shape[1];
                let norms = node.value.as_slice();
                acc(*x, &mut |d| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm > F::zero() {
                            let s = g[r] / nrm;
                            for j in 0..c {
                                d[r * c + j] += s * xs[r * c + j];
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = F::of(nodes[a.0].value.len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                scale,
                probs,
            } => self.backprop_attention(*q, *k, *v, layout, *scale, probs, g, grads),
            Op::Custom { x, grad } => acc(*x, &mut |d| {
                for (d, &gr) in d.iter_mut().zip(grad) {
                    *d += g[0] * gr;
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        scale: F,
        probs: &[Vec<F>],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let nodes = &self.nodes;
        let dk = nodes[q.0].shape[1];
        let dv = nodes[v.0].shape[1];
        let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let mut take = |x: Var| -> Option<Vec<F>> {
            if nodes[x.0].requires_grad {
                Some(grads[x.0].take().unwrap_or_else(|| vec![F::zero(); nodes[x.0].value.len()]))
            } else {
                None
            }
        };
        // q, k, v may alias (self-attention on a shared projection), so the
        // buffers are taken out and restored one by one.
        let mut dq = take(q);
        let mut dkb = if k == q { None } else { take(k) };
        let mut dvb = if v == q || v == k { None } else { take(v) };
        for ((qr, kr), p) in layout.q_segments.iter().zip(&layout.kv_segments).zip(probs) {
            let (lq, lk) = (qr.len(), kr.len());
            let go = &g[qr.start * dv..qr.end * dv];
            // dV += Pᵀ · dO
            let dv_target = if v == q {
                dq.as_mut()
            } else if v == k {
                if k == q {
                    dq.as_mut()
                } else {
                    dkb.as_mut()
                }
            } else {
                dvb.as_mut()
            };
            if let Some(dvbuf) = dv_target {
                F::gemm(
                    lk,
                    lq,
                    dv,
                    F::one(),
                    p,
                    1,
                    lk as isize,
                    go,
                    dv as isize,
                    1,
                    F::one(),
                    &mut dvbuf[kr.start * dv..],
                    dv as isize,
                    1,
                );
            }
            // dP = dO · Vᵀ
            let mut ds = vec![F::zero(); lq * lk];
            F::gemm(
                lq,
                dv,
                lk,
                F::one(),
                go,
                dv as isize,
                1,
                &vs[kr.start * dv..],
                1,
                dv as isize,
                F::zero(),
                &mut ds,
                lk as isize,
                1,
            );
            for i in 0..lq {
                let prow = &p[i * lk..(i + 1) * lk];
                let drow = &mut ds[i * lk..(i + 1) * lk];
                let dot: F = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum();
                for j in 0..lk {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
            }
            if let Some(dqbuf) = dq.as_mut() {
                F::gemm(
                    lq,
                    lk,
                    dk,
                    F::one(),
                    &ds,
                    lk as isize,
                    1,
                    &ks[kr.start * dk..],
                    dk as isize,
                    1,
                    F::one(),
                    &mut dqbuf[qr.start * dk..],
                    dk as isize,
                    1,
                );
            }
            let dk_target = if k == q { dq.as_mut() } else { dkb.as_mut() };
            if let Some(dkbuf) = dk_target {
                F::gemm(
                    lk,
                    lq,
                    dk,
                    F::one(),
                    &ds,
                    1,
                    lk as isize,
                    &qs[qr.start * dk..],
                    dk as isize,
                    1,
                    F::one(),
                    &mut dkbuf[kr.start * dk..],
                    dk as isize,
                    1,
                );
            }
        }
        if let Some(b) = dq {
            grads[q.0] = Some(b);
        }
        if let Some(b) = dkb {
            grads[k.0] = Some(b);
        }
        if let Some(b) = dvb {
            grads[v.0] = Some(b);
        }
    }
}

/// Gradients of leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` with zeros for unreachable leaves.
    pub fn wrt(&self, tape: &Tape<F>, v: Var) -> Vec<F> {
        self.get(v)
            .map(<[F]>::to_vec)
            .unwrap_or_else(|| vec![F::zero(); tape.value(v).len()])
    }

    /// Adds the gradient of `v` into `t.grad`, allocating it if needed.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<F>) {
        let buf = t.grad_mut();
        if let Some(g) = self.get(v) {
            add_into(buf, g);
        }
    }
}

#[inline]
fn add_into<F: Float>(d: &mut [F], g: &[F]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

pub(crate) fn log_sum_exp<F: Float>(xs: &[F]) -> F {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}

fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Float>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * du
}
