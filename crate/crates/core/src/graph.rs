//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an arena of nodes appended in execution order, so the node
//! list is already topologically sorted. Leaves copy parameter values in; the
//! backward sweep walks the arena in reverse and accumulates gradients for
//! every node that transitively depends on a `requires_grad` leaf.

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom, Operand};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Square { x: Var },
    Ln { x: Var },
    Pow { x: Var, p: f64 },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    ClampMin { x: Var, lo: f64 },
    Softmax { x: Var, axis: usize },
    Sum { x: Var, axis: Option<usize> },
    TakeAlong { x: Var, axis: usize, idx: Vec<usize> },
    Expand { x: Var },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    DiagEmbed { x: Var },
    Custom { xs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Square { .. } => "square",
            Op::Ln { .. } => "ln",
            Op::Pow { .. } => "pow",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::ClampMin { .. } => "clamp_min",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::TakeAlong { .. } => "take_along",
            Op::Expand { .. } => "expand",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::DiagEmbed { .. } => "diag_embed",
            Op::Custom { .. } => "custom",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Transpose { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Square { x }
            | Op::Ln { x }
            | Op::Pow { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::ClampMin { x, .. }
            | Op::Softmax { x, .. }
            | Op::Sum { x, .. }
            | Op::TakeAlong { x, .. }
            | Op::Expand { x }
            | Op::Reshape { x }
            | Op::DiagEmbed { x } => vec![*x],
            Op::Concat { xs, .. } | Op::Custom { xs, .. } => xs.clone(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is not tracked or
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `t.grad` (no-op if absent).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Batch extent and matrix dims of a rank-2 or rank-3 operand.
fn mat_dims(shape: &[usize]) -> Option<(Option<usize>, usize, usize)> {
    match *shape {
        [m, n] => Some((None, m, n)),
        [b, m, n] => Some((Some(b), m, n)),
        _ => None,
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match dst {
        Some(buf) => buf.iter_mut().zip(&delta).for_each(|(d, v)| *d += v),
        None => *dst = Some(delta),
    }
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// For each output element of an expand, the source offset.
fn expand_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let ss = strides(src);
    let total = numel(dst);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..total {
        let off = idx
            .iter()
            .zip(src)
            .zip(&ss)
            .map(|((&i, &e), &s)| if e == 1 { 0 } else { i * s })
            .sum();
        map.push(off);
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `t` into the graph; tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            tracked: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `t` into the graph with explicit tracking, ignoring the
    /// tensor's own flag.
    pub fn param(&mut self, t: &Tensor, track: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            tracked: track,
        });
        Var(self.nodes.len() - 1)
    }

    /// Moves an untracked value into the graph.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, node has shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    /// Validation pass: the first node holding a NaN or infinity.
    pub fn validate_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: n.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product of rank-2/rank-3 operands; a rank-2 operand is shared
    /// across the batch of the other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Dimension(format!("matmul of {sa:?} and {sb:?}"));
        let (ba, m, k) = mat_dims(&sa).ok_or_else(err)?;
        let (bb, k2, n) = mat_dims(&sb).ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        let batch = match (ba, bb) {
            (Some(x), Some(y)) if x != y => return Err(err()),
            (x, y) => x.or(y),
        };
        let mut out = vec![0.0; batch.unwrap_or(1) * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        match (ba, bb) {
            (None, None) => gemm(Operand::new(va, m, k), Operand::new(vb, k, n), 0.0, &mut out),
            (Some(bs), None) => gemm(
                Operand::new(va, bs * m, k),
                Operand::new(vb, k, n),
                0.0,
                &mut out,
            ),
            _ => {
                for s in 0..batch.unwrap() {
                    let pa = if ba.is_some() { &va[s * m * k..(s + 1) * m * k] } else { va };
                    let pb = if bb.is_some() { &vb[s * k * n..(s + 1) * k * n] } else { vb };
                    gemm(
                        Operand::new(pa, m, k),
                        Operand::new(pb, k, n),
                        0.0,
                        &mut out[s * m * n..(s + 1) * m * n],
                    );
                }
            }
        }
        let shape = match batch {
            Some(bs) => vec![bs, m, n],
            None => vec![m, n],
        };
        Ok(self.push(shape, out, Op::MatMul { a, b }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (bs, m, n) = mat_dims(&s)
            .ok_or_else(|| Error::Dimension(format!("transpose of rank-{} tensor", s.len())))?;
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for b in 0..bs.unwrap_or(1) {
            let o = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = v[o + i * n + j];
                }
            }
        }
        let shape = match bs {
            Some(b) => vec![b, n, m],
            None => vec![n, m],
        };
        Ok(self.push(shape, out, Op::Transpose { x }))
    }

    /// Zero-padded cross-correlation of `x` (`Cin×H×W` or `B×Cin×H×W`) with
    /// `k` (`Cout×Cin×kh×kh`).
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let (batched, geom, cout) = self.conv_geom(&sx, &sk, stride, padding)?;
        let bs = if batched { sx[0] } else { 1 };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.cin * geom.h * geom.w;
        let mut cols = vec![0.0; rows * ncol];
        let mut out = vec![0.0; bs * cout * ncol];
        let (vx, vk) = (self.value(x), self.value(k));
        for s in 0..bs {
            im2col(&vx[s * in_len..(s + 1) * in_len], &geom, &mut cols);
            gemm(
                Operand::new(vk, cout, rows),
                Operand::new(&cols, rows, ncol),
                0.0,
                &mut out[s * cout * ncol..(s + 1) * cout * ncol],
            );
        }
        let mut shape = if batched { vec![bs] } else { vec![] };
        shape.extend_from_slice(&[cout, geom.ho, geom.wo]);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x,
                k,
                stride,
                pad: padding,
            },
        ))
    }

    fn conv_geom(
        &self,
        sx: &[usize],
        sk: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<(bool, ConvGeom, usize)> {
        let err = |why: &str| {
            Error::Dimension(format!(
                "conv2d of input {sx:?} with kernels {sk:?} (stride {stride}, padding {pad}): {why}"
            ))
        };
        let (batched, cin, h, w) = match *sx {
            [c, h, w] => (false, c, h, w),
            [_, c, h, w] => (true, c, h, w),
            _ => return Err(err("input must be rank 3 or 4")),
        };
        let [cout, kc, kh, kw] = *sk else {
            return Err(err("kernels must be rank 4"));
        };
        if kc != cin || kh != kw {
            return Err(err("channel mismatch or non-square kernel"));
        }
        if stride == 0 {
            return Err(err("stride must be positive"));
        }
        if kh > h + 2 * pad || kh > w + 2 * pad {
            return Err(err("kernel larger than padded input"));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kh) / stride + 1,
        };
        Ok((batched, geom, cout))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb {
            Ok((sa.to_vec(), va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()))
        } else if vb.len() == 1 {
            Ok((sa.to_vec(), va.iter().map(|&x| f(x, vb[0])).collect()))
        } else if va.len() == 1 {
            Ok((sb.to_vec(), vb.iter().map(|&y| f(va[0], y)).collect()))
        } else {
            Err(Error::Dimension(format!("{name} of {sa:?} and {sb:?}")))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x + y, "add")?;
        Ok(self.push(s, v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x - y, "sub")?;
        Ok(self.push(s, v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x * y, "mul")?;
        Ok(self.push(s, v, Op::Mul { a, b }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let s = self.shape(x).to_vec();
        let v = self.value(x).iter().map(|&t| f(t)).collect();
        self.push(s, v, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |t| if t > 0.0 { t } else { 0.0 }, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |t| t * t, Op::Square { x })
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln { x })
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |t| t.powf(p), Op::Pow { x, p })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |t| t * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |t| t + c, Op::AddScalar { x })
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, |t| t.max(lo), Op::ClampMin { x, lo })
    }

    // ---- reductions and normalization ------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::Dimension(format!("axis {axis} for shape {s:?}")));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&s, axis);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mx = (0..len).map(|a| v[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (v[at(a)] - mx).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        Ok(self.push(s, out, Op::Softmax { x, axis }))
    }

    /// Sum along `axis` (removed from the shape), or over everything.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let v = self.value(x);
        match axis {
            None => {
                let total = v.iter().sum();
                Ok(self.push(vec![], vec![total], Op::Sum { x, axis }))
            }
            Some(ax) => {
                self.check_axis(x, ax)?;
                let (outer, len, inner) = axis_split(&s, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let src = &v[(o * len + a) * inner..(o * len + a + 1) * inner];
                        out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                let mut shape = s.clone();
                shape.remove(ax);
                Ok(self.push(shape, out, Op::Sum { x, axis }))
            }
        }
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let count = match axis {
            None => self.value(x).len(),
            Some(ax) => {
                self.check_axis(x, ax)?;
                self.shape(x)[ax]
            }
        };
        let total = self.sum(x, axis)?;
        Ok(self.scale(total, 1.0 / count as f64))
    }

    /// Maximum along `axis` with the row-major-first argmax; the gradient
    /// flows only to the selected entry.
    pub fn max_along(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        self.check_axis(x, axis)?;
        let s = self.shape(x).to_vec();
        let idx = argmax_along(self.value(x), &s, axis);
        let picked = self.take_along(x, axis, idx.clone(), 1)?;
        let mut shape = s;
        shape.remove(axis);
        Ok((self.reshape(picked, &shape)?, idx))
    }

    /// `out[o, a, i] = x[o, idx[(o·out_len + a)·inner + i], i]` where the
    /// axis has length `out_len` in the output.
    pub fn take_along(&mut self, x: Var, axis: usize, idx: Vec<usize>, out_len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&s, axis);
        if idx.len() != outer * out_len * inner || idx.iter().any(|&j| j >= len) || out_len == 0 {
            return Err(Error::Dimension(format!(
                "take_along indices do not fit shape {s:?} on axis {axis}"
            )));
        }
        let v = self.value(x);
        let mut out = vec![0.0; idx.len()];
        for o in 0..outer {
            for a in 0..out_len {
                for i in 0..inner {
                    let p = (o * out_len + a) * inner + i;
                    out[p] = v[(o * len + idx[p]) * inner + i];
                }
            }
        }
        let mut shape = s;
        shape[axis] = out_len;
        Ok(self.push(shape, out, Op::TakeAlong { x, axis, idx }))
    }

    // ---- shape ----------------------------------------------------------

    /// Broadcasts singleton axes of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::Dimension(format!("cannot expand {s:?} to {shape:?}")));
        }
        let map = expand_map(&s, shape);
        let v = self.value(x);
        let out = map.iter().map(|&o| v[o]).collect();
        Ok(self.push(shape.to_vec(), out, Op::Expand { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if numel(s) != numel(shape) {
            return Err(Error::Dimension(format!("cannot reshape {s:?} into {shape:?}")));
        }
        let v = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape { x }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        self.check_axis(*first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Dimension(format!("concat of {base:?} and {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                out.extend_from_slice(&self.value(x)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// `[..., n] -> [..., n, n]` with the input on the diagonal.
    pub fn diag_embed(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::Dimension("diag_embed of a scalar".into()))?;
        let v = self.value(x);
        let rows = v.len() / n;
        let mut out = vec![0.0; rows * n * n];
        for r in 0..rows {
            for i in 0..n {
                out[r * n * n + i * n + i] = v[r * n + i];
            }
        }
        let mut shape = s;
        shape.push(n);
        Ok(self.push(shape, out, Op::DiagEmbed { x }))
    }

    /// Op with a caller-supplied value and backward rule. `backward`
    /// receives the input values, the output value and the upstream
    /// gradient, and returns one gradient per input.
    pub fn custom(
        &mut self,
        xs: &[Var],
        shape: &[usize],
        value: Vec<f64>,
        backward: impl Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::Dimension(format!(
                "custom op value of length {} for shape {shape:?}",
                value.len()
            )));
        }
        Ok(self.push(
            shape.to_vec(),
            value,
            Op::Custom {
                xs: xs.to_vec(),
                backward: Box::new(backward),
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across every
    /// use of a node. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let deltas = self.node_backward(node, &g);
            for (input, delta) in deltas {
                if self.nodes[input.0].tracked {
                    add_into(&mut grads[input.0], delta);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shp = |v: Var| self.nodes[v.0].shape.as_slice();
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let y = &node.value;
        let map = |x: Var, f: &dyn Fn(usize) -> f64| -> (Var, Vec<f64>) {
            (x, (0..g.len()).map(f).collect())
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => self.matmul_backward(*a, *b, g),
            Op::Transpose { x } => {
                let (bs, m, n) = mat_dims(shp(*x)).unwrap();
                let mut gx = vec![0.0; g.len()];
                for b in 0..bs.unwrap_or(1) {
                    let o = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            gx[o + i * n + j] = g[o + j * m + i];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (batched, geom, cout) = self
                    .conv_geom(shp(*x), shp(*k), *stride, *pad)
                    .expect("validated in forward");
                let bs = if batched { shp(*x)[0] } else { 1 };
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.cin * geom.h * geom.w;
                let (vx, vk) = (val(*x), val(*k));
                let mut gk = vec![0.0; vk.len()];
                let mut gx = vec![0.0; vx.len()];
                let mut cols = vec![0.0; rows * ncol];
                let mut gcols = vec![0.0; rows * ncol];
                for s in 0..bs {
                    let gs = &g[s * cout * ncol..(s + 1) * cout * ncol];
                    if tracked(*k) {
                        im2col(&vx[s * in_len..(s + 1) * in_len], &geom, &mut cols);
                        gemm(
                            Operand::new(gs, cout, ncol),
                            Operand::new(&cols, rows, ncol).t(),
                            1.0,
                            &mut gk,
                        );
                    }
                    if tracked(*x) {
                        gemm(
                            Operand::new(vk, cout, rows).t(),
                            Operand::new(gs, cout, ncol),
                            0.0,
                            &mut gcols,
                        );
                        col2im(&gcols, &geom, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                }
                vec![(*x, gx), (*k, gk)]
            }
            Op::Add { a, b } => {
                let (ga, gb) = self.broadcast_split(*a, *b, g, |_, _| 1.0, |_, _| 1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sub { a, b } => {
                let (ga, gb) = self.broadcast_split(*a, *b, g, |_, _| 1.0, |_, _| -1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul { a, b } => {
                let (ga, gb) = self.broadcast_split(*a, *b, g, |_, y| y, |x, _| x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu { x } => {
                let vx = val(*x);
                vec![map(*x, &|i| if vx[i] > 0.0 { g[i] } else { 0.0 })]
            }
            Op::Sigmoid { x } => vec![map(*x, &|i| g[i] * y[i] * (1.0 - y[i]))],
            Op::Square { x } => {
                let vx = val(*x);
                vec![map(*x, &|i| 2.0 * vx[i] * g[i])]
            }
            Op::Ln { x } => {
                let vx = val(*x);
                vec![map(*x, &|i| g[i] / vx[i])]
            }
            Op::Pow { x, p } => {
                let vx = val(*x);
                vec![map(*x, &|i| g[i] * p * vx[i].powf(p - 1.0))]
            }
            Op::Scale { x, c } => vec![map(*x, &|i| g[i] * c)],
            Op::AddScalar { x } => vec![(*x, g.to_vec())],
            Op::ClampMin { x, lo } => {
                let vx = val(*x);
                vec![map(*x, &|i| if vx[i] > *lo { g[i] } else { 0.0 })]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum { x, axis } => match axis {
                None => vec![(*x, vec![g[0]; val(*x).len()])],
                Some(ax) => {
                    let (outer, len, inner) = axis_split(shp(*x), *ax);
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for a in 0..len {
                            gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                                .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    vec![(*x, gx)]
                }
            },
            Op::TakeAlong { x, axis, idx } => {
                let (outer, len, inner) = axis_split(shp(*x), *axis);
                let out_len = node.shape[*axis];
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..out_len {
                        for i in 0..inner {
                            let p = (o * out_len + a) * inner + i;
                            gx[(o * len + idx[p]) * inner + i] += g[p];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Expand { x } => {
                let map = expand_map(shp(*x), &node.shape);
                let mut gx = vec![0.0; val(*x).len()];
                for (p, &o) in map.iter().enumerate() {
                    gx[o] += g[p];
                }
                vec![(*x, gx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = shp(x)[*axis];
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    res.push((x, gx));
                }
                res
            }
            Op::DiagEmbed { x } => {
                let n = *shp(*x).last().unwrap();
                let rows = val(*x).len() / n;
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    for i in 0..n {
                        gx[r * n + i] = g[r * n * n + i * n + i];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Custom { xs, backward } => {
                let inputs: Vec<&[f64]> = xs.iter().map(|&x| val(x)).collect();
                let gs = backward(&inputs, y, g);
                xs.iter().copied().zip(gs).collect()
            }
        }
    }

    /// Gradients of a possibly scalar-broadcast binary op, given the
    /// pointwise partials `da(x, y)` and `db(x, y)`.
    fn broadcast_split(
        &self,
        a: Var,
        b: Var,
        g: &[f64],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let (va, vb) = (self.value(a), self.value(b));
        let n = g.len();
        let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let mut ga = vec![0.0; va.len()];
        let mut gb = vec![0.0; vb.len()];
        for i in 0..n {
            let (x, y) = (at(va, i), at(vb, i));
            let ia = if va.len() == 1 { 0 } else { i };
            let ib = if vb.len() == 1 { 0 } else { i };
            ga[ia] += g[i] * da(x, y);
            gb[ib] += g[i] * db(x, y);
        }
        (ga, gb)
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (ba, m, k) = mat_dims(self.shape(a)).unwrap();
        let (bb, _, n) = mat_dims(self.shape(b)).unwrap();
        let (va, vb) = (self.value(a), self.value(b));
        let mut ga = vec![0.0; va.len()];
        let mut gb = vec![0.0; vb.len()];
        let need_a = self.is_tracked(a);
        let need_b = self.is_tracked(b);
        match (ba, bb) {
            (None, None) => {
                if need_a {
                    gemm(Operand::new(g, m, n), Operand::new(vb, k, n).t(), 0.0, &mut ga);
                }
                if need_b {
                    gemm(Operand::new(va, m, k).t(), Operand::new(g, m, n), 0.0, &mut gb);
                }
            }
            (Some(bs), None) => {
                if need_a {
                    gemm(Operand::new(g, bs * m, n), Operand::new(vb, k, n).t(), 0.0, &mut ga);
                }
                if need_b {
                    gemm(
                        Operand::new(va, bs * m, k).t(),
                        Operand::new(g, bs * m, n),
                        0.0,
                        &mut gb,
                    );
                }
            }
            _ => {
                let bs = ba.or(bb).unwrap();
                for s in 0..bs {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let (ra, rb) = (s * m * k..(s + 1) * m * k, s * k * n..(s + 1) * k * n);
                    let pa = if ba.is_some() { &va[ra.clone()] } else { va };
                    let pb = if bb.is_some() { &vb[rb.clone()] } else { vb };
                    if need_a {
                        let (dst, beta) = if ba.is_some() { (&mut ga[ra], 0.0) } else { (&mut ga[..], 1.0) };
                        gemm(Operand::new(gs, m, n), Operand::new(pb, k, n).t(), beta, dst);
                    }
                    if need_b {
                        let (dst, beta) = if bb.is_some() { (&mut gb[rb], 0.0) } else { (&mut gb[..], 1.0) };
                        gemm(Operand::new(pa, m, k).t(), Operand::new(gs, m, n), beta, dst);
                    }
                }
            }
        }
        vec![(a, ga), (b, gb)]
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Row-major-first argmax along `axis`; one index per (outer, inner) pair.
pub fn argmax_along(v: &[f64], shape: &[usize], axis: usize) -> Vec<usize> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut idx = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            for a in 1..len {
                if v[(o * len + a) * inner + i] > v[(o * len + best) * inner + i] {
                    best = a;
                }
            }
            idx[o * inner + i] = best;
        }
    }
    idx
}
