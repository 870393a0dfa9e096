//! Tape-style computation graph over dense tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps each flat index of the output to a flat index of the broadcast rhs.
/// `None` when both operands share a shape.
type BroadcastMap = Option<Vec<usize>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var, map: BroadcastMap },
    Sub { a: Var, b: Var, map: BroadcastMap },
    Mul { a: Var, b: Var, map: BroadcastMap },
    Div { a: Var, b: Var, map: BroadcastMap },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Tanh { x: Var },
    Abs { x: Var },
    Square { x: Var },
    ClampMin { x: Var, min: f64 },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, axis: usize, argmax: Vec<usize> },
    SumAll { x: Var },
    Reshape { x: Var },
    Transpose { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SoftmaxLast { x: Var },
    GridSample { features: Var, grid: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation graph. Single-threaded per instance.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of the parameter leaves reachable from a backward root.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    /// Adjoint of `v`, or zeros of its shape when `v` is unreachable.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.grads
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_map(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<BroadcastMap> {
    if lhs == rhs {
        return Ok(None);
    }
    let numel: usize = lhs.iter().product();
    if rhs.iter().product::<usize>() == 1 {
        return Ok(Some(vec![0; numel]));
    }
    if lhs.len() != rhs.len() || lhs.iter().zip(rhs).any(|(&l, &r)| r != l && r != 1) {
        return Err(Error::shape(op, lhs, rhs));
    }
    let rank = lhs.len();
    let mut rhs_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        rhs_strides[d] = if rhs[d] == 1 { 0 } else { stride };
        stride *= rhs[d];
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&rhs_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < lhs[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

#[inline]
fn rhs_at(map: &BroadcastMap, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

/// Sums an output-shaped adjoint back onto the (possibly broadcast) rhs.
fn reduce_to_rhs(map: &BroadcastMap, contrib: Vec<f64>, rhs_shape: &[usize]) -> Tensor {
    match map {
        None => Tensor::from_parts(rhs_shape.to_vec(), contrib),
        Some(m) => {
            let mut out = Tensor::zeros(rhs_shape);
            let data = out.data_mut();
            for (i, c) in contrib.into_iter().enumerate() {
                data[m[i]] += c;
            }
            out
        }
    }
}

struct GridPoint {
    x0: usize,
    y0: usize,
    wx: f64,
    wy: f64,
    dx_scale: f64,
    dy_scale: f64,
}

/// Align-corners mapping of a normalized coordinate onto `size` pixels with
/// border clamping. Returns (cell origin, fractional weight, d pixel / d coord).
fn grid_axis(coord: f64, size: usize) -> (usize, f64, f64) {
    let scale = (size - 1) as f64 / 2.0;
    let raw = (coord + 1.0) * scale;
    let (pos, deriv) = if raw <= 0.0 {
        (0.0, if raw < 0.0 { 0.0 } else { scale })
    } else if raw >= (size - 1) as f64 {
        ((size - 1) as f64, if raw > (size - 1) as f64 { 0.0 } else { scale })
    } else {
        (raw, scale)
    };
    let origin = (pos.floor() as usize).min(size - 2);
    (origin, pos - origin as f64, deriv)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kinks: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose adjoint is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Hash of every branch decision taken so far (ReLU activity, abs signs,
    /// max positions, clamps, grid cells). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn mix(&mut self, word: u64) {
        self.kinks ^= word;
        self.kinks = self.kinks.wrapping_mul(0x0100_0000_01b3);
    }

    fn mix_bits(&mut self, bits: impl Iterator<Item = bool>) {
        let mut word = 0u64;
        let mut n = 0;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                self.mix(word);
                word = 0;
                n = 0;
            }
        }
        self.mix(word ^ ((n as u64) << 56));
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product. Accepts `(m,k)x(k,n)`, batched `(b,m,k)x(b,k,n)`, and
    /// `(b,m,k)x(k,n)` with the right operand shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n, shared_b) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], true),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2], false),
            (3, 2) if sa[2] == sb[0] => (sa[0], sa[1], sa[2], sb[1], true),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let b_off = if shared_b { 0 } else { bi * k * n };
                gemm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[b_off..b_off + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, BroadcastMap)> {
        let map = broadcast_map(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[rhs_at(&map, i)]))
            .collect();
        Ok((Tensor::from_parts(av.shape().to_vec(), data), map))
    }

    /// Elementwise sum. `b` may broadcast along axes where its extent is 1,
    /// or be a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b, map }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b, map }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b, map }, &[a, b]))
    }

    /// Elementwise quotient; a zero divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(pos) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(Error::domain("div", format!("zero divisor at flat index {pos}")));
        }
        let (value, map) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(value, Op::Div { a, b, map }, &[a, b]))
    }

    /// Same as [`Graph::add`] with a bias broadcast along the leading axis.
    pub fn broadcast_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() == 1 && sa.len() >= 2 && sb[0] == *sa.last().unwrap() {
            let mut row_shape = vec![1; sa.len()];
            *row_shape.last_mut().unwrap() = sb[0];
            let b = self.reshape(bias, &row_shape)?;
            return self.add(a, b);
        }
        self.add(a, bias)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
        self.mix_bits(signs.into_iter());
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp { x }, &[x])
    }

    /// Natural log. Non-positive entries are a domain error; callers that
    /// need a guarded log apply [`Graph::clamp_min`] first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.value(x).data().iter().position(|&v| v <= 0.0) {
            let v = self.value(x).data()[pos];
            return Err(Error::domain("log", format!("non-positive input {v} at flat index {pos}")));
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.push(value, Op::Log { x }, &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh { x }, &[x])
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
        self.mix_bits(signs.into_iter());
        self.push(value, Op::Abs { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square { x }, &[x])
    }

    /// max(x, min); the adjoint is cut where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let value = self.value(x).map(|v| v.max(min));
        let active: Vec<bool> = self.value(x).data().iter().map(|&v| v < min).collect();
        self.mix_bits(active.into_iter());
        self.push(value, Op::ClampMin { x, min }, &[x])
    }

    fn reduced_shape(&self, x: Var, axis: usize, keepdim: bool, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::shape(op, shape, &[axis]));
        }
        let mut out = shape.to_vec();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
            if out.is_empty() {
                out.push(1);
            }
        }
        Ok(out)
    }

    fn reduce_sum(&self, x: Var, axis: usize) -> Vec<f64> {
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        out
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.reduced_shape(x, axis, keepdim, "sum_axis")?;
        let out = self.reduce_sum(x, axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sum { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.reduced_shape(x, axis, keepdim, "mean_axis")?;
        let n = self.shape(x)[axis] as f64;
        let out = self.reduce_sum(x, axis).into_iter().map(|v| v / n).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mean { x, axis }, &[x]))
    }

    /// Maximum along `axis`; ties resolve to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.reduced_shape(x, axis, keepdim, "max_axis")?;
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let data = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = data[(o * n + k) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = k;
                    }
                }
            }
        }
        for &k in &argmax {
            self.mix(k as u64);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Max { x, axis, argmax }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let out = transpose_last(self.value(x).data(), rows, cols);
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Transpose { x }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let n = self.shape(*v)[axis];
                let data = self.value(*v).data();
                out.extend_from_slice(&data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxLast { x }, &[x])
    }

    /// Bilinear lookup with align-corners mapping and border clamping.
    ///
    /// `features` is `(N, C, H, W)`; `grid` is `(C, P, 2)` shared across the
    /// batch or `(N, C, P, 2)` per sample, holding `(x, y)` pairs in
    /// `[-1, 1]` where `x` indexes the width axis. Channel `c` is sampled only
    /// at the points of grid row `c`. Output is `(N, C, P)`.
    pub fn grid_sample(&mut self, features: Var, grid: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let gs = self.shape(grid).to_vec();
        let ok = fs.len() == 4
            && fs[2] >= 2
            && fs[3] >= 2
            && match gs.len() {
                3 => gs[0] == fs[1] && gs[2] == 2,
                4 => gs[0] == fs[0] && gs[1] == fs[1] && gs[3] == 2,
                _ => false,
            };
        if !ok {
            return Err(Error::shape("grid_sample", &fs, &gs));
        }
        let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let p = gs[gs.len() - 2];
        let per_sample = gs.len() == 4;
        let mut out = vec![0.0; n * c * p];
        let mut cells = Vec::with_capacity(n * c * p * 2);
        {
            let fv = self.value(features).data();
            let gv = self.value(grid).data();
            for ni in 0..n {
                for ci in 0..c {
                    let chan = &fv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for pi in 0..p {
                        let g_off = if per_sample { ((ni * c + ci) * p + pi) * 2 } else { (ci * p + pi) * 2 };
                        let pt = grid_point(gv[g_off], gv[g_off + 1], h, w);
                        cells.push((pt.x0 as u64) << 32 | pt.y0 as u64);
                        cells.push(((pt.dx_scale == 0.0) as u64) << 1 | (pt.dy_scale == 0.0) as u64);
                        out[(ni * c + ci) * p + pi] = bilinear(chan, w, &pt);
                    }
                }
            }
        }
        for word in cells {
            self.mix(word);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, p], out),
            Op::GridSample { features, grid },
            &[features, grid],
        ))
    }

    /// Adjoints of every parameter leaf reachable from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads
                    .grads
                    .insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            for (parent, contrib) in self.vjp(idx, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `idx` for output adjoint `g`.
    fn vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (batch, m, k) = if sa.len() == 3 { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
                let n = *sb.last().unwrap();
                let shared_b = sb.len() == 2;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut out = Vec::new();
                if self.needs(*a) {
                    let mut da = vec![0.0; av.len()];
                    for bi in 0..batch {
                        let b_off = if shared_b { 0 } else { bi * k * n };
                        gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[b_off..b_off + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for bi in 0..batch {
                        let b_off = if shared_b { 0 } else { bi * k * n };
                        gemm_tn_acc(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[b_off..b_off + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Add { a, b, map } => {
                let db = reduce_to_rhs(map, g.to_vec(), self.shape(*b));
                vec![(*a, g.to_vec()), (*b, db.into_data())]
            }
            Op::Sub { a, b, map } => {
                let db = reduce_to_rhs(map, g.iter().map(|v| -v).collect(), self.shape(*b));
                vec![(*a, g.to_vec()), (*b, db.into_data())]
            }
            Op::Mul { a, b, map } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = g.iter().enumerate().map(|(i, gi)| gi * bv[rhs_at(map, i)]).collect();
                let db_full = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                let db = reduce_to_rhs(map, db_full, self.shape(*b));
                vec![(*a, da), (*b, db.into_data())]
            }
            Op::Div { a, b, map } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = g.iter().enumerate().map(|(i, gi)| gi / bv[rhs_at(map, i)]).collect();
                let db_full = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let d = bv[rhs_at(map, i)];
                        -gi * av[i] / (d * d)
                    })
                    .collect();
                let db = reduce_to_rhs(map, db_full, self.shape(*b));
                vec![(*a, da), (*b, db.into_data())]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
            Op::AddScalar { x } => vec![(*x, g.to_vec())],
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                vec![(*x, g.iter().zip(xv).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect())]
            }
            Op::Exp { x } => vec![(*x, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())],
            Op::Log { x } => {
                let xv = self.value(*x).data();
                vec![(*x, g.iter().zip(xv).map(|(gi, xi)| gi / xi).collect())]
            }
            Op::Tanh { x } => vec![(*x, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect())],
            Op::Abs { x } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &xi)| {
                        if xi > 0.0 {
                            *gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                vec![(*x, g.iter().zip(xv).map(|(gi, xi)| 2.0 * gi * xi).collect())]
            }
            Op::ClampMin { x, min } => {
                let xv = self.value(*x).data();
                vec![(*x, g.iter().zip(xv).map(|(gi, xi)| if xi < min { 0.0 } else { *gi }).collect())]
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let factor = if matches!(node.op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g[o * inner + i] * factor;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Max { x, axis, argmax } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = argmax[o * inner + i];
                        dx[(o * n + k) * inner + i] = g[o * inner + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::SumAll { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Transpose { x } => {
                let s = self.shape(*x);
                let r = s.len();
                // g has the transposed layout (cols x rows)
                vec![(*x, transpose_last(g, s[r - 1], s[r - 2]))]
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let n = self.shape(*v)[*axis];
                    let mut dv = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dv.extend_from_slice(&g[start..start + n * inner]);
                    }
                    offset += n;
                    res.push((*v, dv));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxLast { x } => {
                let cols = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::GridSample { features, grid } => self.grid_sample_vjp(*features, *grid, g),
        }
    }

    fn grid_sample_vjp(&self, features: Var, grid: Var, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let fs = self.shape(features);
        let gs = self.shape(grid);
        let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let p = gs[gs.len() - 2];
        let per_sample = gs.len() == 4;
        let fv = self.value(features).data();
        let gv = self.value(grid).data();
        let mut dfeat = vec![0.0; fv.len()];
        let mut dgrid = vec![0.0; gv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for pi in 0..p {
                    let gi = g[(ni * c + ci) * p + pi];
                    if gi == 0.0 {
                        continue;
                    }
                    let g_off = if per_sample { ((ni * c + ci) * p + pi) * 2 } else { (ci * p + pi) * 2 };
                    let pt = grid_point(gv[g_off], gv[g_off + 1], h, w);
                    let i00 = base + pt.y0 * w + pt.x0;
                    let (i01, i10, i11) = (i00 + 1, i00 + w, i00 + w + 1);
                    let (wx, wy) = (pt.wx, pt.wy);
                    dfeat[i00] += gi * (1.0 - wy) * (1.0 - wx);
                    dfeat[i01] += gi * (1.0 - wy) * wx;
                    dfeat[i10] += gi * wy * (1.0 - wx);
                    dfeat[i11] += gi * wy * wx;
                    let d_wx = (1.0 - wy) * (fv[i01] - fv[i00]) + wy * (fv[i11] - fv[i10]);
                    let d_wy = (1.0 - wx) * (fv[i10] - fv[i00]) + wx * (fv[i11] - fv[i01]);
                    dgrid[g_off] += gi * d_wx * pt.dx_scale;
                    dgrid[g_off + 1] += gi * d_wy * pt.dy_scale;
                }
            }
        }
        vec![(features, dfeat), (grid, dgrid)]
    }
}

fn grid_point(gx: f64, gy: f64, h: usize, w: usize) -> GridPoint {
    let (x0, wx, dx_scale) = grid_axis(gx, w);
    let (y0, wy, dy_scale) = grid_axis(gy, h);
    GridPoint {
        x0,
        y0,
        wx,
        wy,
        dx_scale,
        dy_scale,
    }
}

fn bilinear(chan: &[f64], w: usize, pt: &GridPoint) -> f64 {
    let i00 = pt.y0 * w + pt.x0;
    let top = (1.0 - pt.wx) * chan[i00] + pt.wx * chan[i00 + 1];
    let bottom = (1.0 - pt.wx) * chan[i00 + w] + pt.wx * chan[i00 + w + 1];
    (1.0 - pt.wy) * top + pt.wy * bottom
}

/// Transposes each trailing `rows x cols` block of `data`.
fn transpose_last(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}
