use super::{Result, Tensor, TensorError};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    IndexSelect { input: Var, indices: Vec<usize> },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    LogSumExp { input: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    LayerNorm { input: Var, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, so the tape is always a valid
/// topological order. Gradients accumulate across [`Graph::backward`] calls
/// until [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// (outer, len, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

enum Broadcast {
    Same,
    /// Right operand repeats along the leading axes of the left one.
    Right,
    Left,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Broadcast::Right)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Broadcast::Left)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
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

    /// Registers a tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, absent for untracked nodes or nodes never reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                detail: format!("expected rank 2, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    // ---- elementwise binary ---------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let mode = broadcast(name, self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.data(), tb.data());
        let (shape, data): (Vec<usize>, Vec<f64>) = match mode {
            Broadcast::Same => (
                ta.shape().to_vec(),
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Right => (
                ta.shape().to_vec(),
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[i % db.len()]))
                    .collect(),
            ),
            Broadcast::Left => (
                tb.shape().to_vec(),
                db.iter()
                    .enumerate()
                    .map(|(i, &y)| f(da[i % da.len()], y))
                    .collect(),
            ),
        };
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise sum; the lower-rank operand may repeat along leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(pos) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: format!("zero divisor at flat index {pos}"),
            });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    // ---- elementwise unary ----------------------------------------------

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Shift(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// Square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v.is_nan() || v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Sqrt(x), f64::sqrt))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let s = self.shape(x).to_vec();
        if start >= end || end > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                detail: format!("range {start}..{end} invalid for axis {axis} of {s:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let width = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Slice { input: x, axis, start }, &[x]))
    }

    /// Gathers entries along axis 0; indices may repeat.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "index_select",
                detail: format!("need rank >= 1 and indices, got shape {s:?}"),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Invalid {
                op: "index_select",
                detail: format!("index {bad} out of range for axis length {}", s[0]),
            });
        }
        let row: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                input: x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    // ---- normalizations and reductions ---------------------------------

    fn along_axis(&self, x: Var, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        let mut lane = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..len {
                    lane[l] = src[(o * len + l) * inner + i];
                }
                f(&lane, &mut res);
                for l in 0..len {
                    out[(o * len + l) * inner + i] = res[l];
                }
            }
        }
        Tensor::new(t.shape(), out).expect("shape preserved")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let value = self.along_axis(x, axis, |lane, out| {
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = (v - m).exp();
                s += *o;
            }
            out.iter_mut().for_each(|o| *o /= s);
        });
        Ok(self.push(value, Op::Softmax { input: x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let value = self.along_axis(x, axis, |lane, out| {
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = v - lse;
            }
        });
        Ok(self.push(value, Op::LogSoftmax { input: x, axis }, &[x]))
    }

    /// log Σ exp along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| src[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = m + (0..len).map(|l| (at(l) - m).exp()).sum::<f64>().ln();
            }
        }
        let value = Tensor::new(&reduced_shape(t.shape(), axis), out)?;
        Ok(self.push(value, Op::LogSumExp { input: x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    fn reduce_axis(&self, x: Var, axis: usize, scale: f64) -> Result<Tensor> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Tensor::new(&reduced_shape(t.shape(), axis), out)
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let value = self.reduce_axis(x, axis, 1.0)?;
        Ok(self.push(value, Op::SumAxis { input: x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let len = self.shape(x)[axis] as f64;
        let value = self.reduce_axis(x, axis, 1.0 / len)?;
        Ok(self.push(value, Op::MeanAxis { input: x, axis }, &[x]))
    }

    /// Normalizes each lane of the last axis to zero mean and unit variance
    /// (population variance plus `eps`). No affine transform.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::Axis {
                op: "layer_norm",
                axis: 0,
                rank: 0,
            });
        }
        let d = *t.shape().last().unwrap();
        let mut out = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.numel() / d);
        for row in t.data().chunks_exact(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            out.extend(row.iter().map(|v| (v - mu) * r));
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { input: x, inv_std }, &[x]))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = pass[idx].take() else { continue };
            self.propagate(idx, &g, &mut pass);
            let node_shape = self.nodes[idx].value.shape();
            match &mut self.grads[idx] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += b),
                slot => *slot = Some(Tensor::new(node_shape, g).expect("grad shape")),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let slot = pass[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = da[i * k + p];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let (la, lb) = (da.len(), db.len());
                let kind = &node.op;
                acc(*a, &mut |ga| {
                    for (i, &gv) in g.iter().enumerate() {
                        let y = db[i % lb];
                        ga[i % la] += match kind {
                            Op::Add(..) | Op::Sub(..) => gv,
                            Op::Mul(..) => gv * y,
                            _ => gv / y,
                        };
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        let (x, y) = (da[i % la], db[i % lb]);
                        gb[i % lb] += match kind {
                            Op::Add(..) => gv,
                            Op::Sub(..) => -gv,
                            Op::Mul(..) => gv * x,
                            _ => -gv * x / (y * y),
                        };
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, &gv)| *o += c * gv)
            }),
            Op::Shift(x) | Op::Reshape(x) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv)
            }),
            Op::Neg(x) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, &gv)| *o -= gv)
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * y;
                }
            }),
            Op::Log(x) => {
                let dx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(dx) {
                        *o += gv / xv;
                    }
                })
            }
            Op::Sqrt(x) => acc(*x, &mut |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                    if y > 0.0 {
                        *o += gv * 0.5 / y;
                    }
                }
            }),
            Op::Relu(x) => {
                let dx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(dx) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                })
            }
            Op::Gelu(x) => {
                let dx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(dx) {
                        *o += gv * gelu_grad(xv);
                    }
                })
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let out_block = node.value.shape()[*axis] * inner;
                for &v in inputs {
                    let block = nodes[v.0].value.shape()[*axis] * inner;
                    acc(v, &mut |gx| {
                        for o in 0..outer {
                            let src = &g[o * out_block + offset..o * out_block + offset + block];
                            for (d, &s) in gx[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let width = node.value.shape()[*axis];
                acc(*input, &mut |gx| {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        for t in 0..width * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                })
            }
            Op::IndexSelect { input, indices } => {
                let row = node.value.numel() / indices.len();
                acc(*input, &mut |gx| {
                    for (r, &i) in indices.iter().enumerate() {
                        for t in 0..row {
                            gx[i * row + t] += g[r * row + t];
                        }
                    }
                })
            }
            Op::Softmax { input, axis } | Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let is_log = matches!(node.op, Op::LogSoftmax { .. });
                acc(*input, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            if is_log {
                                let gsum: f64 = (0..len).map(|l| g[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += g[at(l)] - out[at(l)].exp() * gsum;
                                }
                            } else {
                                let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += out[at(l)] * (g[at(l)] - dot);
                                }
                            }
                        }
                    }
                })
            }
            Op::LogSumExp { input, axis } => {
                let (outer, len, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let dx = val(*input);
                acc(*input, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for l in 0..len {
                                let at = (o * len + l) * inner + i;
                                gx[at] += g[r] * (dx[at] - out[r]).exp();
                            }
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n))
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let (outer, len, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                acc(*input, &mut |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::LayerNorm { input, inv_std } => {
                let d = *node.value.shape().last().unwrap();
                acc(*input, &mut |gx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let rows = r * d..(r + 1) * d;
                        let (gr, yr) = (&g[rows.clone()], &out[rows.clone()]);
                        let gmean = gr.iter().sum::<f64>() / d as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, &gv), &y) in gx[rows].iter_mut().zip(gr).zip(yr) {
                            *o += is * (gv - gmean - y * gy);
                        }
                    }
                })
            }
        }
    }
}
