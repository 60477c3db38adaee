use std::collections::HashMap;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Fill value for masked attention logits. Finite, yet `exp(-1e30 - max)`
/// underflows to exactly zero in fp64.
pub const NEG_INF_SURROGATE: f64 = -1e30;

pub const LAYERNORM_EPS: f64 = 1e-5;

const L2_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        shared: bool,
    },
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumLastDim(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Softplus(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    L2Normalize(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Tape of primitive applications. Nodes are appended in evaluation order, so
/// every input id is smaller than the id of its consumer.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.leaves.get(&v.0))
    }

    /// Parameters that received a gradient, in id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.leaves.get(&v.0).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

/// `c = op(a) * op(b)` for logical `a: [m, k]`, `b: [k, n]`, row-major `c: [m, n]`.
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sums `g` over the leading dimensions so it matches a broadcast operand of
/// `nb` elements.
fn reduce_to(g: &[f64], nb: usize) -> Vec<f64> {
    let mut out = vec![0.0; nb];
    for chunk in g.chunks(nb) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn leaf_node(&mut self, t: Tensor, tracked: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf_node(t, false)
    }

    /// Tracked input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.leaf_node(t, true)
    }

    /// Leaf for a stored parameter. Each parameter maps to one leaf per graph,
    /// so every use of a shared weight contributes to the same gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let v = self.leaf_node(store.value(id).clone(), store.is_trainable(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        // Untracked results never need their op record.
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b).data();
        let nb = tb.len();
        let data = ta
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(tb).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    /// `a + b`, where `b`'s shape must be a suffix of `a`'s (broadcast over
    /// leading dimensions only).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let v = self.zip_broadcast(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let v = self.zip_broadcast(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let v = self.zip_broadcast(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x * c).collect(),
        };
        self.push("scale", v, Op::Scale(a.0, c), &[a.0])
    }

    /// Matrix product over the last two dimensions. `b` is either a plain
    /// `[k, m]` matrix shared across all leading dimensions of `a`, or has the
    /// same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        let m = sb[sb.len() - 1];
        let shared = sb.len() == 2;
        if !shared && (sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch());
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = m;
        let ta = self.value(a).data();
        let tb = self.value(b).data();
        let mut out = vec![0.0; ta.len() / k * m];
        if shared {
            gemm(ta.len() / k, k, m, ta, false, tb, false, &mut out);
        } else {
            let n = sa[sa.len() - 2];
            for ((ca, cb), co) in ta.chunks(n * k).zip(tb.chunks(k * m)).zip(out.chunks_mut(n * m)) {
                gemm(n, k, m, ca, false, cb, false, co);
            }
        }
        let v = Tensor { shape, data: out };
        self.push("matmul", v, Op::MatMul { a: a.0, b: b.0, shared }, &[a.0, b.0])
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("needs rank >= 2, got {s:?}"),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(r * c).zip(data.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        self.push("transpose", Tensor { shape, data }, Op::Transpose(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(a.0), &[a.0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {s0:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut shape = s0.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            "concat",
            Tensor { shape, data },
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let w = s[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[o * w + start * inner..o * w + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            "slice",
            Tensor { shape, data },
            Op::Slice { a: a.0, axis, start },
            &[a.0],
        )
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(name, v, op, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log(a.0), f64::ln)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu(a.0), gelu)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, Op::Softplus(a.0), softplus)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Sum over the last dimension, which is dropped.
    pub fn sum_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t);
        let data: Vec<f64> = t.data().chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        self.push("sum_lastdim", Tensor { shape, data }, Op::SumLastDim(a.0), &[a.0])
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let v = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        self.push("softmax", v, Op::Softmax(a.0), &[a.0])
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = last_dim(self.value(x));
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let t = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.numel() / d;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: out,
        };
        self.push(
            "layernorm",
            v,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Gathers rows of a `[V, d]` table. The output has shape `prefix ++ [d]`
    /// with `product(prefix) == ids.len()`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("{} ids do not fill prefix {prefix:?}", ids.len()),
            });
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        self.push(
            "embedding_lookup",
            Tensor { shape, data },
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        )
    }

    /// Replaces entries where `mask` is 1 with `value`. The mask is {0,1}-valued
    /// and its shape is a suffix of `a`'s.
    pub fn masked_fill(&mut self, a: Var, mask: &Tensor, value: f64) -> Result<Var> {
        let t = self.value(a);
        if !is_suffix(mask.shape(), t.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(TensorError::Invalid {
                op: "masked_fill",
                msg: "mask must be {0,1}-valued".into(),
            });
        }
        let m: Vec<bool> = mask.data().iter().map(|&x| x == 1.0).collect();
        let nm = m.len();
        let data = t
            .data()
            .chunks(nm)
            .flat_map(|c| c.iter().zip(&m).map(|(&x, &f)| if f { value } else { x }))
            .collect();
        let v = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        self.push("masked_fill", v, Op::MaskedFill { a: a.0, mask: m }, &[a.0])
    }

    /// Scales each row of the last dimension to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let v = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        self.push("l2_normalize", v, Op::L2Normalize(a.0), &[a.0])
    }

    /// Reverse sweep from a scalar `loss`. Visits each node at most once, from
    /// the loss back to the leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(
                    i,
                    Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    },
                );
                continue;
            }
            for (input, contrib) in self.adjoint(i, &g) {
                assert!(input < i, "tape order violated");
                if !self.nodes[input].tracked {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn tracked(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn adjoint(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.tracked(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.tracked(*b) {
                    let mut gb = reduce_to(g, val(*b).len());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                if self.tracked(*a) {
                    let ga = g.iter().enumerate().map(|(k, x)| x * vb[k % nb]).collect();
                    out.push((*a, ga));
                }
                if self.tracked(*b) {
                    let prod: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    out.push((*b, reduce_to(&prod, nb)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|x| x * c).collect())),
            Op::MatMul { a, b, shared } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let sb = tb.shape();
                let (k, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                if *shared {
                    let rows = ta.numel() / k;
                    if self.tracked(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        gemm(rows, m, k, g, false, tb.data(), true, &mut ga);
                        out.push((*a, ga));
                    }
                    if self.tracked(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        gemm(k, rows, m, ta.data(), true, g, false, &mut gb);
                        out.push((*b, gb));
                    }
                } else {
                    let sa = ta.shape();
                    let n = sa[sa.len() - 2];
                    if self.tracked(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        for ((gc, bc), oc) in g.chunks(n * m).zip(tb.data().chunks(k * m)).zip(ga.chunks_mut(n * k)) {
                            gemm(n, m, k, gc, false, bc, true, oc);
                        }
                        out.push((*a, ga));
                    }
                    if self.tracked(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        for ((ac, gc), oc) in ta.data().chunks(n * k).zip(g.chunks(n * m)).zip(gb.chunks_mut(k * m)) {
                            gemm(k, n, m, ac, true, gc, false, oc);
                        }
                        out.push((*b, gb));
                    }
                }
            }
            Op::Transpose(a) => {
                // y has the swapped shape; transposing g back restores a's layout.
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ga = vec![0.0; g.len()];
                for (src, dst) in g.chunks(r * c).zip(ga.chunks_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] = src[i * c + j];
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &inp in inputs {
                    let w = self.nodes[inp].value.shape()[*axis] * inner;
                    if self.tracked(inp) {
                        let mut gi = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                        }
                        out.push((inp, gi));
                    }
                    offset += w;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.nodes[*a].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let w = sa[*axis] * inner;
                let mut ga = vec![0.0; outer * w];
                for o in 0..outer {
                    ga[o * w + start * inner..o * w + (start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, ga));
            }
            Op::Exp(a) => out.push((*a, g.iter().zip(y).map(|(x, e)| x * e).collect())),
            Op::Log(a) => out.push((*a, g.iter().zip(val(*a)).map(|(x, v)| x / v).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::SumLastDim(a) => {
                let d = last_dim(&self.nodes[*a].value);
                out.push((*a, g.iter().flat_map(|&x| std::iter::repeat_n(x, d)).collect()));
            }
            Op::Softmax(a) => {
                let d = last_dim(&node.value);
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), or) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        or[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, ga));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = last_dim(&node.value);
                let gm = val(*gamma);
                if self.tracked(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((gr, hr), or)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            or[j] = rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.tracked(*gamma) {
                    let prod: Vec<f64> = g.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    out.push((*gamma, reduce_to(&prod, d)));
                }
                if self.tracked(*beta) {
                    out.push((*beta, reduce_to(g, d)));
                }
            }
            Op::Gelu(a) => out.push((*a, g.iter().zip(val(*a)).map(|(x, v)| x * gelu_grad(*v)).collect())),
            Op::Softplus(a) => out.push((*a, g.iter().zip(val(*a)).map(|(x, v)| x * sigmoid(*v)).collect())),
            Op::Embedding { table, ids } => {
                let t = &self.nodes[*table].value;
                let d = t.shape()[1];
                let mut gt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                out.push((*table, gt));
            }
            Op::MaskedFill { a, mask } => {
                let nm = mask.len();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| if mask[k % nm] { 0.0 } else { x })
                    .collect();
                out.push((*a, ga));
            }
            Op::L2Normalize(a) => {
                let d = last_dim(&node.value);
                let va = val(*a);
                let mut ga = vec![0.0; g.len()];
                for (((gr, yr), xr), or) in g.chunks(d).zip(y.chunks(d)).zip(va.chunks(d)).zip(ga.chunks_mut(d)) {
                    let n = xr.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        or[j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                out.push((*a, ga));
            }
        }
        out
    }
}
