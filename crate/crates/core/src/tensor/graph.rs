//! Tape of recorded ops. Nodes are appended in creation order, which is a
//! topological order, so backward is a single reverse sweep.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
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
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        v: usize,
    },
    MulRow {
        x: usize,
        v: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Silu(usize),
    Tanh(usize),
    Relu(usize),
    Softmax {
        x: usize,
        cols: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        inverse: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: usize,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
        width: usize,
    },
    GatherLast {
        x: usize,
        idx: Vec<usize>,
        in_last: usize,
    },
    Expand {
        x: usize,
        times: usize,
    },
    Fwht(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        cols: usize,
    },
    Sum(usize),
    SumSq(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Dynamically recorded computation graph.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

fn permute_copy<T: Copy>(src: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// In-place unnormalized fast Walsh–Hadamard transform of every contiguous
/// run of `n` values.
pub(crate) fn fwht_rows<T: Real>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        let mut h = 1;
        while h < n {
            for block in (0..n).step_by(2 * h) {
                for i in block..block + h {
                    let (a, b) = (row[i], row[i + h]);
                    row[i] = a + b;
                    row[i + h] = a - b;
                }
            }
            h *= 2;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last backward pass, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, name: &'static str, value: Tensor<T>, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// `a[.., k] · b[k, n]`; leading dims of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || last_dim(&sa) != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (leading(&sa), sb[0], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        self.derived("matmul", value, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for t in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &ad[t * m * k..(t + 1) * m * k],
                k as isize,
                1,
                &bd[t * k * n..(t + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[t * m * n..(t + 1) * m * n],
                n as isize,
                1,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.derived(
            "bmm",
            value,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a.0, b.0],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.derived(name, value, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, v: Var, is_mul: bool) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(v) != [n] {
            return Err(Error::shape(name, format!("{:?} with {:?}", self.shape(x), self.shape(v))));
        }
        let vd = self.data(v);
        let out: Vec<T> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| {
                row.iter()
                    .zip(vd)
                    .map(move |(&a, &b)| if is_mul { a * b } else { a + b })
            })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = if is_mul {
            Op::MulRow { x: x.0, v: v.0 }
        } else {
            Op::AddRow { x: x.0, v: v.0 }
        };
        self.derived(name, value, op, &[x.0, v.0])
    }

    /// `x[.., n] + v[n]` broadcast over leading dims.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, v, false)
    }

    /// `x[.., n] ⊙ v[n]` broadcast over leading dims.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, v, true)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ct = T::of(c);
        let out: Vec<T> = self.data(x).iter().map(|&v| v * ct).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.derived("scale", value, Op::Scale { x: x.0, c }, &[x.0])
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.derived(name, value, op, &[x.0])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map("silu", x, Op::Silu(x.0), |v| T::of(v.f64() * sigmoid(v.f64())))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, Op::Tanh(x.0), |v| v.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x.0), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Softmax over the last dimension, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let cols = last_dim(self.shape(x));
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| T::of(e / total)));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.derived("softmax_rows", value, Op::Softmax { x: x.0, cols }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.derived("reshape", value, Op::Reshape(x.0), &[x.0])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{shape:?} by {perm:?}")));
        }
        let out = permute_copy(self.data(x), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = Tensor::new(out_shape, out)?;
        self.derived("permute", value, Op::Permute { x: x.0, inverse }, &[x.0])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(x))));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{first:?} with {s:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let chunk = sz * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.derived(
            "concat",
            value,
            Op::Concat {
                parts: ids.clone(),
                sizes,
                outer,
                inner,
            },
            &ids,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape("slice", format!("{shape:?} axis {axis} [{start}, {})", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.derived(
            "slice",
            value,
            Op::Slice {
                x: x.0,
                outer,
                axis_len,
                start,
                len,
                inner,
            },
            &[x.0],
        )
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("gather_rows", format!("{} ids into {shape:?}", ids.len())));
        }
        let width = shape[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(vec![ids.len(), width], out)?;
        self.derived(
            "gather_rows",
            value,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
                width,
            },
            &[table.0],
        )
    }

    /// Selects entries `idx` along the last dimension.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let in_last = last_dim(&shape);
        if idx.is_empty() || idx.iter().any(|&i| i >= in_last) {
            return Err(Error::shape("gather_last", format!("{idx:?} into {shape:?}")));
        }
        let out: Vec<T> = self
            .data(x)
            .chunks(in_last)
            .flat_map(|row| idx.iter().map(move |&i| row[i]))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty shape") = idx.len();
        let value = Tensor::new(out_shape, out)?;
        self.derived(
            "gather_last",
            value,
            Op::GatherLast {
                x: x.0,
                idx: idx.to_vec(),
                in_last,
            },
            &[x.0],
        )
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn expand(&mut self, x: Var, times: usize) -> Result<Var> {
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(shape, out)?;
        self.derived("expand", value, Op::Expand { x: x.0, times }, &[x.0])
    }

    /// Unnormalized Walsh–Hadamard transform along the last dimension.
    pub fn fwht(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(n));
        }
        let mut value = self.value(x).clone();
        fwht_rows(value.data_mut(), n);
        self.derived("fwht", value, Op::Fwht(x.0), &[x.0])
    }

    /// Mean negative log-softmax of `logits[i, targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", format!("{shape:?} with {} targets", targets.len())));
        }
        let cols = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::TargetOutOfRange { target: t, classes: cols });
        }
        let mut total = 0.0f64;
        for (row, &t) in self.data(logits).chunks(cols).zip(targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].f64();
        }
        let value = Tensor::scalar(T::of(total / targets.len() as f64));
        self.derived(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                cols,
            },
            &[logits.0],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().map(|v| v.f64()).sum();
        self.derived("sum", Tensor::scalar(T::of(total)), Op::Sum(x.0), &[x.0])
    }

    /// Sum of squares of all entries.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().map(|v| v.f64() * v.f64()).sum();
        self.derived("sum_sq", Tensor::scalar(T::of(total)), Op::SumSq(x.0), &[x.0])
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// node that requires one and is reachable from the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(gout) = rest[0].as_deref() else {
                continue;
            };
            self.backprop(i, gout, before);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if nodes[j].requires_grad {
                let slot = grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.numel()]);
                f(slot);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &mut |da| {
                    T::gemm(m, n, k, g, n as isize, 1, val(b), 1, n as isize, T::one(), da, k as isize, 1)
                });
                acc(b, &mut |db| {
                    T::gemm(k, m, n, val(a), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1)
                });
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |da| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        // dA = dC·Bᵀ, or dC·B when B was stored transposed.
                        let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(m, n, k, gt, n as isize, 1, bt, rs, cs, T::one(), &mut da[t * m * k..(t + 1) * m * k], k as isize, 1);
                    }
                });
                acc(b, &mut |db| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // dB[n×k] = dCᵀ·A
                            T::gemm(n, m, k, gt, 1, n as isize, at, k as isize, 1, T::one(), dbt, k as isize, 1);
                        } else {
                            // dB[k×n] = Aᵀ·dC
                            T::gemm(k, m, n, at, 1, k as isize, gt, n as isize, 1, T::one(), dbt, n as isize, 1);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).zip(val(b)).for_each(|((d, &g), &y)| *d += g * y));
                acc(b, &mut |d| d.iter_mut().zip(g).zip(val(a)).for_each(|((d, &g), &x)| *d += g * x));
            }
            &Op::AddRow { x, v } => {
                acc(x, &mut |d| add_into(d, g));
                acc(v, &mut |d| {
                    let n = d.len();
                    let mut sums = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        sums.iter_mut().zip(row).for_each(|(s, r)| *s += r.f64());
                    }
                    d.iter_mut().zip(&sums).for_each(|(d, s)| *d += T::of(*s));
                });
            }
            &Op::MulRow { x, v } => {
                let vd = val(v);
                let n = vd.len();
                acc(x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        drow.iter_mut().zip(grow).zip(vd).for_each(|((d, &g), &y)| *d += g * y);
                    }
                });
                acc(v, &mut |d| {
                    let mut sums = vec![0.0f64; n];
                    for (grow, xrow) in g.chunks(n).zip(val(x).chunks(n)) {
                        for j in 0..n {
                            sums[j] += grow[j].f64() * xrow[j].f64();
                        }
                    }
                    d.iter_mut().zip(&sums).for_each(|(d, s)| *d += T::of(*s));
                });
            }
            &Op::Scale { x, c } => {
                let ct = T::of(c);
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * ct));
            }
            &Op::Silu(x) => acc(x, &mut |d| {
                for ((d, &g), &xv) in d.iter_mut().zip(g).zip(val(x)) {
                    let s = sigmoid(xv.f64());
                    *d += g * T::of(s * (1.0 + xv.f64() * (1.0 - s)));
                }
            }),
            &Op::Tanh(x) => {
                let y = val(i);
                acc(x, &mut |d| d.iter_mut().zip(g).zip(y).for_each(|((d, &g), &y)| *d += g * (T::one() - y * y)));
            }
            &Op::Relu(x) => acc(x, &mut |d| {
                for ((d, &g), &xv) in d.iter_mut().zip(g).zip(val(x)) {
                    if xv > T::zero() {
                        *d += g;
                    }
                }
            }),
            &Op::Softmax { x, cols } => {
                let y = val(i);
                acc(x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g.f64() * y.f64()).sum();
                        for j in 0..cols {
                            drow[j] += T::of(yrow[j].f64() * (grow[j].f64() - dot));
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |d| add_into(d, g)),
            Op::Permute { x, inverse } => {
                let out_shape = nodes[i].value.shape();
                let back = permute_copy(g, out_shape, inverse);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::Concat {
                parts,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum::<usize>() * inner;
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    let chunk = sz * inner;
                    acc(p, &mut |d| {
                        for o in 0..*outer {
                            add_into(&mut d[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Slice {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => acc(x, &mut |d| {
                for o in 0..outer {
                    let base = (o * axis_len + start) * inner;
                    add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }),
            Op::GatherRows { table, ids, width } => acc(*table, &mut |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }),
            Op::GatherLast { x, idx, in_last } => acc(*x, &mut |d| {
                for (drow, grow) in d.chunks_mut(*in_last).zip(g.chunks(idx.len())) {
                    for (&j, &gv) in idx.iter().zip(grow) {
                        drow[j] += gv;
                    }
                }
            }),
            &Op::Expand { x, times } => acc(x, &mut |d| {
                let n = d.len();
                for t in 0..times {
                    add_into(d, &g[t * n..(t + 1) * n]);
                }
            }),
            &Op::Fwht(x) => {
                let n = last_dim(nodes[i].value.shape());
                let mut back = g.to_vec();
                fwht_rows(&mut back, n);
                acc(x, &mut |d| add_into(d, &back));
            }
            Op::CrossEntropy { logits, targets, cols } => {
                let scale = g[0].f64() / targets.len() as f64;
                let z = val(*logits);
                acc(*logits, &mut |d| {
                    for ((drow, zrow), &t) in d.chunks_mut(*cols).zip(z.chunks(*cols)).zip(targets) {
                        let max = zrow.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
                        let exps: Vec<f64> = zrow.iter().map(|v| (v.f64() - max).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        for j in 0..*cols {
                            let p = exps[j] / total - if j == t { 1.0 } else { 0.0 };
                            drow[j] += T::of(p * scale);
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let gv = g[0];
                acc(x, &mut |d| d.iter_mut().for_each(|d| *d += gv));
            }
            &Op::SumSq(x) => {
                let two_g = g[0] + g[0];
                acc(x, &mut |d| d.iter_mut().zip(val(x)).for_each(|(d, &v)| *d += two_g * v));
            }
        }
    }
}
