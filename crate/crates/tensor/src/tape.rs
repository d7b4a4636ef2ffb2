//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every op appends one node. A node requires grad iff any of its inputs
//! does; nodes that do not require grad are never visited by `backward`.

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::kernels;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_transposed: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    GatherElements {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order, which is already a topological
/// order: an op can only consume nodes that exist when it is recorded.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Checked tape: non-finite values and logs of non-positive inputs are errors.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` root(s) w.r.t. `v`.
    /// `None` for nodes that do not require grad.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes with index in `nodes` holding a gradient.
    pub fn grads_in(&self, nodes: std::ops::Range<usize>) -> usize {
        self.grads.get(nodes).map_or(0, |g| g.iter().filter(|g| g.is_some()).count())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.requires_grad;
        }
        Ok(any)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let rg = self.rg(&[a, b])?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        self.push(value, op, rg, name)
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let rg = self.rg(&[x])?;
        let vx = &self.nodes[x.0].value;
        let value = Array::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    /// Adds a vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.node(x)?.value.shape().to_vec(), self.node(bias)?.value.shape().to_vec());
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let rg = self.rg(&[x, bias])?;
        let b = self.nodes[bias.0].value.data();
        let mut data = self.nodes[x.0].value.data().to_vec();
        for row in data.chunks_mut(b.len()) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push(Array::new(xs, data)?, Op::AddBias(x, bias), rg, "add_bias")
    }

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape().to_vec(), self.node(b)?.value.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b])?;
        self.push(Array::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg, "matmul")
    }

    /// `[B,m,k] · [B,k,n] → [B,m,n]`, or with `b_transposed`,
    /// `[B,m,k] · [B,n,k]ᵀ → [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape().to_vec(), self.node(b)?.value.shape().to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if b_transposed { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if b_transposed { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            for i in 0..batch {
                let ab = &da[i * m * k..(i + 1) * m * k];
                let bb = &db[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if b_transposed {
                    kernels::matmul_bt_acc(ab, bb, ob, m, k, n);
                } else {
                    kernels::matmul_acc(ab, bb, ob, m, k, n);
                }
            }
        }
        let rg = self.rg(&[a, b])?;
        let op = Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_transposed,
        };
        self.push(Array::new(vec![batch, m, n], out)?, op, rg, "batch_matmul")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        for &p in perm {
            if p >= shape.len() || seen[p] {
                return Err(TensorError::BadAxis {
                    op: "permute",
                    axis: p,
                    rank: shape.len(),
                });
            }
            seen[p] = true;
        }
        if perm.len() != shape.len() {
            return Err(TensorError::BadAxis {
                op: "permute",
                axis: perm.len(),
                rank: shape.len(),
            });
        }
        let (out_shape, data) = kernels::permute(self.nodes[x.0].value.data(), &shape, perm);
        let rg = self.rg(&[x])?;
        self.push(Array::new(out_shape, data)?, Op::Permute(x, perm.to_vec()), rg, "permute")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.reshape(shape)?;
        let rg = self.rg(&[x])?;
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), "exp", f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.checked {
            if let Some((index, &value)) = self.node(x)?.value.data().iter().enumerate().find(|(_, &v)| v <= 0.0) {
                return Err(TensorError::NonPositiveLog { index, value });
            }
        }
        self.map(x, Op::Log(x), "log", f64::ln)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), "gelu", kernels::gelu)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[x])?;
        self.push(Array::new(out_shape, out)?, Op::SumAxis { x, outer, len, inner }, rg, "sum_axis")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().sum();
        let rg = self.rg(&[x])?;
        self.push(Array::scalar(s), Op::SumAll(x), rg, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let (_, cols) = vx.rows_cols();
        let value = Array::new(vx.shape().to_vec(), kernels::softmax_rows(vx.data(), cols))?;
        let rg = self.rg(&[x])?;
        self.push(value, Op::Softmax(x), rg, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let (_, cols) = vx.rows_cols();
        let value = Array::new(vx.shape().to_vec(), kernels::log_softmax_rows(vx.data(), cols))?;
        let rg = self.rg(&[x])?;
        self.push(value, Op::LogSoftmax(x), rg, "log_softmax")
    }

    /// Selects rows of a `[N, d]` table: result is `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.node(table)?.value.shape().to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(TensorError::InvalidShape {
                shape,
                len: ids.len(),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let src = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table])?;
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push(Array::new(vec![ids.len(), d], out)?, op, rg, "gather_rows")
    }

    /// Selects elements by flat index: result is `[idx.len()]`.
    pub fn gather_elements(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.node(x)?.value.data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(*src.get(i).ok_or(TensorError::IndexOutOfRange {
                op: "gather_elements",
                index: i,
                bound: src.len(),
            })?);
        }
        let value = Array::new(vec![idx.len()], out)?;
        let rg = self.rg(&[x])?;
        self.push(value, Op::GatherElements { x, idx: idx.to_vec() }, rg, "gather_elements")
    }

    /// Stacks two `[n, d]` tables vertically.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape().to_vec(), self.node(b)?.value.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        data.extend_from_slice(self.nodes[b.0].value.data());
        let rg = self.rg(&[a, b])?;
        self.push(Array::new(vec![sa[0] + sb[0], sa[1]], data)?, Op::ConcatRows(a, b), rg, "concat_rows")
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let (gs, bs) = (self.node(gamma)?.value.shape().to_vec(), self.node(beta)?.value.shape().to_vec());
        let d = *xs.last().unwrap_or(&1);
        if gs != [d] || bs != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: gs,
            });
        }
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta])?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(Array::new(xs, out)?, op, rg, "layer_norm")
    }

    /// Same value as `x`, but no gradient flows back through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.clone();
        self.push(value, Op::StopGradient, false, "stop_gradient")
    }

    /// Reverse sweep from a scalar `root`. Gradients accumulate into the
    /// existing accumulators; call [`Tape::zero_grad`] between roots when
    /// accumulation is not wanted.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.node(root)?.value;
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut local: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root.0].requires_grad {
            local[root.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            self.backprop_node(i, &g, &mut local);
            // Keep the node's own gradient for inspection.
            local[i] = Some(g);
        }
        for (i, g) in local.into_iter().enumerate() {
            let node = &self.nodes[i];
            let g = match g {
                Some(g) => g,
                None if node.requires_grad && matches!(node.op, Op::Leaf) => vec![0.0; node.value.numel()],
                None => continue,
            };
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                slot @ None => *slot = Some(Array::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        fn slot(local: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            local[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let len_of = |v: Var| nodes[v.0].value.numel();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        let s = slot(local, v, len_of(v));
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        let s = slot(local, v, len_of(v));
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b);
                    let s = slot(local, *a, len_of(*a));
                    for ((s, g), o) in s.iter_mut().zip(g).zip(other) {
                        *s += g * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a);
                    let s = slot(local, *b, len_of(*b));
                    for ((s, g), o) in s.iter_mut().zip(g).zip(other) {
                        *s += g * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                let s = slot(local, *x, len_of(*x));
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    let s = slot(local, *x, len_of(*x));
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if wants(*bias) {
                    let d = len_of(*bias);
                    let s = slot(local, *bias, d);
                    for row in g.chunks(d) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if wants(*a) {
                    let bv = val(*b);
                    kernels::matmul_bt_acc(g, bv, slot(local, *a, m * k), *m, *n, *k);
                }
                if wants(*b) {
                    let av = val(*a);
                    kernels::matmul_at_acc(av, g, slot(local, *b, k * n), *m, *k, *n);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_transposed,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let bv = val(*b);
                    let s = slot(local, *a, batch * m * k);
                    for t in 0..*batch {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let bb = &bv[t * k * n..(t + 1) * k * n];
                        let sb = &mut s[t * m * k..(t + 1) * m * k];
                        if *b_transposed {
                            // b is [n,k]: dA = g · b
                            kernels::matmul_acc(gb, bb, sb, m, n, k);
                        } else {
                            kernels::matmul_bt_acc(gb, bb, sb, m, n, k);
                        }
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let s = slot(local, *b, batch * k * n);
                    for t in 0..*batch {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let ab = &av[t * m * k..(t + 1) * m * k];
                        let sb = &mut s[t * k * n..(t + 1) * k * n];
                        if *b_transposed {
                            // dB[n,k] = gᵀ · a
                            kernels::matmul_at_acc(gb, ab, sb, m, n, k);
                        } else {
                            kernels::matmul_at_acc(ab, gb, sb, m, k, n);
                        }
                    }
                }
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (_, back) = kernels::permute(g, nodes[i].value.shape(), &inv);
                let s = slot(local, *x, len_of(*x));
                s.iter_mut().zip(&back).for_each(|(s, g)| *s += g);
            }
            Op::Reshape(x) => {
                let s = slot(local, *x, len_of(*x));
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            Op::Exp(x) => {
                let s = slot(local, *x, len_of(*x));
                for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                    *s += g * y;
                }
            }
            Op::Log(x) => {
                let xv = val(*x);
                let s = slot(local, *x, len_of(*x));
                for ((s, g), xv) in s.iter_mut().zip(g).zip(xv) {
                    *s += g / xv;
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let s = slot(local, *x, len_of(*x));
                for ((s, g), xv) in s.iter_mut().zip(g).zip(xv) {
                    *s += g * kernels::gelu_grad(*xv);
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                let s = slot(local, *x, len_of(*x));
                for o in 0..*outer {
                    for a in 0..*len {
                        let base = (o * len + a) * inner;
                        for j in 0..*inner {
                            s[base + j] += g[o * inner + j];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let s = slot(local, *x, len_of(*x));
                s.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Softmax(x) => {
                let cols = nodes[i].value.rows_cols().1;
                let s = slot(local, *x, len_of(*x));
                for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += y * (g - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = nodes[i].value.rows_cols().1;
                let s = slot(local, *x, len_of(*x));
                for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let total: f64 = grow.iter().sum();
                    for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += g - y.exp() * total;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                let s = slot(local, *table, len_of(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut s[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(s, g)| *s += g);
                }
            }
            Op::GatherElements { x, idx } => {
                let s = slot(local, *x, len_of(*x));
                for (j, &k) in idx.iter().enumerate() {
                    s[k] += g[j];
                }
            }
            Op::ConcatRows(a, b) => {
                let na = len_of(*a);
                if wants(*a) {
                    let s = slot(local, *a, na);
                    s.iter_mut().zip(&g[..na]).for_each(|(s, g)| *s += g);
                }
                if wants(*b) {
                    let s = slot(local, *b, len_of(*b));
                    s.iter_mut().zip(&g[na..]).for_each(|(s, g)| *s += g);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = len_of(*gamma);
                if wants(*x) {
                    let gv = val(*gamma);
                    let s = slot(local, *x, len_of(*x));
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        for j in 0..d {
                            s[r * d + j] += rs * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                if wants(*gamma) {
                    let s = slot(local, *gamma, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*beta) {
                    let s = slot(local, *beta, d);
                    for grow in g.chunks(d) {
                        s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                    }
                }
            }
        }
    }
}
