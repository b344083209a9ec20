use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ExpandLeading(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Pick(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape of tensor operations. Nodes are created in topological
/// order, so the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to the graph's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Applies `f` to every line along `axis`, gathering strided lines into a
/// scratch buffer when the axis is not innermost.
fn for_each_line(shape: &[usize], axis: usize, data: &mut [f64], mut f: impl FnMut(&mut [f64])) {
    let (outer, n, inner) = split_axis(shape, axis);
    if inner == 1 {
        data.chunks_exact_mut(n).for_each(f);
        return;
    }
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for j in 0..n {
                buf[j] = data[base + j * inner];
            }
            f(&mut buf);
            for j in 0..n {
                data[base + j * inner] = buf[j];
            }
        }
    }
}

/// Visits matching lines of two equally shaped buffers.
fn for_each_line_pair(shape: &[usize], axis: usize, a: &[f64], out: &mut [f64], mut f: impl FnMut(&[f64], &mut [f64])) {
    let (outer, n, inner) = split_axis(shape, axis);
    if inner == 1 {
        a.chunks_exact(n).zip(out.chunks_exact_mut(n)).for_each(|(x, y)| f(x, y));
        return;
    }
    let mut xa = vec![0.0; n];
    let mut xo = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for j in 0..n {
                xa[j] = a[base + j * inner];
                xo[j] = out[base + j * inner];
            }
            f(&xa, &mut xo);
            for j in 0..n {
                out[base + j * inner] = xo[j];
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            Op::MatMul(a, b) | Op::BatchMatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Concat(xs, _) => xs.iter().any(|x| self.nodes[x.0].needs_grad),
            Op::Scale(x, _)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::GatherRows(x, _)
            | Op::ExpandLeading(x)
            | Op::LayerNorm(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Slice { x, .. }
            | Op::Pick(x, _)
            | Op::Sum(x) => self.nodes[x.0].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Const, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape(format!("matmul: incompatible shapes {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(m, k, n, ta.data(), tb.data(), &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// Group-wise product of `[g, m, k]` and `[g, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(Error::Shape(format!(
                "batch_matmul: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (g, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            kernels::matmul(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                &tb.data()[i * k * n..],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new(vec![g, m, n], out)?, Op::BatchMatMul(a, b), "batch_matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * c).collect();
        self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::Scale(a, c), "scale")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::Shape(format!("transpose: need at least 2 axes, got {:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..ta.ndim()).collect::<Vec<_>>() {
            return Err(Error::Shape(format!("permute: {perm:?} is not a permutation of {:?}", ta.shape())));
        }
        let (shape, data) = permute_data(ta.data(), ta.shape(), perm);
        self.push(Tensor::new(shape, data)?, Op::Permute(a, perm.to_vec()), "permute")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(Error::Shape(format!("reshape: cannot view {:?} as {shape:?}", ta.shape())));
        }
        let t = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Selects rows (first-axis slices) of `table`; used for embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.ndim() == 0 {
            return Err(Error::Shape("gather_rows: table must have at least one axis".into()));
        }
        let rows = tt.shape()[0];
        let row = tt.numel() / rows.max(1);
        let mut out = Vec::with_capacity(ids.len() * row);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!("gather_rows: row {id} out of range for shape {:?}", tt.shape())));
            }
            out.extend_from_slice(&tt.data()[id * row..(id + 1) * row]);
        }
        let mut shape = tt.shape().to_vec();
        shape[0] = ids.len();
        self.push(Tensor::new(shape, out)?, Op::GatherRows(table, ids.to_vec()), "gather_rows")
    }

    /// Repeats `a` along a new leading axis of size `n`.
    pub fn expand_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        let ta = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(ta.shape());
        let mut out = Vec::with_capacity(n * ta.numel());
        for _ in 0..n {
            out.extend_from_slice(ta.data());
        }
        self.push(Tensor::new(shape, out)?, Op::ExpandLeading(a), "expand_leading")
    }

    /// Normalizes over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let d = *ta.shape().last().ok_or_else(|| Error::Shape("layer_norm: scalar input".into()))?;
        let rows = ta.numel() / d.max(1);
        let mut xhat = vec![0.0; ta.numel()];
        let mut inv = vec![0.0; rows];
        kernels::layer_norm_rows(ta.data(), d, eps, &mut xhat, &mut inv);
        self.push(Tensor::new(ta.shape().to_vec(), xhat)?, Op::LayerNorm(a, inv), "layer_norm")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::Gelu(a), "gelu")
    }

    fn check_axis(&self, op: &str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.value(a).ndim() {
            return Err(Error::Shape(format!("{op}: axis {axis} out of range for {:?}", self.shape(a))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let mut t = self.value(a).clone();
        let shape = t.shape().to_vec();
        for_each_line(&shape, axis, t.data_mut(), kernels::softmax_in_place);
        self.push(t, Op::Softmax(a, axis), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let mut t = self.value(a).clone();
        let shape = t.shape().to_vec();
        for_each_line(&shape, axis, t.data_mut(), kernels::log_softmax_in_place);
        self.push(t, Op::LogSoftmax(a, axis), "log_softmax")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat: shapes {base:?} and {s:?} differ off axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis), "concat")
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let ta = self.value(a);
        if start > end || end > ta.shape()[axis] {
            return Err(Error::Shape(format!(
                "slice: [{start}, {end}) out of range on axis {axis} of {:?}",
                ta.shape()
            )));
        }
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let mut shape = ta.shape().to_vec();
        shape[axis] = end - start;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&ta.data()[base + start * inner..base + end * inner]);
        }
        self.push(Tensor::new(shape, out)?, Op::Slice { x: a, axis, start }, "slice")
    }

    /// `out[i] = a[i, idx[i]]` for a 2-D `a`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 2 || ta.shape()[0] != idx.len() {
            return Err(Error::Shape(format!("pick: {} indices for shape {:?}", idx.len(), ta.shape())));
        }
        let cols = ta.shape()[1];
        let mut out = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::Shape(format!("pick: column {c} out of range for shape {:?}", ta.shape())));
            }
            out.push(ta.data()[r * cols + c]);
        }
        self.push(Tensor::new(vec![idx.len()], out)?, Op::Pick(a, idx.to_vec()), "pick")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Shape("mean: empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.numel() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", rt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: leaf_grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(m, n, k, g, tb.data(), &mut da);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), 1, k as isize, g, n as isize, 1, 0.0, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (gs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if self.wants(*a) {
                    let mut da = vec![0.0; gs * m * k];
                    for i in 0..gs {
                        kernels::matmul_nt(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            &tb.data()[i * k * n..],
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; gs * k * n];
                    for i in 0..gs {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &ta.data()[i * m * k..],
                            1,
                            k as isize,
                            &g[i * m * n..],
                            n as isize,
                            1,
                            0.0,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(g, out.shape(), &inverse);
                accumulate(grads, *a, back);
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::GatherRows(table, ids) => {
                let tt = self.value(*table);
                let row = tt.numel() / tt.shape()[0].max(1);
                let mut dt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, s) in dt[id * row..(id + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]) {
                        *d += s;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::ExpandLeading(a) => {
                let n = self.value(*a).numel();
                let mut da = vec![0.0; n];
                for chunk in g.chunks_exact(n.max(1)) {
                    da.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm(a, inv) => {
                let d = *out.shape().last().unwrap();
                let mut da = vec![0.0; out.numel()];
                for (r, ((xh, gy), dx)) in
                    out.data().chunks_exact(d).zip(g.chunks_exact(d)).zip(da.chunks_exact_mut(d)).enumerate()
                {
                    let mean_g = gy.iter().sum::<f64>() / d as f64;
                    let mean_gx = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[j] = inv[r] * (gy[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, g.iter().zip(ta.data()).map(|(gy, &x)| gy * kernels::gelu_grad(x)).collect());
            }
            Op::Softmax(a, axis) => {
                let mut da = g.to_vec();
                for_each_line_pair(out.shape(), *axis, out.data(), &mut da, |y, dy| {
                    let s: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dy.iter_mut().zip(y) {
                        *d = yv * (*d - s);
                    }
                });
                accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a, axis) => {
                let mut da = g.to_vec();
                for_each_line_pair(out.shape(), *axis, out.data(), &mut da, |y, dy| {
                    let s: f64 = dy.iter().sum();
                    for (d, &yv) in dy.iter_mut().zip(y) {
                        *d -= yv.exp() * s;
                    }
                });
                accumulate(grads, *a, da);
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total_block = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let block = self.shape(x)[*axis] * inner;
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * total_block + offset;
                            dx.extend_from_slice(&g[base..base + block]);
                        }
                        accumulate(grads, x, dx);
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Pick(a, idx) => {
                let ta = self.value(*a);
                let cols = ta.shape()[1];
                let mut da = vec![0.0; ta.numel()];
                for (r, &c) in idx.iter().enumerate() {
                    da[r * cols + c] += g[r];
                }
                accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
        }
    }
}
