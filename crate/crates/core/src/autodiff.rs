//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Values are computed eagerly when a node is recorded. Only nodes that
//! (transitively) depend on a [`Graph::variable`] take part in the backward
//! sweep, so constant subgraphs such as text features cost nothing extra.

use crate::numerics::{filter_plane, filter_plane_adjoint, softmax_in_place, GaussianSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    Min(NodeId, NodeId),
    SoftmaxRows(NodeId, f64),
    Cols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    MaxAll(NodeId, usize),
    MaxOf(Vec<NodeId>, usize),
    Mean(Vec<NodeId>),
    Filter(NodeId, usize, usize, GaussianSpec),
    AddRows(NodeId, NodeId, Vec<usize>, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros shaped like `like` when `id` was unreachable.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("graph op produced consistent shape")
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn as_matrix(t: Tensor) -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        if t.rank() == 2 {
            t
        } else {
            t.reshape(&[r, c]).expect("same element count")
        }
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Self::as_matrix(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Self::as_matrix(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.value()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt inner dims");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bv[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        self.push(mat(m, n, out), Op::MatMulBt(a, b), &[a, b])
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        assert_eq!(self.dims(a), self.dims(b), "elementwise shapes");
        let v = self.value(a).zip_with(self.value(b), f).expect("same shape");
        let v = Self::as_matrix(v);
        self.push(v, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, f64::min, Op::Min(a, b))
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row shapes");
        let rv = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&rv) {
                *x += b;
            }
        }
        debug_assert_eq!(v.rows(), r);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.dims(s), (1, 1));
        let sv = self.scalar_value(s);
        let v = self.value(a).map(|x| x * sv);
        self.push(v, Op::MulScalar(a, s), &[a, s])
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.dims(s), (1, 1));
        let sv = self.scalar_value(s);
        let v = self.value(a).map(|x| x / sv);
        self.push(v, Op::DivScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Row-wise softmax of `scale * a`.
    pub fn softmax_rows(&mut self, a: NodeId, scale: f64) -> NodeId {
        let c = self.dims(a).1;
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(c) {
            softmax_in_place(row, scale);
        }
        self.push(v, Op::SoftmaxRows(a, scale), &[a])
    }

    pub fn cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "column slice out of range");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(mat(r, len, out), Op::Cols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for p in parts {
            let (pr, pc) = self.dims(*p);
            assert_eq!(pr, r, "concat rows");
            let src = self.value(*p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        self.push(mat(r, total, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Global maximum; the gradient flows to the first arg-max entry.
    pub fn max_all(&mut self, a: NodeId) -> NodeId {
        let (idx, best) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        self.push(Tensor::scalar(best), Op::MaxAll(a, idx), &[a])
    }

    /// Maximum of scalar nodes.
    pub fn max_of(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let mut idx = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, x) in xs.iter().enumerate() {
            let v = self.scalar_value(*x);
            if v > best {
                best = v;
                idx = i;
            }
        }
        self.push(Tensor::scalar(best), Op::MaxOf(xs.to_vec(), idx), xs)
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        if xs.len() == 1 {
            return xs[0];
        }
        let mut acc = self.value(xs[0]).clone();
        for x in &xs[1..] {
            acc.add_assign(self.value(*x)).expect("mean shapes");
        }
        let n = xs.len() as f64;
        let v = acc.map(|x| x / n);
        self.push(v, Op::Mean(xs.to_vec()), xs)
    }

    /// Gaussian smoothing of every column, each read as an `h x w` plane.
    pub fn filter(&mut self, a: NodeId, h: usize, w: usize, g: GaussianSpec) -> NodeId {
        let (r, c) = self.dims(a);
        assert_eq!(r, h * w, "filter plane size");
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut plane = vec![0.0; r];
        let mut res = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                plane[i] = src[i * c + j];
            }
            filter_plane(&plane, h, w, &g, &mut res);
            for i in 0..r {
                out[i * c + j] = res[i];
            }
        }
        self.push(mat(r, c, out), Op::Filter(a, h, w, g), &[a])
    }

    /// `base` with `scale * row` added to each listed row index.
    pub fn add_rows(&mut self, base: NodeId, row: NodeId, rows: &[usize], scale: f64) -> NodeId {
        let c = self.dims(base).1;
        assert_eq!(self.dims(row), (1, c));
        let rv = self.value(row).data().to_vec();
        let mut v = self.value(base).clone();
        for &r in rows {
            for (j, b) in rv.iter().enumerate() {
                let cur = v.get2(r, j);
                v.set2(r, j, cur + scale * b);
            }
        }
        self.push(v, Op::AddRows(base, row, rows.to_vec(), scale), &[base, row])
    }

    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.dims(loss), (1, 1), "backward needs a scalar loss");
        self.backward_with(&[(loss, Tensor::scalar(1.0))])
    }

    /// Vector-Jacobian products seeded at several outputs at once.
    pub fn backward_with(&self, seeds: &[(NodeId, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (id, g) in seeds {
            let g = Self::as_matrix(g.clone());
            assert_eq!(self.dims(*id), (g.rows(), g.cols()), "seed shape");
            accumulate(&mut grads, *id, g);
            top = top.max(id.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    let bt = self.value(*b).transpose();
                    accumulate(grads, *a, g.matmul(&bt).expect("shape"));
                }
                if needs(*b) {
                    let at = self.value(*a).transpose();
                    accumulate(grads, *b, at.matmul(g).expect("shape"));
                }
            }
            Op::MatMulBt(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b)).expect("shape"));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.transpose().matmul(self.value(*a)).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.zip_with(self.value(*b), |x, y| x * y).unwrap());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.zip_with(self.value(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if needs(*a) {
                    accumulate(grads, *a, g.zip_with(bv, |x, y| x / y).unwrap());
                }
                if needs(*b) {
                    let av = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((gv, x), y)| -gv * x / (y * y))
                        .collect();
                    accumulate(grads, *b, mat(g.rows(), g.cols(), data));
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*row) {
                    let c = g.cols();
                    let mut sums = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (s, v) in sums.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    accumulate(grads, *row, mat(1, c, sums));
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                if needs(*a) {
                    accumulate(grads, *a, g.scale(sv));
                }
                if needs(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    accumulate(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::DivScalar(a, s) => {
                let sv = self.scalar_value(*s);
                if needs(*a) {
                    accumulate(grads, *a, g.map(|x| x / sv));
                }
                if needs(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    accumulate(grads, *s, Tensor::scalar(-dot / (sv * sv)));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let d = g.zip_with(&node.value, |gv, y| gv * (1.0 - y * y)).unwrap();
                accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.zip_with(self.value(*a), |gv, x| gv / x).unwrap();
                accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .zip_with(self.value(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 })
                    .unwrap();
                accumulate(grads, *a, d);
            }
            Op::Min(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (mut ga, mut gb) = (vec![0.0; g.len()], vec![0.0; g.len()]);
                for (i, gv) in g.data().iter().enumerate() {
                    if av[i] < bv[i] {
                        ga[i] = *gv;
                    } else if av[i] > bv[i] {
                        gb[i] = *gv;
                    } else {
                        ga[i] = 0.5 * gv;
                        gb[i] = 0.5 * gv;
                    }
                }
                if needs(*a) {
                    accumulate(grads, *a, mat(g.rows(), g.cols(), ga));
                }
                if needs(*b) {
                    accumulate(grads, *b, mat(g.rows(), g.cols(), gb));
                }
            }
            Op::SoftmaxRows(a, scale) => {
                let c = g.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(node.value.data().chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = scale * yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, mat(g.rows(), c, d));
            }
            Op::Cols(a, start) => {
                let (r, c) = self.dims(*a);
                let len = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                accumulate(grads, *a, mat(r, c, d));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let r = g.rows();
                let mut offset = 0;
                for p in parts {
                    let pc = self.dims(*p).1;
                    if needs(*p) {
                        let mut d = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + pc]);
                        }
                        accumulate(grads, *p, mat(r, pc, d));
                    }
                    offset += pc;
                }
            }
            Op::SumAll(a) => {
                let gv = g.value();
                let (r, c) = self.dims(*a);
                accumulate(grads, *a, mat(r, c, vec![gv; r * c]));
            }
            Op::MaxAll(a, idx) => {
                let (r, c) = self.dims(*a);
                let mut d = vec![0.0; r * c];
                d[*idx] = g.value();
                accumulate(grads, *a, mat(r, c, d));
            }
            Op::MaxOf(xs, idx) => {
                if needs(xs[*idx]) {
                    accumulate(grads, xs[*idx], g.clone());
                }
            }
            Op::Mean(xs) => {
                let n = xs.len() as f64;
                for x in xs {
                    if needs(*x) {
                        accumulate(grads, *x, g.map(|v| v / n));
                    }
                }
            }
            Op::Filter(a, h, w, spec) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = vec![0.0; r * c];
                let mut plane = vec![0.0; r];
                let mut res = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        plane[i] = g.data()[i * c + j];
                    }
                    res.iter_mut().for_each(|v| *v = 0.0);
                    filter_plane_adjoint(&plane, *h, *w, spec, &mut res);
                    for i in 0..r {
                        d[i * c + j] = res[i];
                    }
                }
                accumulate(grads, *a, mat(r, c, d));
            }
            Op::AddRows(base, row, rows, scale) => {
                if needs(*base) {
                    accumulate(grads, *base, g.clone());
                }
                if needs(*row) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for &r in rows {
                        for (j, dv) in d.iter_mut().enumerate() {
                            *dv += scale * g.get2(r, j);
                        }
                    }
                    accumulate(grads, *row, mat(1, c, d));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes"),
        slot @ None => *slot = Some(g),
    }
}
