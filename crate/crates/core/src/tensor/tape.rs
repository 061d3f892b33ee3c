use std::collections::HashMap;

use rand::Rng;

use super::{gemm, ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogClamp(Var, f64),
    Softmax(Var),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { a: Var, idx: Vec<usize> },
    MaxPool { a: Var, argmax: Vec<usize> },
    Sum(Var),
    Pick { a: Var, idx: Vec<usize> },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Map { a: Var, df: fn(f64, f64) -> f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of a forward computation.
///
/// Operations append nodes in execution order, so the record is already a
/// topological order and the backward sweep simply walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Gradients for every node of a tape, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        }
    }

    /// Adds the gradients of every bound parameter into `acc`.
    pub fn accumulate_into(&self, acc: &mut ParamGrads) {
        for &(pid, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                acc.accumulate(pid, g);
            }
        }
    }

    pub fn to_param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut acc = ParamGrads::zeros_like(store);
        self.accumulate_into(&mut acc);
        acc
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
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

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite() || !matches!(op, Op::Leaf));
        self.consumed = false;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    /// Records an input whose gradient is wanted.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Binds a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_node(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn out(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut data = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut data,
            0.0,
        );
        Ok(self.push(Self::out(m, n, data), Op::MatMul { a, b, b_t: false }, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut data = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut data,
            0.0,
        );
        Ok(self.push(Self::out(m, n, data), Op::MatMul { a, b, b_t: true }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor {
            shape: va.shape().to_vec(),
            data,
        }
    }

    fn map_values(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            add_into(chunk, r);
        }
        Ok(self.push(Self::out(m, n, data), Op::AddRow { a, row }, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map_values(a, |x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", self.shape(a), &[c.len()]));
        }
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().zip(&c).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(t, Op::MulConst(a, c), &[a]))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout ratio {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).numel();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map_values(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map_values(a, f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map_values(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// `ln(max(a, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamp(&mut self, a: Var, eps: f64) -> Var {
        let t = self.map_values(a, |x| x.max(eps).ln());
        self.push(t, Op::LogClamp(a, eps), &[a])
    }

    /// Custom elementwise map. `df(x, y)` returns `dy/dx` given input `x` and
    /// output `y = f(x)`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let t = self.map_values(a, f);
        self.push(t, Op::Map { a, df }, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row, None);
        }
        self.push(Self::out(m, n, data), Op::Softmax(a), &[a])
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries are
    /// treated as `-inf`. A row with no unmasked entry yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if mask.len() != m * n {
            return Err(Error::shape("masked_softmax", self.shape(a), &[mask.len()]));
        }
        let mut data = self.value(a).data().to_vec();
        for (row, mrow) in data.chunks_mut(n).zip(mask.chunks(n)) {
            softmax_in_place(row, Some(mrow));
        }
        Ok(self.push(Self::out(m, n, data), Op::Softmax(a), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Self::out(m, len, data), Op::SliceCols { a, start }, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m || len == 0 {
            return Err(Error::shape("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Self::out(len, n, data), Op::SliceRows { a, start }, &[a]))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, 1)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(*parts.first().ok_or(Error::EmptySequence("concat_cols"))?).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            n += pn;
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Self::out(m, n, data), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(*parts.first().ok_or(Error::EmptySequence("concat_rows"))?).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Self::out(m, n, data), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", self.shape(a), &[bad]));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(src.row_slice(i));
        }
        Ok(self.push(
            Self::out(idx.len(), n, data),
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Column-wise maximum over rows (`L × d → 1 × d`). Ties resolve to the
    /// earliest row, which alone receives the gradient.
    pub fn max_pool(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(Error::EmptySequence("max_pool"));
        }
        let src = self.value(a);
        let mut argmax = vec![0usize; n];
        let mut best = src.row_slice(0).to_vec();
        for i in 1..m {
            for (j, &v) in src.row_slice(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Self::out(1, n, best), Op::MaxPool { a, argmax }, &[a]))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Picks `a[i][idx[i]]` for every row, giving an `m × 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.len() != m || idx.iter().any(|&k| k >= n) {
            return Err(Error::shape("pick", self.shape(a), &[idx.len()]));
        }
        let src = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &k)| src.get(i, k)).collect();
        Ok(self.push(
            Self::out(m, 1, data),
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(Error::shape("layer_norm", self.shape(a), self.shape(gamma)));
        }
        let src = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for row in src.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, x) in row.iter().enumerate() {
                let h = (x - mean) * is;
                xhat.push(h);
                data.push(g[j] * h + b[j]);
            }
        }
        Ok(self.push(
            Self::out(m, n, data),
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[a, gamma, beta],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Fails if the loss is not a single value, or if the tape was already
    /// swept and no operation has been recorded since.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        // Lazily allocated gradient slot for an input.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
                .as_mut_slice()
        }
        let y = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = node.value.cols();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if wants(*a) {
                    // dA = dC·Bᵀ (or dC·B when B was transposed)
                    gemm(m, n, k, g, false, bv, !b_t, slot(grads, nodes, *a), 1.0);
                }
                if wants(*b) {
                    if *b_t {
                        // B is n×k: dB = dCᵀ·A
                        gemm(n, m, k, g, true, av, false, slot(grads, nodes, *b), 1.0);
                    } else {
                        // dB = Aᵀ·dC
                        gemm(k, m, n, av, true, g, false, slot(grads, nodes, *b), 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if wants(*b) {
                    add_into(slot(grads, nodes, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if wants(*b) {
                    for (d, s) in slot(grads, nodes, *b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if wants(*a) {
                    for ((d, s), y) in slot(grads, nodes, *a).iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if wants(*b) {
                    for ((d, s), x) in slot(grads, nodes, *b).iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if wants(*row) {
                    let n = node.value.cols();
                    let dst = slot(grads, nodes, *row);
                    for chunk in g.chunks(n) {
                        add_into(dst, chunk);
                    }
                }
            }
            Op::Scale(a, s) => {
                for (d, x) in slot(grads, nodes, *a).iter_mut().zip(g) {
                    *d += s * x;
                }
            }
            Op::MulConst(a, c) => {
                for ((d, x), k) in slot(grads, nodes, *a).iter_mut().zip(g).zip(c) {
                    *d += x * k;
                }
            }
            Op::Sigmoid(a) => {
                for ((d, x), y) in slot(grads, nodes, *a).iter_mut().zip(g).zip(y) {
                    *d += x * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                for ((d, x), y) in slot(grads, nodes, *a).iter_mut().zip(g).zip(y) {
                    *d += x * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                for ((d, x), v) in slot(grads, nodes, *a).iter_mut().zip(g).zip(av) {
                    if *v > 0.0 {
                        *d += x;
                    }
                }
            }
            Op::LogClamp(a, eps) => {
                let av = nodes[a.0].value.data();
                for ((d, x), v) in slot(grads, nodes, *a).iter_mut().zip(g).zip(av) {
                    if *v > *eps {
                        *d += x / v;
                    }
                }
            }
            Op::Map { a, df } => {
                let av = nodes[a.0].value.data();
                for (((d, x), v), y) in slot(grads, nodes, *a).iter_mut().zip(g).zip(av).zip(y) {
                    *d += x * df(*v, *y);
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let dst = slot(grads, nodes, *a);
                for ((drow, grow), yrow) in dst.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let n_in = nodes[a.0].value.cols();
                let len = node.value.cols();
                let dst = slot(grads, nodes, *a);
                for (i, grow) in g.chunks(len).enumerate() {
                    add_into(&mut dst[i * n_in + start..i * n_in + start + len], grow);
                }
            }
            Op::SliceRows { a, start } => {
                let n = node.value.cols();
                let dst = slot(grads, nodes, *a);
                add_into(&mut dst[start * n..start * n + g.len()], g);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pn = nodes[p.0].value.cols();
                    if wants(p) {
                        let dst = slot(grads, nodes, p);
                        for (i, grow) in g.chunks(n).enumerate() {
                            add_into(&mut dst[i * pn..(i + 1) * pn], &grow[offset..offset + pn]);
                        }
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(p) {
                        add_into(slot(grads, nodes, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { a, idx } => {
                let n = node.value.cols();
                let dst = slot(grads, nodes, *a);
                for (grow, &i) in g.chunks(n).zip(idx) {
                    add_into(&mut dst[i * n..(i + 1) * n], grow);
                }
            }
            Op::MaxPool { a, argmax } => {
                let n = node.value.cols();
                let dst = slot(grads, nodes, *a);
                for (j, &i) in argmax.iter().enumerate() {
                    dst[i * n + j] += g[j];
                }
            }
            Op::Sum(a) => {
                for d in slot(grads, nodes, *a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Pick { a, idx } => {
                let n = nodes[a.0].value.cols();
                let dst = slot(grads, nodes, *a);
                for (i, &k) in idx.iter().enumerate() {
                    dst[i * n + k] += g[i];
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = nodes[gamma.0].value.data();
                if wants(*a) {
                    let dst = slot(grads, nodes, *a);
                    let nf = n as f64;
                    for (i, grow) in g.chunks(n).enumerate() {
                        let xh = &xhat[i * n..(i + 1) * n];
                        let dxh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[i * n + j] +=
                                inv_std[i] / nf * (nf * dxh[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
                if wants(*gamma) {
                    let dst = slot(grads, nodes, *gamma);
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, a), b) in dst.iter_mut().zip(grow).zip(xrow) {
                            *d += a * b;
                        }
                    }
                }
                if wants(*beta) {
                    let dst = slot(grads, nodes, *beta);
                    for grow in g.chunks(n) {
                        add_into(dst, grow);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let i = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn hand_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(m(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_is_b_transpose_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.input(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap().wrt(av);
        for i in 0..3 {
            for k in 0..4 {
                let want: f64 = b.row_slice(k).iter().sum();
                assert!((g.get(i, k) - want).abs() < 1e-12);
            }
        }
        let report = grad_check(&[a, b], 1e-5, 1e-6, |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn masked_softmax_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(m(&[&[0.3, 0.3, 0.3], &[5.0, 1.0, 2.0], &[1.0, 2.0, 0.0]]));
        let mask = [true, true, true, false, false, false, true, false, false];
        let p = tape.masked_softmax(s, &mask).unwrap();
        let v = tape.value(p);
        for j in 0..3 {
            assert!((v.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(v.get(1, j), 0.0);
        }
        assert_eq!(v.row_slice(2), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_cases() {
        let mut tape = Tape::new();
        let h = tape.input(m(&[&[1.0, 5.0], &[3.0, 2.0]]));
        let p = tape.max_pool(h).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 5.0]);

        let mut tape = Tape::new();
        let single = tape.input(m(&[&[4.0, -1.0]]));
        let p = tape.max_pool(single).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0, -1.0]);

        let mut tape = Tape::new();
        let tie = tape.input(m(&[&[2.0], &[2.0]]));
        let p = tape.max_pool(tie).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap().wrt(tie);
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![1.0, -2.0, 3.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));

        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![2.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[5.0]);
    }

    fn composite(t: &mut Tape, v: &[Var], mask: &[bool]) -> Result<Var> {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let a = t.tanh(h);
        let b = t.sigmoid(h);
        let c = t.mul(a, b)?;
        let sc = t.matmul_bt(c, c)?;
        let p = t.masked_softmax(sc, mask)?;
        let q = t.matmul(p, c)?;
        let q = t.layer_norm(q, v[3], v[4], 1e-5)?;
        let r = t.relu(q);
        let left = t.slice_cols(r, 0, 2)?;
        let right = t.slice_cols(q, 1, 2)?;
        let j = t.concat_cols(&[left, right])?;
        let rows = t.gather_rows(j, &[0, 2, 2, 1])?;
        let sm = t.softmax(rows);
        let picked = t.pick(sm, &[0, 1, 3, 2])?;
        let l = t.log_clamp(picked, 1e-12);
        let pooled = t.max_pool(j)?;
        let scaled = t.scale(pooled, 0.5);
        let s1 = t.sum(l);
        let s2 = t.sum(scaled);
        let top = t.slice_rows(c, 1, 2)?;
        let stacked = t.concat_rows(&[top, c])?;
        let s3 = t.sum(stacked);
        let s = t.add(s1, s2)?;
        let s = t.sub(s, s3)?;
        Ok(s)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mask = [true, false, true, true, true, false, false, true, true];
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                Tensor::uniform(&[3, 4], 1.0, &mut rng),
                Tensor::uniform(&[4, 3], 1.0, &mut rng),
                Tensor::uniform(&[1, 3], 1.0, &mut rng),
                Tensor::uniform(&[1, 3], 1.0, &mut rng),
                Tensor::uniform(&[1, 3], 1.0, &mut rng),
            ];
            let report =
                grad_check(&inputs, 1e-5, 1e-4, |t, v| composite(t, v, &mask)).unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mask = [true; 9];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let inputs: Vec<Tensor> = [[3, 4], [4, 3], [1, 3], [1, 3], [1, 3]]
                .iter()
                .map(|s| Tensor::uniform(s, 1.0, &mut rng))
                .collect();
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.into_iter().map(|x| t.input(x)).collect();
            let loss = composite(&mut t, &vars, &mask).unwrap();
            t.value(loss).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn masked_softmax_rows_normalize_and_shift(
            scores in proptest::collection::vec(-20.0f64..20.0, 16),
            mask in proptest::collection::vec(any::<bool>(), 16),
            shift in -50.0f64..50.0,
        ) {
            let mut t = Tape::new();
            let s = t.constant(Tensor::matrix(4, 4, scores.clone()).unwrap());
            let p = t.masked_softmax(s, &mask).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|x| x + shift).collect();
            let s2 = t.constant(Tensor::matrix(4, 4, shifted).unwrap());
            let p2 = t.masked_softmax(s2, &mask).unwrap();
            for i in 0..4 {
                let row = t.value(p).row_slice(i);
                let k = mask[i * 4..i * 4 + 4].iter().filter(|b| **b).count();
                let total: f64 = row.iter().sum();
                if k > 0 {
                    prop_assert!((total - 1.0).abs() < 1e-9);
                } else {
                    prop_assert_eq!(total, 0.0);
                }
                for j in 0..4 {
                    if !mask[i * 4 + j] {
                        prop_assert_eq!(row[j], 0.0);
                    }
                    prop_assert!((row[j] - t.value(p2).get(i, j)).abs() < 1e-9);
                }
            }
        }
    }
}
