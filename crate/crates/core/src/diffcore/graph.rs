use super::{DiffError, Tensor};

/// Probability clamp used by [`Graph::bce`].
pub const PROB_EPS: f64 = 1e-7;

/// Largest `f64` strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln(Var),
    Square(Var),
    SoftmaxRows(Var),
    Bce(Var, Var),
    Outer(Var, Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCol(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in execution order, so every
/// node's inputs precede it and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    (x.max(0.0) + (-x.abs()).exp().ln_1p()).max(f64::MIN_POSITIVE)
}

/// Clamped binary cross-entropy `-[y ln p + (1-y) ln(1-p)]`.
pub fn bce_scalar(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copy of `x` cut off from gradient flow. Values are bitwise identical.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backpropagated = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.values(),
            (k, 1),
            tb.values(),
            (n, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (_, cols) = tx.rows_cols();
        if tb.len() != cols {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(tb.values()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let out = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Scales row `i` of `x[m×n]` by `c[i]` (`c` is `[m×1]` or `[m]`).
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var, DiffError> {
        let (tx, tc) = (&self.nodes[x.0].value, &self.nodes[c.0].value);
        let (rows, cols) = tx.rows_cols();
        if tc.len() != rows {
            return Err(shape_err("mul_col", tx, tc));
        }
        let mut out = tx.values().to_vec();
        for (row, &s) in out.chunks_mut(cols).zip(tc.values()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(value, Op::MulCol(x, c), rg))
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        v: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (tx, tv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let (_, cols) = tx.rows_cols();
        if tv.len() != cols {
            return Err(shape_err(name, tx, tv));
        }
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &s) in row.iter_mut().zip(tv.values()) {
                *o = f(*o, s);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(value, op, rg))
    }

    /// `x[m×n] ⊙ v[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var, DiffError> {
        self.row_broadcast(x, v, "mul_row", |a, b| a * b, Op::MulRow(x, v))
    }

    /// `x[m×n] / v[n]` broadcast over rows.
    pub fn div_row(&mut self, x: Var, v: Var) -> Result<Var, DiffError> {
        self.row_broadcast(x, v, "div_row", |a, b| a / b, Op::DivRow(x, v))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = &self.nodes[x.0].value;
        let out = tx.values().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Elementwise logistic function, kept strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// Elementwise `ln(1 + e^x)`, strictly positive.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus_scalar, Op::Softplus(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (_, cols) = tx.rows_cols();
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Elementwise binary cross-entropy with `p` clamped to `[PROB_EPS, 1-PROB_EPS]`.
    /// Soft targets are allowed.
    pub fn bce(&mut self, p: Var, y: Var) -> Result<Var, DiffError> {
        self.zip_same(p, y, "bce", bce_scalar, Op::Bce(p, y))
    }

    /// Row-wise flattened outer product: `a[m×p], b[m×q] -> [m×(p·q)]`,
    /// entry `i·q + j` of each row is `a_i · b_j`. Rank-1 inputs give a rank-1 result.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, p) = ta.rows_cols();
        let (rb, q) = tb.rows_cols();
        if ra != rb || ta.shape().len() != tb.shape().len() {
            return Err(shape_err("outer", ta, tb));
        }
        let mut out = Vec::with_capacity(ra * p * q);
        for r in 0..ra {
            let (ar, br) = (ta.row(r), tb.row(r));
            for &x in ar {
                out.extend(br.iter().map(|&y| x * y));
            }
        }
        let shape = if ta.shape().len() == 1 {
            vec![p * q]
        } else {
            vec![ra, p * q]
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Outer(a, b), rg))
    }

    /// Embedding lookup: rows of `table[c×d]` selected by `ids`, giving `[ids.len()×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let tt = &self.nodes[table.0].value;
        if tt.shape().len() != 2 {
            return Err(DiffError::Rank {
                op: "gather",
                shape: tt.shape().to_vec(),
            });
        }
        let (c, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= c {
                return Err(DiffError::IndexOutOfRange { index: i, bound: c });
            }
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out),
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = &self.nodes[parts[0].0].value;
        let rows = first.rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Column `j` of `x[m×n]` as `[m×1]`.
    pub fn slice_col(&mut self, x: Var, j: usize) -> Result<Var, DiffError> {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = tx.rows_cols();
        if j >= cols {
            return Err(DiffError::IndexOutOfRange {
                index: j,
                bound: cols,
            });
        }
        let out = (0..rows).map(|r| tx.values()[r * cols + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(out), Op::SliceCol(x, j), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.values().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Populates gradients of every differentiable ancestor of `root`.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        if !self.rg(root) {
            return Err(DiffError::DetachedRoot);
        }
        if self.backpropagated {
            return Err(DiffError::AlreadyBackpropagated);
        }
        self.backpropagated = true;
        self.grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&mut self, v: Var, contrib: impl Fn(usize) -> f64) {
        if let Some(buf) = self.acc(v) {
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot += contrib(i);
            }
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.values().to_vec();
                    let buf = self.acc(a).unwrap();
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, (n, 1), &bv, (1, n), buf, 1.0);
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.values().to_vec();
                    let buf = self.acc(b).unwrap();
                    // dB = Aᵀ · G
                    gemm(k, m, n, &av, (1, k), g, (n, 1), buf, 1.0);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(x, |i| g[i]);
                let cols = self.nodes[bias.0].value.len();
                if let Some(buf) = self.acc(bias) {
                    for row in g.chunks(cols) {
                        for (b, gv) in buf.iter_mut().zip(row) {
                            *b += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, |i| g[i]);
                self.accumulate(b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |i| g[i]);
                self.accumulate(b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.values().to_vec();
                let bv = self.nodes[b.0].value.values().to_vec();
                self.accumulate(a, |i| g[i] * bv[i]);
                self.accumulate(b, |i| g[i] * av[i]);
            }
            Op::MulCol(x, c) => {
                let cols = self.nodes[x.0].value.rows_cols().1;
                let xv = self.nodes[x.0].value.values().to_vec();
                let cv = self.nodes[c.0].value.values().to_vec();
                self.accumulate(x, |i| g[i] * cv[i / cols]);
                if let Some(buf) = self.acc(c) {
                    for (r, slot) in buf.iter_mut().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        *slot += g[span.clone()]
                            .iter()
                            .zip(&xv[span])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::MulRow(x, v) => {
                let cols = self.nodes[v.0].value.len();
                let xv = self.nodes[x.0].value.values().to_vec();
                let vv = self.nodes[v.0].value.values().to_vec();
                self.accumulate(x, |i| g[i] * vv[i % cols]);
                if let Some(buf) = self.acc(v) {
                    for (i, (gi, xi)) in g.iter().zip(&xv).enumerate() {
                        buf[i % cols] += gi * xi;
                    }
                }
            }
            Op::DivRow(x, v) => {
                let cols = self.nodes[v.0].value.len();
                let xv = self.nodes[x.0].value.values().to_vec();
                let vv = self.nodes[v.0].value.values().to_vec();
                self.accumulate(x, |i| g[i] / vv[i % cols]);
                if let Some(buf) = self.acc(v) {
                    for (i, (gi, xi)) in g.iter().zip(&xv).enumerate() {
                        let d = vv[i % cols];
                        buf[i % cols] -= gi * xi / (d * d);
                    }
                }
            }
            Op::Scale(x, s) => self.accumulate(x, |i| g[i] * s),
            Op::AddScalar(x) => self.accumulate(x, |i| g[i]),
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.values().to_vec();
                self.accumulate(x, |i| if xv[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[idx].value.values().to_vec();
                self.accumulate(x, |i| g[i] * yv[i] * (1.0 - yv[i]));
            }
            Op::Softplus(x) => {
                let xv = self.nodes[x.0].value.values().to_vec();
                self.accumulate(x, |i| g[i] * sigmoid_scalar(xv[i]));
            }
            Op::Ln(x) => {
                let xv = self.nodes[x.0].value.values().to_vec();
                self.accumulate(x, |i| g[i] / xv[i]);
            }
            Op::Square(x) => {
                let xv = self.nodes[x.0].value.values().to_vec();
                self.accumulate(x, |i| 2.0 * g[i] * xv[i]);
            }
            Op::SoftmaxRows(x) => {
                let yv = self.nodes[idx].value.values().to_vec();
                let cols = self.nodes[idx].value.rows_cols().1;
                if let Some(buf) = self.acc(x) {
                    for ((brow, yrow), grow) in buf
                        .chunks_mut(cols)
                        .zip(yv.chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for ((b, y), gv) in brow.iter_mut().zip(yrow).zip(grow) {
                            *b += y * (gv - dot);
                        }
                    }
                }
            }
            Op::Bce(p, y) => {
                let pv = self.nodes[p.0].value.values().to_vec();
                let yv = self.nodes[y.0].value.values().to_vec();
                self.accumulate(p, |i| {
                    let raw = pv[i];
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
                        return 0.0;
                    }
                    g[i] * (raw - yv[i]) / (raw * (1.0 - raw))
                });
                self.accumulate(y, |i| {
                    let pc = pv[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
                    g[i] * ((1.0 - pc).ln() - pc.ln())
                });
            }
            Op::Outer(a, b) => {
                let (rows, p) = self.nodes[a.0].value.rows_cols();
                let q = self.nodes[b.0].value.rows_cols().1;
                let av = self.nodes[a.0].value.values().to_vec();
                let bv = self.nodes[b.0].value.values().to_vec();
                if let Some(buf) = self.acc(a) {
                    for r in 0..rows {
                        for i in 0..p {
                            let gs = &g[r * p * q + i * q..r * p * q + (i + 1) * q];
                            buf[r * p + i] += gs
                                .iter()
                                .zip(&bv[r * q..(r + 1) * q])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                }
                if let Some(buf) = self.acc(b) {
                    for r in 0..rows {
                        for i in 0..p {
                            let ai = av[r * p + i];
                            let gs = &g[r * p * q + i * q..r * p * q + (i + 1) * q];
                            for (slot, gv) in buf[r * q..(r + 1) * q].iter_mut().zip(gs) {
                                *slot += ai * gv;
                            }
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                let d = self.nodes[table.0].value.shape()[1];
                if let Some(buf) = self.acc(table) {
                    for (row, &i) in ids.iter().enumerate() {
                        for (slot, gv) in buf[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                        {
                            *slot += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.rows_cols().1;
                let mut offset = 0;
                for p in parts {
                    let (rows, w) = self.nodes[p.0].value.rows_cols();
                    if let Some(buf) = self.acc(p) {
                        for r in 0..rows {
                            for (slot, gv) in buf[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                            {
                                *slot += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCol(x, j) => {
                let cols = self.nodes[x.0].value.rows_cols().1;
                if let Some(buf) = self.acc(x) {
                    for (r, gv) in g.iter().enumerate() {
                        buf[r * cols + j] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(x, |_| g0);
            }
        }
    }
}

/// `c = beta·c + a·b` with explicit (row, col) strides for `a` and `b`; `c` is row-major `[m×n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` ([m×k]), `b` ([k×n]) and `c` ([m×n]).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
