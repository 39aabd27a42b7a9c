//! Reverse-mode differentiation over a small, fixed set of matrix primitives.
//!
//! A [`GradTape`] records every value produced during a forward pass together
//! with the primitive that produced it. [`GradTape::grad`] then walks the
//! record backwards once and returns exact partial derivatives of a 1×1 loss
//! with respect to any leaves registered with [`GradTape::param`].
//!
//! Leaves registered with [`GradTape::constant`] never receive adjoints, so
//! no work is spent on, e.g., gradients with respect to input features.

use crate::tensor::{
    check_finite, log_softmax_in_place, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, softmax_in_place, Result,
    Tensor, TensorError,
};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    VStack(Vec<Var>),
    WeightedSum(Var, Vec<(usize, usize, f64)>),
    Sum(Var),
    NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf. Must be a matrix.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        value.dims2("param")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.dims2("constant")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        shape: (usize, usize),
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::from_parts_unchecked(vec![shape.0, shape.1], data);
        Ok(self.push(value, op, requires_grad))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims(a);
        let (q2, r) = self.dims(b);
        if q != q2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), p, q, r);
        self.emit("matmul", (p, r), out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims(a);
        let (r, q2) = self.dims(b);
        if q != q2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), p, q, r);
        self.emit("matmul_nt", (p, r), out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.emit("add", self.dims(a), out, Op::Add(a, b), &[a, b])
    }

    /// Adds a 1×c row vector to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(self.mismatch("add_row", a, row));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.emit("add_row", (r, c), out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        self.emit("scale", self.dims(a), out, Op::Scale(a, factor), &[a])
    }

    /// Multiplies every entry of `a` by the single entry of the 1×1 `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(self.mismatch("mul_scalar", a, s));
        }
        let f = self.value(s).data()[0];
        let out = self.value(a).data().iter().map(|x| x * f).collect();
        self.emit("mul_scalar", self.dims(a), out, Op::MulScalar(a, s), &[a, s])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        self.emit("softmax_rows", (r, c), out, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise `log(softmax(a))`, evaluated without forming the softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            log_softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        self.emit("log_softmax_rows", (r, c), out, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x.ln()).collect();
        self.emit("log", self.dims(a), out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x.exp()).collect();
        self.emit("exp", self.dims(a), out, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        self.emit("relu", self.dims(a), out, Op::Relu(a), &[a])
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                left: vec![r, c],
                right: vec![bad],
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.emit("gather_rows", (rows.len(), c), out, Op::GatherRows(a, rows), &[a])
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidShape(vec![0]))?;
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.dims(p).1 != c {
                return Err(self.mismatch("vstack", first, p));
            }
            rows += self.dims(p).0;
            out.extend_from_slice(self.value(p).data());
        }
        self.emit("vstack", (rows, c), out, Op::VStack(parts.to_vec()), parts)
    }

    /// `Σ w · a[r, c]` over the listed entries, as a 1×1 value.
    pub fn weighted_sum(&mut self, a: Var, entries: Vec<(usize, usize, f64)>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&(i, j, _)) = entries.iter().find(|&&(i, j, _)| i >= r || j >= c) {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                left: vec![r, c],
                right: vec![i, j],
            });
        }
        let src = self.value(a).data();
        let total = entries.iter().map(|&(i, j, w)| w * src[i * c + j]).sum();
        self.emit("weighted_sum", (1, 1), vec![total], Op::WeightedSum(a, entries), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.emit("sum", (1, 1), vec![total], Op::Sum(a), &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        self.emit("normalize_rows", (r, c), out, Op::NormalizeRows(a), &[a])
    }

    /// Exact partial derivatives of the 1×1 `loss` with respect to `params`.
    ///
    /// Parameters that do not influence `loss` get an all-zero gradient.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        if self.dims(loss) != (1, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "grad",
                left: self.value(loss).shape().to_vec(),
                right: vec![1, 1],
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backward_node(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }

        let out = params
            .iter()
            .map(|&p| {
                let shape = self.value(p).shape().to_vec();
                match adj.get(p.0).and_then(|a| a.clone()) {
                    Some(g) => Tensor::from_parts_unchecked(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect::<Vec<_>>();
        for g in &out {
            check_finite("grad", g.data())?;
        }
        Ok(out)
    }

    fn backward_node(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.dims(*a);
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let bv = self.value(*b).data();
                    accumulate(adj, *a, matmul_nt_kernel(g, bv, p, c, q));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let av = self.value(*a).data();
                    accumulate(adj, *b, matmul_tn_kernel(av, g, p, q, c));
                }
            }
            Op::MatMulNt(a, b) => {
                let (p, q) = self.dims(*a);
                let rr = self.dims(*b).0;
                if self.needs(*a) {
                    // dA = dC · B
                    let bv = self.value(*b).data();
                    accumulate(adj, *a, matmul_kernel(g, bv, p, rr, q));
                }
                if self.needs(*b) {
                    // dB = dCᵀ · A
                    let av = self.value(*a).data();
                    accumulate(adj, *b, matmul_tn_kernel(g, av, p, rr, q));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(adj, *v, g.to_vec());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.needs(*row) {
                    let mut col = vec![0.0; c];
                    for i in 0..r {
                        for (acc, v) in col.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *acc += v;
                        }
                    }
                    accumulate(adj, *row, col);
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.iter().map(|x| x * f).collect());
                }
            }
            Op::MulScalar(a, s) => {
                let f = self.value(*s).data()[0];
                if self.needs(*a) {
                    accumulate(adj, *a, g.iter().map(|x| x * f).collect());
                }
                if self.needs(*s) {
                    let av = self.value(*a).data();
                    let total = av.iter().zip(g).map(|(x, y)| x * y).sum();
                    accumulate(adj, *s, vec![total]);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = y[j] * (gy[j] - inner);
                        }
                    }
                    accumulate(adj, *a, dx);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.needs(*a) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            dx[i * c + j] = gy[j] - y[j].exp() * total;
                        }
                    }
                    accumulate(adj, *a, dx);
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let av = self.value(*a).data();
                    accumulate(adj, *a, g.iter().zip(av).map(|(d, x)| d / x).collect());
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.iter().zip(out).map(|(d, y)| d * y).collect());
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let av = self.value(*a).data();
                    let dx = g.iter().zip(av).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect();
                    accumulate(adj, *a, dx);
                }
            }
            Op::GatherRows(a, rows) => {
                if self.needs(*a) {
                    let (ar, _) = self.dims(*a);
                    let mut dx = vec![0.0; ar * c];
                    for (k, &i) in rows.iter().enumerate() {
                        for (d, v) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *d += v;
                        }
                    }
                    accumulate(adj, *a, dx);
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.dims(*p).0 * c;
                    if self.needs(*p) {
                        accumulate(adj, *p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::WeightedSum(a, entries) => {
                if self.needs(*a) {
                    let (ar, ac) = self.dims(*a);
                    let mut dx = vec![0.0; ar * ac];
                    for &(i, j, w) in entries {
                        dx[i * ac + j] += w * g[0];
                    }
                    accumulate(adj, *a, dx);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let (ar, ac) = self.dims(*a);
                    accumulate(adj, *a, vec![g[0]; ar * ac]);
                }
            }
            Op::NormalizeRows(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let xi = &x[i * c..(i + 1) * c];
                        let gi = &g[i * c..(i + 1) * c];
                        let norm = (xi.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                        let xg: f64 = xi.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = gi[j] / norm - xi[j] * xg / (norm * norm * norm);
                        }
                    }
                    accumulate(adj, *a, dx);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}
