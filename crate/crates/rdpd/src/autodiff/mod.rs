//! Tape-based reverse-mode differentiation.
//!
//! Every primitive records its operands and eagerly computed output on a
//! [`Tape`]. Node ids are issued in creation order, and an operation may
//! only reference earlier ids, so the node list is always a valid
//! topological order; `backward` replays it in reverse, applying each
//! op's vector-Jacobian product.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
pub type NodeId = usize;

/// Probabilities are clamped to `[EPS, 1]` before any logarithm and KL
/// denominators are clamped below by `EPS`.
pub const EPS: f64 = 1e-12;

/// Tolerance used when validating that an input is a distribution.
pub const DIST_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Conv1d { x: NodeId, filters: NodeId, bias: NodeId, stride: usize },
    MeanRows { x: NodeId },
    SumAll { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: F },
    ScalarMul { s: NodeId, x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Log { x: NodeId },
    SoftmaxT { x: NodeId, t: F },
    CrossEntropy { y: NodeId, p: NodeId },
    KlDiv { p: NodeId, q: NodeId },
    Slice { x: NodeId, lo: usize, hi: usize },
    Concat { parts: Vec<NodeId> },
    Reshape { x: NodeId },
}

#[derive(Debug)]
struct Node<F: Real> {
    op: Op<F>,
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    is_param: bool,
}

/// Wengert list: forward values plus enough structure to replay the
/// computation backwards exactly once.
#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    /// Gradient accumulated for `id`, if any reached it during backward.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, data: Vec<F>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            is_param: false,
        });
        id
    }

    /// Registers a constant input (no parameter semantics).
    pub fn leaf(&mut self, data: Vec<F>, shape: &[usize]) -> Result<NodeId> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "leaf with shape {shape:?} needs {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data))
    }

    pub fn scalar_leaf(&mut self, value: F) -> NodeId {
        self.push(Op::Leaf, vec![1], vec![value])
    }

    /// Registers a trainable parameter; the tensor's data is snapshotted.
    pub fn param(&mut self, t: &Tensor<F>) -> NodeId {
        let id = self.push(Op::Leaf, t.shape.clone(), t.data.clone());
        self.nodes[id].is_param = true;
        id
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id].is_param
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id].shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} must be 2-d, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ───── primitives ─────

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(&self.nodes[a].data, &self.nodes[b].data, m, k, n, &mut out);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out))
    }

    /// Valid (no padding) cross-correlation with per-filter bias.
    ///
    /// `x: [s, d]`, `filters: [k_f, w, d]`, `bias: [k_f]` →
    /// `[(s-w)/stride + 1, k_f]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        filters: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let (s, d) = self.dims2(x, "conv1d input")?;
        let fshape = self.nodes[filters].shape.clone();
        if fshape.len() != 3 || fshape[2] != d {
            return Err(Error::Shape(format!(
                "conv1d filters must be [k,w,{d}], got {fshape:?}"
            )));
        }
        let (k_f, w) = (fshape[0], fshape[1]);
        if self.nodes[bias].data.len() != k_f {
            return Err(Error::Shape(format!(
                "conv1d bias must have {k_f} entries, got {}",
                self.nodes[bias].data.len()
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv1d stride must be >= 1".into()));
        }
        if w > s {
            return Err(Error::Shape(format!(
                "conv1d filter width {w} exceeds input length {s}"
            )));
        }
        let out_len = (s - w) / stride + 1;
        let mut out = vec![F::zero(); out_len * k_f];
        {
            let xd = &self.nodes[x].data;
            let fd = &self.nodes[filters].data;
            let bd = &self.nodes[bias].data;
            for t in 0..out_len {
                let base = t * stride;
                for kf in 0..k_f {
                    let mut acc = bd[kf];
                    for i in 0..w {
                        let xrow = (base + i) * d;
                        let frow = (kf * w + i) * d;
                        for c in 0..d {
                            acc = acc + xd[xrow + c] * fd[frow + c];
                        }
                    }
                    out[t * k_f + kf] = acc;
                }
            }
        }
        Ok(self.push(
            Op::Conv1d {
                x,
                filters,
                bias,
                stride,
            },
            vec![out_len, k_f],
            out,
        ))
    }

    /// Column means of a `[r,c]` node: `[1,c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "mean_rows input")?;
        if r == 0 {
            return Err(Error::Shape("mean_rows on empty input".into()));
        }
        let inv = F::from_f64c(1.0 / r as f64);
        let xd = &self.nodes[x].data;
        let mut out = vec![F::zero(); c];
        for row in 0..r {
            for col in 0..c {
                out[col] = out[col] + xd[row * c + col];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        Ok(self.push(Op::MeanRows { x }, vec![1, c], out))
    }

    /// Sum of all elements: scalar `[1]`.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: F = self.nodes[x].data.iter().copied().sum();
        self.push(Op::SumAll { x }, vec![1], vec![total])
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let data: Vec<F> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, data))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let data: Vec<F> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, data))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Scale { x, c }, shape, data)
    }

    /// Broadcast product of a scalar node with any node.
    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        if self.nodes[s].data.len() != 1 {
            return Err(Error::Shape(format!(
                "scalar_mul lhs must be a scalar, got shape {:?}",
                self.nodes[s].shape
            )));
        }
        let sv = self.nodes[s].data[0];
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Op::ScalarMul { s, x }, shape, data))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = F::one();
        let data: Vec<F> = self.nodes[x]
            .data
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Sigmoid { x }, shape, data)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Tanh { x }, shape, data)
    }

    /// Natural log with the input clamped below at [`EPS`].
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let eps = F::from_f64c(EPS);
        let data: Vec<F> = self.nodes[x]
            .data
            .iter()
            .map(|&v| v.max(eps).ln())
            .collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Log { x }, shape, data)
    }

    /// Temperature softmax over all elements of `x` (max-subtracted).
    pub fn softmax_t(&mut self, x: NodeId, t: F) -> Result<NodeId> {
        if t <= F::zero() {
            return Err(Error::Domain(format!("softmax temperature must be > 0, got {t}")));
        }
        if self.nodes[x].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains NaN/Inf".into()));
        }
        let xd = &self.nodes[x].data;
        let max = xd.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = xd.iter().map(|&v| ((v - max) / t).exp()).collect();
        let total: F = exps.iter().copied().sum();
        let data: Vec<F> = exps.iter().map(|&e| e / total).collect();
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Op::SoftmaxT { x, t }, shape, data))
    }

    fn check_distribution(&self, id: NodeId, what: &str) -> Result<()> {
        let d = &self.nodes[id].data;
        let tol = F::from_f64c(DIST_SUM_TOL);
        let mut total = F::zero();
        for &v in d {
            if v < -tol {
                return Err(Error::Domain(format!("{what} has negative entry {v}")));
            }
            total = total + v;
        }
        if (total - F::one()).abs() > tol {
            return Err(Error::Domain(format!("{what} sums to {total}, expected 1")));
        }
        Ok(())
    }

    /// `-Σ y_i log p_i` with `p` clamped to `[EPS, 1]` before the log.
    ///
    /// Gradient flows to `p` and, when it is not a constant leaf, to `y`.
    pub fn cross_entropy(&mut self, y: NodeId, p: NodeId) -> Result<NodeId> {
        if self.nodes[y].data.len() != self.nodes[p].data.len() {
            return Err(Error::Shape(format!(
                "cross_entropy lengths disagree: {} vs {}",
                self.nodes[y].data.len(),
                self.nodes[p].data.len()
            )));
        }
        self.check_distribution(y, "cross_entropy target")?;
        self.check_distribution(p, "cross_entropy prediction")?;
        let eps = F::from_f64c(EPS);
        let one = F::one();
        let mut loss = F::zero();
        for (&yi, &pi) in self.nodes[y].data.iter().zip(&self.nodes[p].data) {
            loss = loss - yi * pi.max(eps).min(one).ln();
        }
        Ok(self.push(Op::CrossEntropy { y, p }, vec![1], vec![loss]))
    }

    /// `Σ p_i log(p_i / q_i)`; terms with `p_i = 0` contribute 0 and `q`
    /// is clamped below by [`EPS`]. The gradient flows to `p` only: `q`
    /// is treated as a frozen reference distribution.
    pub fn kl_divergence(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        if self.nodes[p].data.len() != self.nodes[q].data.len() {
            return Err(Error::Shape(format!(
                "kl_divergence lengths disagree: {} vs {}",
                self.nodes[p].data.len(),
                self.nodes[q].data.len()
            )));
        }
        self.check_distribution(p, "kl_divergence p")?;
        self.check_distribution(q, "kl_divergence q")?;
        let eps = F::from_f64c(EPS);
        let mut loss = F::zero();
        for (&pi, &qi) in self.nodes[p].data.iter().zip(&self.nodes[q].data) {
            if pi > F::zero() {
                loss = loss + pi * (pi / qi.max(eps)).ln();
            }
        }
        Ok(self.push(Op::KlDiv { p, q }, vec![1], vec![loss]))
    }

    /// Copy of the flat range `[lo, hi)` of `x`, viewed as `shape`.
    pub fn slice(&mut self, x: NodeId, lo: usize, hi: usize, shape: &[usize]) -> Result<NodeId> {
        let n = self.nodes[x].data.len();
        let expect: usize = shape.iter().product();
        if lo >= hi || hi > n || expect != hi - lo {
            return Err(Error::Shape(format!(
                "slice [{lo},{hi}) with shape {shape:?} invalid for node of {n} elements"
            )));
        }
        let data = self.nodes[x].data[lo..hi].to_vec();
        Ok(self.push(Op::Slice { x, lo, hi }, shape.to_vec(), data))
    }

    /// Row `row` of a `[r,c]` node as `[1,c]`.
    pub fn slice_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "slice_row input")?;
        if row >= r {
            return Err(Error::Shape(format!("row {row} out of range for [{r},{c}]")));
        }
        self.slice(x, row * c, (row + 1) * c, &[1, c])
    }

    /// Stacks 2-d parts with equal column counts into `[Σ rows, c]`.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let (_, c) = self.dims2(parts[0], "concat part")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat part")?;
            if pc != c {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {pc} vs {c}"
                )));
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p].data);
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, vec![rows, c], data))
    }

    /// Concatenates single-row parts side by side into `[1, Σ c]`.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let mut cols = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat part")?;
            if r != 1 {
                return Err(Error::Shape(format!(
                    "concat_cols parts must be single rows, got [{r},{c}]"
                )));
            }
            cols += c;
            data.extend_from_slice(&self.nodes[p].data);
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, vec![1, cols], data))
    }

    /// Concatenates scalar nodes into a `[n]` vector (used for batch sums).
    pub fn concat_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.nodes[p].data.len() != 1 {
                return Err(Error::Shape("concat_scalars expects scalar nodes".into()));
            }
            data.push(self.nodes[p].data[0]);
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, vec![parts.len()], data))
    }

    /// Same data, new shape. Gradient passes through unchanged.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let expect: usize = shape.iter().product();
        if expect != self.nodes[x].data.len() {
            return Err(Error::Shape(format!(
                "reshape to {shape:?} invalid for node of {} elements",
                self.nodes[x].data.len()
            )));
        }
        let data = self.nodes[x].data.clone();
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), data))
    }

    // ───── backward ─────

    fn add_grad(&mut self, id: NodeId, g: &[F]) {
        debug_assert_eq!(g.len(), self.nodes[id].data.len());
        match &mut self.nodes[id].grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => self.nodes[id].grad = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar `loss` node. Seeds its gradient with 1
    /// and visits nodes in reverse creation (= reverse topological) order.
    ///
    /// A tape can be walked backwards once; a second call without a fresh
    /// forward pass is a usage error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward called twice on the same tape; run a new forward pass first".into(),
            ));
        }
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.backward_done = true;
        self.add_grad(loss, &[F::one()]);

        for id in (0..=loss).rev() {
            let Some(d_out) = self.nodes[id].grad.clone() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    // d_a = d_out . b^T
                    let mut d_a = vec![F::zero(); m * k];
                    {
                        let bd = &self.nodes[b].data;
                        for i in 0..m {
                            for j in 0..n {
                                let d = d_out[i * n + j];
                                if d != F::zero() {
                                    for l in 0..k {
                                        d_a[i * k + l] = d_a[i * k + l] + d * bd[l * n + j];
                                    }
                                }
                            }
                        }
                    }
                    // d_b = a^T . d_out
                    let mut d_b = vec![F::zero(); k * n];
                    {
                        let ad = &self.nodes[a].data;
                        for i in 0..m {
                            for l in 0..k {
                                let av = ad[i * k + l];
                                if av != F::zero() {
                                    for j in 0..n {
                                        d_b[l * n + j] = d_b[l * n + j] + av * d_out[i * n + j];
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(a, &d_a);
                    self.add_grad(b, &d_b);
                }
                Op::Conv1d {
                    x,
                    filters,
                    bias,
                    stride,
                } => {
                    let d = self.nodes[x].shape[1];
                    let (k_f, w) = (self.nodes[filters].shape[0], self.nodes[filters].shape[1]);
                    let out_len = self.nodes[id].shape[0];
                    let mut d_x = vec![F::zero(); self.nodes[x].data.len()];
                    let mut d_f = vec![F::zero(); self.nodes[filters].data.len()];
                    let mut d_b = vec![F::zero(); k_f];
                    {
                        let xd = &self.nodes[x].data;
                        let fd = &self.nodes[filters].data;
                        for t in 0..out_len {
                            let base = t * stride;
                            for kf in 0..k_f {
                                let g = d_out[t * k_f + kf];
                                if g == F::zero() {
                                    continue;
                                }
                                d_b[kf] = d_b[kf] + g;
                                for i in 0..w {
                                    let xrow = (base + i) * d;
                                    let frow = (kf * w + i) * d;
                                    for c in 0..d {
                                        d_x[xrow + c] = d_x[xrow + c] + g * fd[frow + c];
                                        d_f[frow + c] = d_f[frow + c] + g * xd[xrow + c];
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(x, &d_x);
                    self.add_grad(filters, &d_f);
                    self.add_grad(bias, &d_b);
                }
                Op::MeanRows { x } => {
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let inv = F::from_f64c(1.0 / r as f64);
                    let mut d_x = vec![F::zero(); r * c];
                    for row in 0..r {
                        for col in 0..c {
                            d_x[row * c + col] = d_out[col] * inv;
                        }
                    }
                    self.add_grad(x, &d_x);
                }
                Op::SumAll { x } => {
                    let d_x = vec![d_out[0]; self.nodes[x].data.len()];
                    self.add_grad(x, &d_x);
                }
                Op::Add { a, b } => {
                    self.add_grad(a, &d_out);
                    self.add_grad(b, &d_out);
                }
                Op::Mul { a, b } => {
                    let d_a: Vec<F> = d_out
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    let d_b: Vec<F> = d_out
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.add_grad(a, &d_a);
                    self.add_grad(b, &d_b);
                }
                Op::Scale { x, c } => {
                    let d_x: Vec<F> = d_out.iter().map(|&g| g * c).collect();
                    self.add_grad(x, &d_x);
                }
                Op::ScalarMul { s, x } => {
                    let sv = self.nodes[s].data[0];
                    let mut d_s = F::zero();
                    for (&g, &v) in d_out.iter().zip(&self.nodes[x].data) {
                        d_s = d_s + g * v;
                    }
                    let d_x: Vec<F> = d_out.iter().map(|&g| g * sv).collect();
                    self.add_grad(s, &[d_s]);
                    self.add_grad(x, &d_x);
                }
                Op::Sigmoid { x } => {
                    let one = F::one();
                    let d_x: Vec<F> = d_out
                        .iter()
                        .zip(&self.nodes[id].data)
                        .map(|(&g, &y)| g * y * (one - y))
                        .collect();
                    self.add_grad(x, &d_x);
                }
                Op::Tanh { x } => {
                    let one = F::one();
                    let d_x: Vec<F> = d_out
                        .iter()
                        .zip(&self.nodes[id].data)
                        .map(|(&g, &y)| g * (one - y * y))
                        .collect();
                    self.add_grad(x, &d_x);
                }
                Op::Log { x } => {
                    let eps = F::from_f64c(EPS);
                    let d_x: Vec<F> = d_out
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(&g, &v)| if v > eps { g / v } else { F::zero() })
                        .collect();
                    self.add_grad(x, &d_x);
                }
                Op::SoftmaxT { x, t } => {
                    let p = &self.nodes[id].data;
                    let mut dot = F::zero();
                    for (&g, &pi) in d_out.iter().zip(p) {
                        dot = dot + g * pi;
                    }
                    let d_x: Vec<F> = d_out
                        .iter()
                        .zip(p)
                        .map(|(&g, &pi)| pi * (g - dot) / t)
                        .collect();
                    self.add_grad(x, &d_x);
                }
                Op::CrossEntropy { y, p } => {
                    let g = d_out[0];
                    let eps = F::from_f64c(EPS);
                    let one = F::one();
                    let d_p: Vec<F> = self.nodes[y]
                        .data
                        .iter()
                        .zip(&self.nodes[p].data)
                        .map(|(&yi, &pi)| -g * yi / pi.max(eps).min(one))
                        .collect();
                    let d_y: Vec<F> = self.nodes[p]
                        .data
                        .iter()
                        .map(|&pi| -g * pi.max(eps).min(one).ln())
                        .collect();
                    self.add_grad(p, &d_p);
                    self.add_grad(y, &d_y);
                }
                Op::KlDiv { p, q } => {
                    let g = d_out[0];
                    let eps = F::from_f64c(EPS);
                    let one = F::one();
                    let d_p: Vec<F> = self.nodes[p]
                        .data
                        .iter()
                        .zip(&self.nodes[q].data)
                        .map(|(&pi, &qi)| {
                            if pi > F::zero() {
                                g * ((pi / qi.max(eps)).ln() + one)
                            } else {
                                F::zero()
                            }
                        })
                        .collect();
                    self.add_grad(p, &d_p);
                    // q is a frozen reference: no gradient.
                }
                Op::Slice { x, lo, hi } => {
                    let mut d_x = vec![F::zero(); self.nodes[x].data.len()];
                    d_x[lo..hi].copy_from_slice(&d_out);
                    self.add_grad(x, &d_x);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in &parts {
                        let n = self.nodes[p].data.len();
                        self.add_grad(p, &d_out[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Reshape { x } => {
                    self.add_grad(x, &d_out);
                }
            }
        }
        Ok(())
    }
}

fn matmul_into<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let v = tape.leaf(vec![3.0, 4.0], &[2, 1]).unwrap();
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.data(out), &[3.0, 4.0]);

        let a = tape.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.leaf(vec![3.0, 4.0], &[2, 1]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[11.0]);
    }

    #[test]
    fn matmul_grad_matches_hand_chain_rule() {
        // a=[[1,2]], b=[[3,4],[5,6]], upstream [[1,1]] -> grad_a [[7,11]]
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(out); // upstream grad of ones
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[7.0, 11.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.leaf(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv1d_sliding_dot_product() {
        // ones(4x1) * ones filter of width 2, stride 1 -> [2,2,2]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0; 4], &[4, 1]).unwrap();
        let f = tape.leaf(vec![1.0, 1.0], &[1, 2, 1]).unwrap();
        let b = tape.leaf(vec![0.0], &[1]).unwrap();
        let out = tape.conv1d(x, f, b, 1).unwrap();
        assert_eq!(tape.shape(out), &[3, 1]);
        assert_eq!(tape.data(out), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn conv1d_width_one_identity_filter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0, 0.5], &[4, 1]).unwrap();
        let f = tape.leaf(vec![1.0], &[1, 1, 1]).unwrap();
        let b = tape.leaf(vec![0.0], &[1]).unwrap();
        let out = tape.conv1d(x, f, b, 1).unwrap();
        assert_eq!(tape.data(out), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn conv1d_output_length_floor_rule() {
        // len 5, w=2, stride 2 -> floor((5-2)/2)+1 = 2 outputs
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0; 5], &[5, 1]).unwrap();
        let f = tape.leaf(vec![1.0, 1.0], &[1, 2, 1]).unwrap();
        let b = tape.leaf(vec![0.0], &[1]).unwrap();
        let out = tape.conv1d(x, f, b, 2).unwrap();
        assert_eq!(tape.shape(out), &[2, 1]);
    }

    #[test]
    fn conv1d_filter_wider_than_input_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0; 3], &[3, 1]).unwrap();
        let f = tape.leaf(vec![1.0; 4], &[1, 4, 1]).unwrap();
        let b = tape.leaf(vec![0.0], &[1]).unwrap();
        assert!(matches!(tape.conv1d(x, f, b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_rows_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2.0, 4.0], &[2, 1]).unwrap();
        let out = tape.mean_rows(x).unwrap();
        assert_eq!(tape.data(out), &[3.0]);

        let single = tape.leaf(vec![7.0, -1.0], &[1, 2]).unwrap();
        let out1 = tape.mean_rows(single).unwrap();
        assert_eq!(tape.data(out1), &[7.0, -1.0]);

        let constant = tape.leaf(vec![5.0; 6], &[3, 2]).unwrap();
        let outc = tape.mean_rows(constant).unwrap();
        assert_eq!(tape.data(outc), &[5.0, 5.0]);
    }

    #[test]
    fn softmax_matches_closed_form_and_scaling() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.leaf(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let u = tape.softmax_t(zero, 3.7).unwrap();
        for &v in tape.data(u) {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }

        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let p = tape.softmax_t(x, 1.0).unwrap();
        assert!(close(tape.data(p)[0], 0.2689414213699951, 1e-12));
        assert!(close(tape.data(p)[1], 0.7310585786300049, 1e-12));

        // [2,4] at T=2 equals [1,2] at T=1
        let x2 = tape.leaf(vec![2.0, 4.0], &[2]).unwrap();
        let p2 = tape.softmax_t(x2, 2.0).unwrap();
        assert!(close(tape.data(p2)[0], 0.2689414213699951, 1e-12));
        assert!(close(tape.data(p2)[1], 0.7310585786300049, 1e-12));
    }

    #[test]
    fn softmax_rejects_bad_temperature_and_nonfinite_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(tape.softmax_t(x, 0.0), Err(Error::Domain(_))));
        assert!(matches!(tape.softmax_t(x, -1.0), Err(Error::Domain(_))));
        let bad = tape.leaf(vec![f64::NAN, 1.0], &[2]).unwrap();
        assert!(matches!(tape.softmax_t(bad, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let mut tape = Tape::<f64>::new();
        // perfect prediction
        let y = tape.leaf(vec![0.0, 1.0], &[2]).unwrap();
        let p = tape.leaf(vec![0.0, 1.0], &[2]).unwrap();
        let l = tape.cross_entropy(y, p).unwrap();
        assert_eq!(tape.value(l), 0.0);
        // y=[1,0], p=[.5,.5] -> ln 2
        let y2 = tape.leaf(vec![1.0, 0.0], &[2]).unwrap();
        let p2 = tape.leaf(vec![0.5, 0.5], &[2]).unwrap();
        let l2 = tape.cross_entropy(y2, p2).unwrap();
        assert!(close(tape.value(l2), std::f64::consts::LN_2, 1e-15));
        // entropy of uniform
        let y3 = tape.leaf(vec![0.5, 0.5], &[2]).unwrap();
        let p3 = tape.leaf(vec![0.5, 0.5], &[2]).unwrap();
        let l3 = tape.cross_entropy(y3, p3).unwrap();
        assert!(close(tape.value(l3), std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn cross_entropy_length_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let y = tape.leaf(vec![1.0, 0.0], &[2]).unwrap();
        let p = tape.leaf(vec![0.5, 0.25, 0.25], &[3]).unwrap();
        assert!(matches!(tape.cross_entropy(y, p), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_hand_cases_and_clamp() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(vec![0.3, 0.7], &[2]).unwrap();
        let q = tape.leaf(vec![0.3, 0.7], &[2]).unwrap();
        let l = tape.kl_divergence(p, q).unwrap();
        assert!(close(tape.value(l), 0.0, 1e-15));

        let p2 = tape.leaf(vec![0.5, 0.5], &[2]).unwrap();
        let q2 = tape.leaf(vec![0.25, 0.75], &[2]).unwrap();
        let l2 = tape.kl_divergence(p2, q2).unwrap();
        assert!(close(tape.value(l2), 0.1438410362258904, 1e-12));

        // p=[1,0], q=[~0,1]: clamp keeps the value near ln(1/eps)
        let p3 = tape.leaf(vec![1.0, 0.0], &[2]).unwrap();
        let q3 = tape.leaf(vec![0.0, 1.0], &[2]).unwrap();
        let l3 = tape.kl_divergence(p3, q3).unwrap();
        assert!(close(tape.value(l3), (1.0 / EPS).ln(), 1e-9));
    }

    #[test]
    fn backward_square_constant_and_sum() {
        // loss = x*x at x=3 -> grad 6
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![3.0], &[1]).unwrap();
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        // loss = constant -> grads stay empty
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(vec![2.0], &[1]).unwrap();
        let c = tape.scalar_leaf(5.0);
        tape.backward(c).unwrap();
        assert!(tape.grad(a).is_none());

        // loss = a + b -> both grads 1
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(vec![2.0], &[1]).unwrap();
        let b = tape.leaf(vec![-1.0], &[1]).unwrap();
        let s = tape.add(a, b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0], &[1]).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn grad_of_sum_equals_sum_of_grads() {
        // d(f+g)/dx == df/dx + dg/dx with f = 2x, g = x*x at x=1.5
        let run = |mode: u8| -> f64 {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(vec![1.5], &[1]).unwrap();
            let f = tape.scale(x, 2.0);
            let g = tape.mul(x, x).unwrap();
            let loss = match mode {
                0 => tape.add(f, g).unwrap(),
                1 => f,
                _ => g,
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap()[0]
        };
        assert!(close(run(0), run(1) + run(2), 1e-15));
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = x*x + 3x -> dy/dx = 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2.0], &[1]).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let y = tape.add(sq, lin).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn slice_concat_reshape_round_trip_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let r0 = tape.slice_row(x, 0).unwrap();
        let r1 = tape.slice_row(x, 1).unwrap();
        let back = tape.concat_rows(&[r1, r0]).unwrap(); // swapped rows
        let flat = tape.reshape(back, &[4]).unwrap();
        let weights = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let prod = tape.mul(flat, weights).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        // rows were swapped, so x's row0 sees weights [3,4], row1 sees [1,2]
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0, 1.0, 2.0]);
    }
}
