use super::gemm::{gemm, MatRef};
use super::{GradError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `start..start + len` of a stacked matrix.
pub type Segment = (usize, usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    SqrtEps(Var),
    SegmentMean(Var, Vec<Segment>),
    SegmentVar(Var, Vec<Segment>),
    ConcatCols(Var, Var),
    SelectRows(Var, Vec<usize>),
    RowNorm(Var),
    NormalizeRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SqDist(Var, Var),
    CosSim(Var, Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a topological order of the dependency graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reachable(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> GradError {
    GradError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), GradError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(GradError::RankMismatch {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn check_segments(op: &'static str, segs: &[Segment], rows: usize) -> Result<(), GradError> {
    if segs.is_empty() {
        return Err(GradError::InvalidSegments {
            op,
            rows,
            detail: "no segments".into(),
        });
    }
    for &(start, len) in segs {
        if len == 0 || start + len > rows {
            return Err(GradError::InvalidSegments {
                op,
                rows,
                detail: format!("segment ({start}, {len}) out of range"),
            });
        }
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Smallest |input| seen by any ReLU in the graph, if there is one.
    /// Finite-difference checks use this to stay clear of the kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = rank2("matmul", ta)?;
        let (kb, n) = rank2("matmul", tb)?;
        if k != kb {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (_, cols) = ta.dims2();
        if ta.rank() == 0 || tb.rank() != 1 || tb.len() != cols {
            return Err(mismatch(name, ta, tb));
        }
        let bias = tb.data();
        let data = ta
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// `a[i, j] + b[j]` for `a` of shape `[m, n]` and `b` of shape `[n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.row_broadcast("add_row", a, b, |x, y| x + y, Op::AddRow(a, b))
    }

    /// `a[i, j] * b[j]`: scales every column `j` of `a` by `b[j]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.row_broadcast("mul_row", a, b, |x, y| x * y, Op::MulRow(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.val(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `sqrt(a + eps)`, elementwise.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, |x| (x + eps).sqrt(), Op::SqrtEps(a))
    }

    /// Per-segment column means of a stacked `[rows, h]` matrix, giving `[segments, h]`.
    pub fn segment_mean(&mut self, a: Var, segs: &[Segment]) -> Result<Var, GradError> {
        let ta = self.val(a);
        let (rows, h) = rank2("segment_mean", ta)?;
        check_segments("segment_mean", segs, rows)?;
        let mut out = vec![0.0; segs.len() * h];
        for (s, &(start, len)) in segs.iter().enumerate() {
            let dst = &mut out[s * h..(s + 1) * h];
            for r in start..start + len {
                for (d, &x) in dst.iter_mut().zip(ta.row(r)) {
                    *d += x;
                }
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let value = Tensor::new(vec![segs.len(), h], out)?;
        Ok(self.push(value, Op::SegmentMean(a, segs.to_vec()), &[a]))
    }

    /// Per-segment biased (1/T) column variances.
    pub fn segment_var(&mut self, a: Var, segs: &[Segment]) -> Result<Var, GradError> {
        let ta = self.val(a);
        let (rows, h) = rank2("segment_var", ta)?;
        check_segments("segment_var", segs, rows)?;
        let means = segment_means(ta, segs, h);
        let mut out = vec![0.0; segs.len() * h];
        for (s, &(start, len)) in segs.iter().enumerate() {
            let mu = &means[s * h..(s + 1) * h];
            let dst = &mut out[s * h..(s + 1) * h];
            for r in start..start + len {
                for ((d, &x), &m) in dst.iter_mut().zip(ta.row(r)).zip(mu) {
                    *d += (x - m) * (x - m);
                }
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let value = Tensor::new(vec![segs.len(), h], out)?;
        Ok(self.push(value, Op::SegmentVar(a, segs.to_vec()), &[a]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, p) = rank2("concat_cols", ta)?;
        let (mb, q) = rank2("concat_cols", tb)?;
        if m != mb {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let value = Tensor::new(vec![m, p + q], out)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, GradError> {
        let ta = self.val(a);
        let (m, n) = rank2("select_rows", ta)?;
        if rows.is_empty() {
            return Err(GradError::InvalidSegments {
                op: "select_rows",
                rows: m,
                detail: "empty selection".into(),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(GradError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    bound: m,
                });
            }
            out.extend_from_slice(ta.row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec()), &[a]))
    }

    /// L2 norm of each row; a rank 1 input yields a scalar.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, GradError> {
        let ta = self.val(a);
        let (m, n) = ta.dims2();
        let norms: Vec<f64> = ta
            .data()
            .chunks_exact(n)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let shape = match ta.rank() {
            0 | 1 => vec![],
            2 => vec![m],
            _ => {
                return Err(GradError::RankMismatch {
                    op: "row_norm",
                    expected: 2,
                    shape: ta.shape().to_vec(),
                })
            }
        };
        let value = Tensor::new(shape, norms)?;
        Ok(self.push(value, Op::RowNorm(a), &[a]))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (_, n) = ta.dims2();
        let data = ta
            .data()
            .chunks_exact(n)
            .flat_map(|r| {
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
                r.iter().map(move |x| x / norm)
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::NormalizeRows(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (_, n) = ta.dims2();
        let data = ta.data().chunks_exact(n).flat_map(softmax_row).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// `x - logsumexp(x)` per row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (_, n) = ta.dims2();
        let data = ta
            .data()
            .chunks_exact(n)
            .flat_map(|r| {
                let lse = log_sum_exp(r);
                r.iter().map(move |x| x - lse)
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Pairwise squared Euclidean distances between rows: `[m, k] × [n, k] → [m, n]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = rank2("sq_dist", ta)?;
        let (n, kb) = rank2("sq_dist", tb)?;
        if k != kb {
            return Err(mismatch("sq_dist", ta, tb));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = ta.row(i);
            for j in 0..n {
                out.push(
                    ai.iter()
                        .zip(tb.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum(),
                );
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::SqDist(a, b), &[a, b]))
    }

    /// Pairwise cosine similarities between rows: `[m, k] × [n, k] → [m, n]`.
    pub fn cos_sim(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = rank2("cos_sim", ta)?;
        let (n, kb) = rank2("cos_sim", tb)?;
        if k != kb {
            return Err(mismatch("cos_sim", ta, tb));
        }
        let na = row_norms(ta);
        let nb = row_norms(tb);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let dot: f64 = ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| x * y).sum();
                out.push(dot / (na[i] * nb[j]));
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::CosSim(a, b), &[a, b]))
    }

    /// `out[i] = a[i, cols[i]]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var, GradError> {
        let ta = self.val(a);
        let (m, n) = rank2("pick", ta)?;
        if cols.len() != m {
            return Err(GradError::ShapeMismatch {
                op: "pick",
                lhs: ta.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let mut out = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(GradError::IndexOutOfRange {
                    op: "pick",
                    index: c,
                    bound: n,
                });
            }
            out.push(ta.get(i, c));
        }
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push(value, Op::Pick(a, cols.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `Σ w[i] · a[i]` over the flattened tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var, GradError> {
        let t = self.val(a);
        if t.len() != weights.len() {
            return Err(GradError::ShapeMismatch {
                op: "weighted_sum",
                lhs: t.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = t.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum(a, weights.to_vec()),
            &[a],
        ))
    }

    /// Propagates `d root / d node` for every node upstream of the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, GradError> {
        let root_value = self.val(root);
        if !root_value.is_scalar() {
            return Err(GradError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Only nodes that can carry gradient keep one.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                let gm = MatRef::new(g, m, n);
                acc(*a, &mut |da| {
                    gemm(gm, MatRef::new(tb.data(), k, n).t(), 1.0, da)
                });
                acc(*b, &mut |db| {
                    gemm(MatRef::new(ta.data(), m, k).t(), gm, 1.0, db)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = self.val(*b).len();
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks_exact(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let n = tb.len();
                acc(*a, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((d, g), s) in drow.iter_mut().zip(grow).zip(tb.data()) {
                            *d += g * s;
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for (grow, xrow) in g.chunks_exact(n).zip(ta.data().chunks_exact(n)) {
                        for ((d, g), x) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += g * x;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let ta = self.val(*a);
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Neg(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)),
            Op::Scale(a, c) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)
            }),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Log(a) => {
                let ta = self.val(*a);
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += g / x;
                    }
                });
            }
            Op::SqrtEps(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * 0.5 / y;
                }
            }),
            Op::SegmentMean(a, segs) => {
                let (_, h) = self.val(*a).dims2();
                acc(*a, &mut |d| {
                    for (s, &(start, len)) in segs.iter().enumerate() {
                        let gs = &g[s * h..(s + 1) * h];
                        let inv = 1.0 / len as f64;
                        for r in start..start + len {
                            for (d, g) in d[r * h..(r + 1) * h].iter_mut().zip(gs) {
                                *d += g * inv;
                            }
                        }
                    }
                });
            }
            Op::SegmentVar(a, segs) => {
                let ta = self.val(*a);
                let (_, h) = ta.dims2();
                let means = segment_means(ta, segs, h);
                acc(*a, &mut |d| {
                    for (s, &(start, len)) in segs.iter().enumerate() {
                        let gs = &g[s * h..(s + 1) * h];
                        let mu = &means[s * h..(s + 1) * h];
                        let c = 2.0 / len as f64;
                        for r in start..start + len {
                            let x = ta.row(r);
                            for j in 0..h {
                                d[r * h + j] += gs[j] * c * (x[j] - mu[j]);
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = self.val(*a).dims2();
                let (_, q) = self.val(*b).dims2();
                acc(*a, &mut |d| {
                    for r in 0..m {
                        add_into(&mut d[r * p..(r + 1) * p], &g[r * (p + q)..r * (p + q) + p]);
                    }
                });
                acc(*b, &mut |d| {
                    for r in 0..m {
                        add_into(
                            &mut d[r * q..(r + 1) * q],
                            &g[r * (p + q) + p..(r + 1) * (p + q)],
                        );
                    }
                });
            }
            Op::SelectRows(a, rows) => {
                let (_, n) = self.val(*a).dims2();
                acc(*a, &mut |d| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::RowNorm(a) => {
                let ta = self.val(*a);
                let (_, n) = ta.dims2();
                acc(*a, &mut |d| {
                    for (r, (drow, xrow)) in d
                        .chunks_exact_mut(n)
                        .zip(ta.data().chunks_exact(n))
                        .enumerate()
                    {
                        let norm = out.data()[r];
                        if norm > 0.0 {
                            for (d, x) in drow.iter_mut().zip(xrow) {
                                *d += g[r] * x / norm;
                            }
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let ta = self.val(*a);
                let (_, n) = ta.dims2();
                acc(*a, &mut |d| {
                    for (r, drow) in d.chunks_exact_mut(n).enumerate() {
                        let x = &ta.data()[r * n..(r + 1) * n];
                        let y = &out.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                        let ydotg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += (gr[j] - y[j] * ydotg) / norm;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = out.dims2();
                acc(*a, &mut |d| {
                    for ((drow, y), gr) in d
                        .chunks_exact_mut(n)
                        .zip(out.data().chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let ydotg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += y[j] * (gr[j] - ydotg);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (_, n) = out.dims2();
                acc(*a, &mut |d| {
                    for ((drow, y), gr) in d
                        .chunks_exact_mut(n)
                        .zip(out.data().chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            drow[j] += gr[j] - y[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = ta.dims2();
                let (n, _) = tb.dims2();
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let c = 2.0 * g[i * n + j];
                            for p in 0..k {
                                d[i * k + p] += c * (ta.get(i, p) - tb.get(j, p));
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let c = 2.0 * g[i * n + j];
                            for p in 0..k {
                                d[j * k + p] -= c * (ta.get(i, p) - tb.get(j, p));
                            }
                        }
                    }
                });
            }
            Op::CosSim(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = ta.dims2();
                let (n, _) = tb.dims2();
                let na = row_norms(ta);
                let nb = row_norms(tb);
                // d cos / d a_i = b_j / (|a_i||b_j|) - cos · a_i / |a_i|²
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let c = out.get(i, j);
                            for p in 0..k {
                                d[i * k + p] += gij
                                    * (tb.get(j, p) / (na[i] * nb[j])
                                        - c * ta.get(i, p) / (na[i] * na[i]));
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let c = out.get(i, j);
                            for p in 0..k {
                                d[j * k + p] += gij
                                    * (ta.get(i, p) / (na[i] * nb[j])
                                        - c * tb.get(j, p) / (nb[j] * nb[j]));
                            }
                        }
                    }
                });
            }
            Op::Pick(a, cols) => {
                let (_, n) = self.val(*a).dims2();
                acc(*a, &mut |d| {
                    for (i, &c) in cols.iter().enumerate() {
                        d[i * n + c] += g[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let inv = 1.0 / self.val(*a).len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] * inv));
            }
            Op::WeightedSum(a, w) => acc(*a, &mut |d| {
                for (d, w) in d.iter_mut().zip(w) {
                    *d += g[0] * w;
                }
            }),
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let (_, n) = t.dims2();
    t.data()
        .chunks_exact(n)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn segment_means(t: &Tensor, segs: &[Segment], h: usize) -> Vec<f64> {
    let mut means = vec![0.0; segs.len() * h];
    for (s, &(start, len)) in segs.iter().enumerate() {
        let dst = &mut means[s * h..(s + 1) * h];
        for r in start..start + len {
            add_into(dst, t.row(r));
        }
        let inv = 1.0 / len as f64;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    means
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0, 4.0]));
        let n = g.row_norm(x).unwrap();
        let n2 = g.mul(n, n).unwrap();
        assert_eq!(g.scalar(n2), 25.0);
        let grad = g.backward(n2).unwrap().get(x);
        assert!(close(grad.data(), &[6.0, 8.0], 1e-12));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(GradError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_err());
        assert!(g.add_row(a, b).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[3]));
        assert!(!grads.is_reachable(unused));
    }

    #[test]
    fn segment_statistics() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 2.0, 5.0, 2.0]).unwrap());
        let m = g.segment_mean(x, &[(0, 3), (2, 1)]).unwrap();
        let v = g.segment_var(x, &[(0, 3), (2, 1)]).unwrap();
        assert!(close(g.value(m).data(), &[3.0, 2.0, 5.0, 2.0], 1e-15));
        assert!(close(g.value(v).data(), &[8.0 / 3.0, 0.0, 0.0, 0.0], 1e-15));
        assert!(g.segment_mean(x, &[(2, 2)]).is_err());
    }

    #[test]
    fn cosine_and_distance_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap());
        let c = g.cos_sim(a, b).unwrap();
        let d = g.sq_dist(a, b).unwrap();
        assert!(close(g.value(c).data(), &[1.0, 0.0], 1e-15));
        assert!(close(g.value(d).data(), &[4.0, 13.0], 1e-15));
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.log_softmax_rows(x);
        assert!(g.value(y).all_finite());
        assert!(g.value(y).data()[0].abs() < 1e-300);
    }
}
