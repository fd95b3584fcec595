use super::tensor::{dot, gemm, norm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
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
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Transpose(Var),
    SoftmaxRows(Var),
    L2NormRows { a: Var, norms: Vec<f64> },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    LeakyRelu { a: Var, slope: f64 },
    SegmentMean { a: Var, groups: Vec<Vec<usize>> },
    GatherRows { a: Var, idx: Vec<usize> },
    Pick { a: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    PairwiseEuclid { a: Var, b: Var },
    PairwiseCosine { a: Var, b: Var, na: Vec<f64>, nb: Vec<f64> },
    NeighborMax { a: Var, argmax: Vec<usize> },
    RelLogits { q: Var, rel: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::L2NormRows { .. } => "l2_normalize_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::SegmentMean { .. } => "segment_mean",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PairwiseEuclid { .. } => "pairwise_euclidean",
            Op::PairwiseCosine { .. } => "pairwise_cosine",
            Op::NeighborMax { .. } => "neighbor_max",
            Op::RelLogits { .. } => "relative_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of primitive applications. Nodes are appended in execution order, so
/// the node list is already a topological order and backward simply walks it
/// in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` is unreachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn slice_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        self.grads[v.0].as_deref_mut()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).require_matrix(op)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (br, bc) = self.mat(b, "matmul")?;
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, tb }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.mat(a, "transpose")?;
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "add_row")?;
        let (r, n2) = self.mat(row, "add_row")?;
        if r != 1 || n != n2 {
            return Err(mismatch("add_row", self.value(a), self.value(row)));
        }
        let rv = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *x += y;
            }
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::AddRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())?;
        self.push(t, Op::Scale { a, c }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect())?;
        self.push(t, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu { a, slope },
        )
    }

    // ---- token-axis structure --------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let (_, n) = self.mat(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.mat(p, "concat_rows")?;
            if c != n {
                return Err(mismatch("concat_rows", self.value(parts[0]), self.value(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat(a, "slice_rows")?;
        if start > end || end > m {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{end} out of bounds for {m} rows"
            )));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        self.push(Tensor::new(vec![end - start, n], data)?, Op::SliceRows { a, start }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a, "gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::InvalidArgument(format!("gather_rows index {i} >= {m}")));
            }
            data.extend_from_slice(self.value(a).row(i));
        }
        self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows { a, idx: idx.to_vec() },
            &[a],
        )
    }

    /// Row `g` of the output is the mean of rows `groups[g]` of `a`.
    pub fn segment_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.mat(a, "segment_mean")?;
        let mut data = vec![0.0; groups.len() * n];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::InvalidArgument(format!("segment_mean: group {g} is empty")));
            }
            let out = &mut data[g * n..(g + 1) * n];
            for &i in rows {
                if i >= m {
                    return Err(Error::InvalidArgument(format!("segment_mean index {i} >= {m}")));
                }
                for (o, x) in out.iter_mut().zip(self.value(a).row(i)) {
                    *o += x;
                }
            }
            let inv = 1.0 / rows.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let g = groups.len();
        self.push(Tensor::new(vec![g, n], data)?, Op::SegmentMean { a, groups }, &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "mean_rows")?;
        if m == 0 {
            return Err(Error::InvalidArgument("mean_rows of zero rows".into()));
        }
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (o, x) in data.iter_mut().zip(self.value(a).row(i)) {
                *o += x;
            }
        }
        data.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Tensor::new(vec![1, n], data)?, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Element `idx[i]` of each row `i`, as an `[m, 1]` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a, "pick")?;
        if idx.len() != m {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: vec![m, n],
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::InvalidArgument(format!("pick column {j} >= {n}")));
            }
            data.push(self.value(a).get2(i, j));
        }
        self.push(Tensor::new(vec![m, 1], data)?, Op::Pick { a, idx: idx.to_vec() }, &[a])
    }

    // ---- normalisation ----------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "softmax_rows")?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n], None);
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::SoftmaxRows(a), &[a])
    }

    /// Divides each row by its Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "l2_normalize_rows")?;
        let mut data = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let nr = norm(row);
            if nr > 0.0 {
                row.iter_mut().for_each(|x| *x /= nr);
            }
            norms.push(nr);
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::L2NormRows { a, norms }, &[a])
    }

    // ---- losses -----------------------------------------------------------

    /// Mean over rows of `-log softmax(logits)[target]`. A row mask restricts
    /// which columns take part in that row's softmax; the target column must
    /// be allowed.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (m, n) = self.mat(logits, "cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: vec![m, n],
                    rhs: vec![mk.len()],
                });
            }
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::InvalidArgument(format!("cross_entropy target {t} >= {n}")));
            }
            let row_mask = mask.as_ref().map(|mk| &mk[i * n..(i + 1) * n]);
            if row_mask.is_some_and(|rm| !rm[t]) {
                return Err(Error::InvalidArgument(format!("cross_entropy target {t} masked out")));
            }
            let row = &mut probs[i * n..(i + 1) * n];
            let lse = softmax_in_place(row, row_mask);
            loss += lse - self.value(logits).get2(i, t);
        }
        loss /= m as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- pairwise geometry -----------------------------------------------

    pub fn pairwise_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = super::tensor::pairwise_euclidean(self.value(a), self.value(b))?;
        self.push(t, Op::PairwiseEuclid { a, b }, &[a, b])
    }

    pub fn pairwise_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = super::tensor::pairwise_cosine(self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let na = (0..va.rows()).map(|i| norm(va.row(i))).collect();
        let nb = (0..vb.rows()).map(|j| norm(vb.row(j))).collect();
        self.push(t, Op::PairwiseCosine { a, b, na, nb }, &[a, b])
    }

    // ---- fused kernels ----------------------------------------------------

    /// `out[j, c] = max over n of a[neighbors[j*k + n], c]`; first index wins ties.
    pub fn neighbor_max(&mut self, a: Var, neighbors: &[usize], k: usize) -> Result<Var> {
        let (m, d) = self.mat(a, "neighbor_max")?;
        if k == 0 || neighbors.len() % k != 0 {
            return Err(Error::InvalidArgument("neighbor_max: bad neighbour table".into()));
        }
        let rows = neighbors.len() / k;
        let va = self.value(a);
        let mut data = vec![f64::NEG_INFINITY; rows * d];
        let mut argmax = vec![0usize; rows * d];
        for j in 0..rows {
            for &nb in &neighbors[j * k..(j + 1) * k] {
                if nb >= m {
                    return Err(Error::InvalidArgument(format!("neighbor index {nb} >= {m}")));
                }
                let src = va.row(nb);
                let out = &mut data[j * d..(j + 1) * d];
                let am = &mut argmax[j * d..(j + 1) * d];
                for c in 0..d {
                    if src[c] > out[c] {
                        out[c] = src[c];
                        am[c] = nb;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![rows, d], data)?, Op::NeighborMax { a, argmax }, &[a])
    }

    /// `out[a, b] = Σ_d q[a, d] · rel[a, b, d]` with `rel` held constant.
    pub fn relative_logits(&mut self, q: Var, rel: Tensor) -> Result<Var> {
        let (na, d) = self.mat(q, "relative_logits")?;
        let rs = rel.shape();
        if rs.len() != 3 || rs[0] != na || rs[2] != d {
            return Err(mismatch("relative_logits", self.value(q), &rel));
        }
        let nb = rs[1];
        let vq = self.value(q);
        let mut data = vec![0.0; na * nb];
        for a in 0..na {
            let qa = vq.row(a);
            for b in 0..nb {
                let off = (a * nb + b) * d;
                data[a * nb + b] = dot(qa, &rel.data()[off..off + d]);
            }
        }
        self.push(Tensor::new(vec![na, nb], data)?, Op::RelLogits { q, rel }, &[q])
    }

    // ---- reverse pass -----------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · op(B)ᵀ
                    gemm(m, n, k, g, false, vb.data(), !tb, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *tb {
                        // B is [n,k]: dB = Gᵀ · A
                        gemm(n, m, k, g, true, va.data(), false, gb, 1.0);
                    } else {
                        // dB = Aᵀ · G
                        gemm(k, m, n, va.data(), true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddRow { a, row } => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    let dst = &mut ga[start * n..start * n + g.len()];
                    dst.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    // out[i,j] = a[j,i]; a is [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, (y, gy)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        let s = dot(y, gy);
                        for j in 0..n {
                            ga[i * n + j] += y[j] * (gy[j] - s);
                        }
                    }
                }
            }
            Op::L2NormRows { a, norms } => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, (y, gy)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        let s = dot(y, gy);
                        for j in 0..n {
                            ga[i * n + j] += (gy[j] - y[j] * s) / norms[i];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).rows();
                if let Some(ga) = self.acc(grads, *a) {
                    let n = g.len();
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] / m as f64;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, y) in out.data().iter().enumerate() {
                        ga[i] += g[i] * y;
                    }
                }
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / va[i];
                    }
                }
            }
            Op::Sin(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * va[i].cos();
                    }
                }
            }
            Op::Cos(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] -= g[i] * va[i].sin();
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += if va[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                }
            }
            Op::SegmentMean { a, groups } => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (gi, rows) in groups.iter().enumerate() {
                        let inv = 1.0 / rows.len() as f64;
                        let src = &g[gi * n..(gi + 1) * n];
                        for &r in rows {
                            for j in 0..n {
                                ga[r * n + j] += src[j] * inv;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &r) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[o * n + j];
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                let n = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * n + j] += g[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let m = targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * n + j] += g[0] * (probs[i * n + j] - onehot) / m;
                        }
                    }
                }
            }
            Op::PairwiseEuclid { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, d) = (va.rows(), va.cols());
                let nb = vb.rows();
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; nb * d];
                for i in 0..m {
                    for j in 0..nb {
                        let dist = out.get2(i, j);
                        if dist == 0.0 {
                            continue;
                        }
                        let w = g[i * nb + j] / dist;
                        for c in 0..d {
                            let diff = va.row(i)[c] - vb.row(j)[c];
                            da[i * d + c] += w * diff;
                            db[j * d + c] -= w * diff;
                        }
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&da).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&db).for_each(|(x, y)| *x += y);
                }
            }
            Op::PairwiseCosine { a, b, na, nb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, d) = (va.rows(), va.cols());
                let n = vb.rows();
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        if na[i] == 0.0 || nb[j] == 0.0 {
                            continue;
                        }
                        let cij = out.get2(i, j);
                        let gij = g[i * n + j];
                        let (ai, bj) = (va.row(i), vb.row(j));
                        for c in 0..d {
                            da[i * d + c] +=
                                gij * (bj[c] / (na[i] * nb[j]) - cij * ai[c] / (na[i] * na[i]));
                            db[j * d + c] +=
                                gij * (ai[c] / (na[i] * nb[j]) - cij * bj[c] / (nb[j] * nb[j]));
                        }
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&da).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&db).for_each(|(x, y)| *x += y);
                }
            }
            Op::NeighborMax { a, argmax } => {
                let d = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (pos, &src) in argmax.iter().enumerate() {
                        ga[src * d + pos % d] += g[pos];
                    }
                }
            }
            Op::RelLogits { q, rel } => {
                let (na, d) = (self.value(*q).rows(), self.value(*q).cols());
                let nb = out.cols();
                if let Some(gq) = self.acc(grads, *q) {
                    for a in 0..na {
                        for b in 0..nb {
                            let w = g[a * nb + b];
                            let off = (a * nb + b) * d;
                            for c in 0..d {
                                gq[a * d + c] += w * rel.data()[off + c];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Stable in-place softmax; masked-out entries become 0. Returns the
/// log-sum-exp of the allowed entries.
pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) -> f64 {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut mx = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > mx {
            mx = x;
        }
    }
    let mut s = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - mx).exp();
            s += *x;
        } else {
            *x = 0.0;
        }
    }
    row.iter_mut().for_each(|x| *x /= s);
    mx + s.ln()
}
