use super::kernels::{mm, mm_nt, mm_tn};
use super::{sigmoid, Tensor, TensorError, COSINE_EPS};
use crate::params::{ParamId, ParamStore};

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SliceCols { input: Var, start: usize },
    GatherRows { input: Var, index: Vec<usize> },
    Mean { input: Var, axis: usize },
    Sum(Var),
    SoftmaxRows(Var),
    CosineRows(Var, Var),
    PairwiseCosine { inputs: Vec<Var>, squared: bool },
    Bce { probs: Var, labels: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in execution order, so every op's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no parameter gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf bound to a parameter; its gradient lands in the store on
    /// [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(m, n, mm(ta.data(), tb.data(), m, k, n));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1×n` row (a bias) to every row of an `r×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let out = Tensor::matrix(ta.rows(), n, data);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Scales row `i` of an `r×n` matrix by `col[i]`, with `col` shaped `r×1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for (chunk, s) in data.chunks_mut(n.max(1)).zip(tc.data()) {
            for x in chunk {
                *x *= s;
            }
        }
        let out = Tensor::matrix(ta.rows(), n, data);
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or_else(|| TensorError::Degenerate {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let rows = self.value(first).rows();
        let cols = self.value(first).cols();
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut total = 0;
                for &v in inputs {
                    let t = self.value(v);
                    if t.cols() != cols {
                        return Err(shape_err("concat", self.value(first), t));
                    }
                    total += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(total, cols, data)
            }
            1 => {
                let mut width = 0;
                for &v in inputs {
                    let t = self.value(v);
                    if t.rows() != rows {
                        return Err(shape_err("concat", self.value(first), t));
                    }
                    width += t.cols();
                }
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for &v in inputs {
                        data.extend_from_slice(self.value(v).row_slice(r));
                    }
                }
                Tensor::matrix(rows, width, data)
            }
            _ => {
                return Err(TensorError::Contract(format!(
                    "concat axis {axis} unsupported for 2-D tensors"
                )))
            }
        };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(TensorError::Shape {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let out = Tensor::matrix(t.rows(), w, data);
        Ok(self.push(out, Op::SliceCols { input: a, start }))
    }

    /// Selects rows by index (embedding lookup, scenario routing).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let n = t.cols();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= t.rows() {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: t.rows(),
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(index.len(), n, data);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    /// Arithmetic mean over rows (`axis = 0`, result `1×n`) or columns
    /// (`axis = 1`, result `r×1`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = match axis {
            0 if r > 0 => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(t.row_slice(i)) {
                        *s += v;
                    }
                }
                Tensor::matrix(1, c, acc.into_iter().map(|s| s / r as f64).collect())
            }
            1 if c > 0 => Tensor::matrix(
                r,
                1,
                (0..r)
                    .map(|i| t.row_slice(i).iter().sum::<f64>() / c as f64)
                    .collect(),
            ),
            0 | 1 => {
                return Err(TensorError::Degenerate {
                    op: "mean_axis",
                    reason: format!("axis {axis} of shape {:?} is empty", t.shape()),
                })
            }
            _ => {
                return Err(TensorError::Contract(format!(
                    "mean axis {axis} unsupported for 2-D tensors"
                )))
            }
        };
        Ok(self.push(out, Op::Mean { input: a, axis }))
    }

    /// Sum of all elements, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise cosine similarity of two `r×d` matrices, result `r×1`.
    ///
    /// Rows whose norm falls below [`COSINE_EPS`] yield cosine 0 with zero
    /// gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("cosine", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = (0..ta.rows())
            .map(|r| super::cosine(ta.row_slice(r), tb.row_slice(r)))
            .collect();
        let out = Tensor::matrix(ta.rows(), 1, data);
        Ok(self.push(out, Op::CosineRows(a, b)))
    }

    /// Sum over samples and unordered input pairs `i < j` of the row-wise
    /// cosine between `inputs[i]` and `inputs[j]` (squared when `squared`).
    ///
    /// Evaluated without enumerating pairs: rows are normalized once, and for
    /// the raw form the pair sum per sample is `(‖Σ n̂‖² − Σ ‖n̂‖²) / 2`; the
    /// squared form uses the per-sample Gram matrix of the normalized rows.
    pub fn pairwise_cosine_sum(
        &mut self,
        inputs: &[Var],
        squared: bool,
    ) -> Result<Var, TensorError> {
        if inputs.len() < 2 {
            return Err(TensorError::Degenerate {
                op: "pairwise_cosine_sum",
                reason: format!("need at least 2 inputs, got {}", inputs.len()),
            });
        }
        for &v in &inputs[1..] {
            self.same_shape("pairwise_cosine_sum", inputs[0], v)?;
        }
        let normed: Vec<(Tensor, Vec<f64>)> =
            inputs.iter().map(|&v| normalize_rows(self.value(v))).collect();
        let rows = normed[0].0.rows();
        let d = normed[0].0.cols();
        let mut total = 0.0;
        if squared {
            let gram = sample_grams(&normed);
            let m = inputs.len();
            for g in gram.chunks(m * m) {
                let fro: f64 = g.iter().map(|x| x * x).sum();
                let diag: f64 = (0..m).map(|i| g[i * m + i] * g[i * m + i]).sum();
                total += 0.5 * (fro - diag);
            }
        } else {
            let mut acc = vec![0.0; d];
            for r in 0..rows {
                acc.fill(0.0);
                let mut self_sq = 0.0;
                for (n, _) in &normed {
                    for (s, x) in acc.iter_mut().zip(n.row_slice(r)) {
                        *s += x;
                        self_sq += x * x;
                    }
                }
                let sum_sq: f64 = acc.iter().map(|x| x * x).sum();
                total += 0.5 * (sum_sq - self_sq);
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::PairwiseCosine {
                inputs: inputs.to_vec(),
                squared,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    pub fn bce_mean(&mut self, probs: Var, labels: &[f64]) -> Result<Var, TensorError> {
        let p = self.value(probs);
        if p.len() != labels.len() {
            return Err(TensorError::Shape {
                op: "bce_mean",
                left: p.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(TensorError::Degenerate {
                op: "bce_mean",
                reason: "empty batch".into(),
            });
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| bce_term(q, y))
            .sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            out,
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar node. Nodes are visited in exact reverse
    /// creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and writes parameter gradients into `store`,
    /// zeroing every slot first so unreachable parameters read zero.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.backward(loss)?;
        store.zero_grad();
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = Tensor::matrix(m, k, mm_nt(g.data(), tb.data(), m, n, k));
                let gb = Tensor::matrix(k, n, mm_tn(ta.data(), g.data(), m, k, n));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip_with(g, tb, |x, y| x * y));
                accumulate(grads, *b, zip_with(g, ta, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut gr = vec![0.0; n];
                for chunk in g.data().chunks(n.max(1)) {
                    for (s, v) in gr.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                let shape = self.value(*row).shape().to_vec();
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, Tensor::new(shape, gr).expect("bias shape"));
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let n = ta.cols();
                let mut ga = g.clone();
                let mut gc = vec![0.0; tc.len()];
                for r in 0..ta.rows() {
                    let s = tc.data()[r];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    gc[r] = grow.iter().zip(ta.row_slice(r)).map(|(x, y)| x * y).sum();
                    for x in &mut ga.data_mut()[r * n..(r + 1) * n] {
                        *x *= s;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *col, Tensor::matrix(tc.rows(), 1, gc));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let ga = zip_with(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_with(g, out, |gv, s| gv * s * (1.0 - s));
                accumulate(grads, *a, ga);
            }
            Op::Concat { inputs, axis } => {
                let rows = out.rows();
                let width = out.cols();
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let part = if *axis == 0 {
                        let n = t.len();
                        let p = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        p
                    } else {
                        let c = t.cols();
                        let mut p = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            p.extend_from_slice(&g.data()[r * width + offset..r * width + offset + c]);
                        }
                        offset += c;
                        p
                    };
                    accumulate(grads, v, Tensor::new(t.shape().to_vec(), part).expect("slice"));
                }
            }
            Op::SliceCols { input, start } => {
                let t = self.value(*input);
                let (c, w) = (t.cols(), out.cols());
                let mut ga = Tensor::zeros(t.shape());
                for r in 0..t.rows() {
                    ga.data_mut()[r * c + start..r * c + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                accumulate(grads, *input, ga);
            }
            Op::GatherRows { input, index } => {
                let t = self.value(*input);
                let n = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                for (k, &i) in index.iter().enumerate() {
                    let src = &g.data()[k * n..(k + 1) * n];
                    for (d, s) in ga.data_mut()[i * n..(i + 1) * n].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                accumulate(grads, *input, ga);
            }
            Op::Mean { input, axis } => {
                let t = self.value(*input);
                let (r, c) = (t.rows(), t.cols());
                let mut ga = Tensor::zeros(t.shape());
                {
                    let data = ga.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            data[i * c + j] = if *axis == 0 {
                                g.data()[j] / r as f64
                            } else {
                                g.data()[i] / c as f64
                            };
                        }
                    }
                }
                accumulate(grads, *input, ga);
            }
            Op::Sum(a) => {
                let gv = g.item();
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut ga = g.clone();
                for (r, grow) in ga.data_mut().chunks_mut(n.max(1)).enumerate() {
                    let s = out.row_slice(r);
                    let dot: f64 = grow.iter().zip(s).map(|(x, y)| x * y).sum();
                    for (x, sv) in grow.iter_mut().zip(s) {
                        *x = sv * (*x - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.cols();
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for r in 0..ta.rows() {
                    let (x, y) = (ta.row_slice(r), tb.row_slice(r));
                    let nx = norm(x);
                    let ny = norm(y);
                    if nx < COSINE_EPS || ny < COSINE_EPS {
                        continue;
                    }
                    let c = out.data()[r];
                    let gv = g.data()[r];
                    let gar = &mut ga.data_mut()[r * d..(r + 1) * d];
                    for k in 0..d {
                        gar[k] = gv * (y[k] / (nx * ny) - c * x[k] / (nx * nx));
                    }
                    let gbr = &mut gb.data_mut()[r * d..(r + 1) * d];
                    for k in 0..d {
                        gbr[k] = gv * (x[k] / (nx * ny) - c * y[k] / (ny * ny));
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::PairwiseCosine { inputs, squared } => {
                let gv = g.item();
                let normed: Vec<(Tensor, Vec<f64>)> =
                    inputs.iter().map(|&v| normalize_rows(self.value(v))).collect();
                let m = inputs.len();
                let rows = normed[0].0.rows();
                let d = normed[0].0.cols();
                // dL/dn̂ for every input, then through the row normalization.
                let mut dn: Vec<Vec<f64>> = vec![vec![0.0; rows * d]; m];
                if *squared {
                    let gram = sample_grams(&normed);
                    for r in 0..rows {
                        let gm = &gram[r * m * m..(r + 1) * m * m];
                        for i in 0..m {
                            let out_row = &mut dn[i][r * d..(r + 1) * d];
                            for j in 0..m {
                                if i == j {
                                    continue;
                                }
                                let w = 2.0 * gm[i * m + j];
                                for (o, x) in out_row.iter_mut().zip(normed[j].0.row_slice(r)) {
                                    *o += w * x;
                                }
                            }
                        }
                    }
                } else {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        acc.fill(0.0);
                        for (n, _) in &normed {
                            for (s, x) in acc.iter_mut().zip(n.row_slice(r)) {
                                *s += x;
                            }
                        }
                        for i in 0..m {
                            let own = normed[i].0.row_slice(r);
                            for k in 0..d {
                                dn[i][r * d + k] = acc[k] - own[k];
                            }
                        }
                    }
                }
                for (i, &v) in inputs.iter().enumerate() {
                    let (n, norms) = &normed[i];
                    let mut gi = vec![0.0; rows * d];
                    for r in 0..rows {
                        let nr = norms[r];
                        if nr < COSINE_EPS {
                            continue;
                        }
                        let nh = n.row_slice(r);
                        let up = &dn[i][r * d..(r + 1) * d];
                        let proj: f64 = nh.iter().zip(up).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            gi[r * d + k] = gv * (up[k] - nh[k] * proj) / nr;
                        }
                    }
                    let shape = self.value(v).shape().to_vec();
                    accumulate(grads, v, Tensor::new(shape, gi).expect("rows"));
                }
            }
            Op::Bce { probs, labels } => {
                let gv = g.item();
                let p = self.value(*probs);
                let inv_n = 1.0 / labels.len() as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&q, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&q) {
                            0.0
                        } else {
                            gv * inv_n * (-y / q + (1.0 - y) / (1.0 - q))
                        }
                    })
                    .collect();
                accumulate(grads, *probs, Tensor::new(p.shape().to_vec(), data).expect("bce"));
            }
        }
    }
}

/// One sample's cross-entropy term with clamping.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Unit-normalized rows and the original row norms. Guarded rows become zero.
fn normalize_rows(t: &Tensor) -> (Tensor, Vec<f64>) {
    let d = t.cols();
    let mut data = t.data().to_vec();
    let mut norms = Vec::with_capacity(t.rows());
    for row in data.chunks_mut(d.max(1)) {
        let n = norm(row);
        norms.push(n);
        if n < COSINE_EPS {
            row.fill(0.0);
        } else {
            for x in row.iter_mut() {
                *x /= n;
            }
        }
    }
    (Tensor::new(t.shape().to_vec(), data).expect("same shape"), norms)
}

/// Per-sample `m×m` Gram matrices of normalized rows, concatenated.
fn sample_grams(normed: &[(Tensor, Vec<f64>)]) -> Vec<f64> {
    let m = normed.len();
    let rows = normed[0].0.rows();
    let d = normed[0].0.cols();
    let mut out = vec![0.0; rows * m * m];
    let mut stacked = vec![0.0; m * d];
    for r in 0..rows {
        for (i, (n, _)) in normed.iter().enumerate() {
            stacked[i * d..(i + 1) * d].copy_from_slice(n.row_slice(r));
        }
        let g = mm_nt(&stacked, &stacked, m, d, m);
        out[r * m * m..(r + 1) * m * m].copy_from_slice(&g);
    }
    out
}
