use super::kernels::{gemm_nn, gemm_nt, gemm_tn, log_softmax_rows, sigmoid};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        count: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    MaskedMean {
        steps: Vec<Var>,
        lengths: Vec<usize>,
    },
    MaskedMax {
        steps: Vec<Var>,
        argmax: Vec<usize>,
    },
    SelectLast {
        steps: Vec<Var>,
        lengths: Vec<usize>,
    },
    ApplyMask {
        x: Var,
        mask: Tensor<T>,
        scale: T,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Tape::backward`]. Parameters the
/// loss does not reach (or that are frozen) have no entry.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Euclidean norm over every gradient value.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Operation record for one forward pass. Nodes are appended in evaluation
/// order, so reverse index order is a valid reverse topological order.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    /// Parameter leaf. Frozen parameters do not take gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.tensor.clone(), Op::Leaf(Some(id)), !p.frozen)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_rows(va.rows(), va.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        if self.shape(row) != [1, n] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, &b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Log-softmax along each row.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.rows(), v.cols());
        log_softmax_rows(v.data(), v.cols(), out.data_mut());
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let v = self.value(logits);
        let (m, k) = dims(v);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len()]));
        }
        let mut logp = vec![T::zero(); k];
        let mut total = 0.0f64;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= k {
                return Err(Error::InvalidArgument(format!("target {t} out of range for {k} classes")));
            }
            log_softmax_rows(v.row(i), k, &mut logp);
            total -= logp[t].as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("cross_entropy: every position is ignored".into()));
        }
        let out = Tensor::from_rows(1, 1, vec![T::lit(total / count as f64)]);
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            ng,
        ))
    }

    /// Gather rows of `table` (one per id).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = dims(t);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::InvalidArgument(format!("embedding id {id} out of range for {m} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_rows(ids.len(), n, out);
        let ng = self.needs(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_rows(m, n, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n.max(1);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_rows(m, n, out), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&v.row(i)[start..end]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_rows(m, w, out), Op::SliceCols { x, start }, ng))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let out = Tensor::from_rows(end - start, n, self.value(x).data()[start * n..end * n].to_vec());
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    fn check_steps(&self, name: &'static str, steps: &[Var], lengths: &[usize]) -> Result<(usize, usize)> {
        let first = steps
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("{name}: no time steps")))?;
        let (b, h) = dims(self.value(*first));
        for &s in steps {
            if self.shape(s) != [b, h] {
                return Err(Error::shape(name, self.shape(*first), self.shape(s)));
            }
        }
        if lengths.len() != b {
            return Err(Error::shape(name, &[b, h], &[lengths.len()]));
        }
        if let Some(row) = lengths.iter().position(|&l| l == 0 || l > steps.len()) {
            return Err(Error::InvalidArgument(format!(
                "{name}: row {row} has length {} for {} steps",
                lengths[row],
                steps.len()
            )));
        }
        Ok((b, h))
    }

    /// Per-row mean of `steps[t]` over `t < lengths[row]`.
    pub fn masked_mean_over_time(&mut self, steps: &[Var], lengths: &[usize]) -> Result<Var> {
        let (b, h) = self.check_steps("masked_mean_over_time", steps, lengths)?;
        let mut out = Tensor::zeros(b, h);
        for (r, &len) in lengths.iter().enumerate() {
            let o = &mut out.data_mut()[r * h..(r + 1) * h];
            for &s in &steps[..len] {
                for (ov, &x) in o.iter_mut().zip(self.nodes[s.0].value.row(r)) {
                    *ov += x;
                }
            }
            let inv = T::one() / T::lit(len as f64);
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let ng = steps.iter().any(|&s| self.needs(s));
        Ok(self.push(
            out,
            Op::MaskedMean {
                steps: steps.to_vec(),
                lengths: lengths.to_vec(),
            },
            ng,
        ))
    }

    /// Per-row, per-feature max of `steps[t]` over `t < lengths[row]`.
    pub fn masked_max_over_time(&mut self, steps: &[Var], lengths: &[usize]) -> Result<Var> {
        let (b, h) = self.check_steps("masked_max_over_time", steps, lengths)?;
        let mut out = Tensor::filled(b, h, T::neg_infinity());
        let mut argmax = vec![0usize; b * h];
        for (r, &len) in lengths.iter().enumerate() {
            for (t, &s) in steps[..len].iter().enumerate() {
                let row = self.nodes[s.0].value.row(r);
                for j in 0..h {
                    if row[j] > out.data()[r * h + j] {
                        out.data_mut()[r * h + j] = row[j];
                        argmax[r * h + j] = t;
                    }
                }
            }
        }
        let ng = steps.iter().any(|&s| self.needs(s));
        Ok(self.push(
            out,
            Op::MaskedMax {
                steps: steps.to_vec(),
                argmax,
            },
            ng,
        ))
    }

    /// Row `r` of `steps[lengths[r] - 1]` for every row.
    pub fn select_last(&mut self, steps: &[Var], lengths: &[usize]) -> Result<Var> {
        let (b, h) = self.check_steps("select_last", steps, lengths)?;
        let mut out = Vec::with_capacity(b * h);
        for (r, &len) in lengths.iter().enumerate() {
            out.extend_from_slice(self.nodes[steps[len - 1].0].value.row(r));
        }
        let ng = steps.iter().any(|&s| self.needs(s));
        Ok(self.push(
            Tensor::from_rows(b, h, out),
            Op::SelectLast {
                steps: steps.to_vec(),
                lengths: lengths.to_vec(),
            },
            ng,
        ))
    }

    /// `x * mask * scale`. `mask` has the shape of `x`, or `rows x 1` to
    /// mask whole rows.
    pub fn apply_mask(&mut self, x: Var, mask: Tensor<T>, scale: T) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        let out = if mask.shape() == [m, n] {
            let v = self.value(x);
            let data = v
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&a, &k)| a * k * scale)
                .collect();
            Tensor::from_rows(m, n, data)
        } else if mask.shape() == [m, 1] {
            let mut out = self.value(x).clone();
            for i in 0..m {
                let k = mask.data()[i] * scale;
                out.data_mut()[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= k);
            }
            out
        } else {
            return Err(Error::shape("apply_mask", self.shape(x), mask.shape()));
        };
        let ng = self.needs(x);
        Ok(self.push(out, Op::ApplyMask { x, mask, scale }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::from_rows(1, 1, vec![s]), Op::Sum(a), ng)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Reverse pass from a `1 x 1` loss. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward", self.shape(loss), &[1, 1]));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));
        let mut n_params = 0;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf(Some(pid)) = self.nodes[idx].op {
                n_params = n_params.max(pid.0 + 1);
                // Leaves are never revisited, so park the grad back in place.
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut out = Gradients::empty(n_params);
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Leaf(Some(pid)), Some(g)) = (&node.op, grads[idx].take()) {
                match &mut out.grads[pid.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].needs_grad;
        // Accumulate `delta` (same shape as v) into grads[v].
        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        }
        fn slot<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: (usize, usize)) -> &mut Tensor<T> {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
        }

        match &nodes[idx].op {
            Op::Leaf(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims(val(a));
                let n = val(b).cols();
                if needs(a) {
                    gemm_nt(m, n, k, g.data(), val(b).data(), slot(grads, a, (m, k)).data_mut());
                }
                if needs(b) {
                    gemm_tn(k, m, n, val(a).data(), g.data(), slot(grads, b, (k, n)).data_mut());
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = dims(val(a));
                let n = val(b).rows();
                if needs(a) {
                    gemm_nn(m, n, k, g.data(), val(b).data(), slot(grads, a, (m, k)).data_mut());
                }
                if needs(b) {
                    gemm_tn(n, m, k, g.data(), val(a).data(), slot(grads, b, (n, k)).data_mut());
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    acc(grads, a, g.clone());
                }
                if needs(b) {
                    acc(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    acc(grads, a, g.clone());
                }
                if needs(b) {
                    acc(grads, b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    acc(grads, a, zip(g, val(b), |x, y| x * y));
                }
                if needs(b) {
                    acc(grads, b, zip(g, val(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                if needs(a) {
                    acc(grads, a, g.clone());
                }
                if needs(row) {
                    let n = g.cols();
                    let mut r = Tensor::zeros(1, n);
                    for i in 0..g.rows() {
                        for (o, &x) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(grads, row, r);
                }
            }
            &Op::Scale(a, s) => acc(grads, a, g.map(|x| x * s)),
            &Op::Sigmoid(a) => {
                let y = &nodes[idx].value;
                acc(grads, a, zip(g, y, |d, y| d * y * (T::one() - y)));
            }
            &Op::Tanh(a) => {
                let y = &nodes[idx].value;
                acc(grads, a, zip(g, y, |d, y| d * (T::one() - y * y)));
            }
            &Op::Relu(a) => {
                acc(grads, a, zip(g, val(a), |d, x| if x > T::zero() { d } else { T::zero() }));
            }
            &Op::LogSoftmax(a) => {
                let y = &nodes[idx].value;
                let n = y.cols();
                let mut dx = Tensor::zeros(y.rows(), n);
                for i in 0..y.rows() {
                    let gs: T = g.row(i).iter().copied().sum();
                    for j in 0..n {
                        dx.data_mut()[i * n + j] = g.get(i, j) - y.get(i, j).exp() * gs;
                    }
                }
                acc(grads, a, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let v = val(*logits);
                let (m, k) = dims(v);
                let scale = g.data()[0] / T::lit(*count as f64);
                let dx = slot(grads, *logits, (m, k));
                let mut logp = vec![T::zero(); k];
                for (i, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    log_softmax_rows(v.row(i), k, &mut logp);
                    let row = &mut dx.data_mut()[i * k..(i + 1) * k];
                    for j in 0..k {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        row[j] += (logp[j].exp() - onehot) * scale;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let shape = dims(val(*table));
                let n = shape.1;
                let dt = slot(grads, *table, shape);
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &x) in dt.data_mut()[id * n..(id + 1) * n].iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (m, w) = dims(val(p));
                    if needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g.row(i)[off..off + w]);
                        }
                        acc(grads, p, Tensor::from_rows(m, w, d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (m, n) = dims(val(p));
                    if needs(p) {
                        let d = g.data()[off * n..(off + m) * n].to_vec();
                        acc(grads, p, Tensor::from_rows(m, n, d));
                    }
                    off += m;
                }
            }
            &Op::SliceCols { x, start } => {
                let shape = dims(val(x));
                let w = g.cols();
                let dx = slot(grads, x, shape);
                for i in 0..shape.0 {
                    for (o, &d) in dx.data_mut()[i * shape.1 + start..i * shape.1 + start + w]
                        .iter_mut()
                        .zip(g.row(i))
                    {
                        *o += d;
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                let shape = dims(val(x));
                let n = shape.1;
                let dx = slot(grads, x, shape);
                for (o, &d) in dx.data_mut()[start * n..start * n + g.len()].iter_mut().zip(g.data()) {
                    *o += d;
                }
            }
            Op::MaskedMean { steps, lengths } => {
                let (b, h) = dims(g);
                for (t, &s) in steps.iter().enumerate() {
                    if !needs(s) {
                        continue;
                    }
                    let ds = slot(grads, s, (b, h));
                    for (r, &len) in lengths.iter().enumerate() {
                        if t < len {
                            let inv = T::one() / T::lit(len as f64);
                            for (o, &d) in ds.data_mut()[r * h..(r + 1) * h].iter_mut().zip(g.row(r)) {
                                *o += d * inv;
                            }
                        }
                    }
                }
            }
            Op::MaskedMax { steps, argmax } => {
                let (b, h) = dims(g);
                for r in 0..b {
                    for j in 0..h {
                        let s = steps[argmax[r * h + j]];
                        if needs(s) {
                            let ds = slot(grads, s, (b, h));
                            ds.data_mut()[r * h + j] += g.data()[r * h + j];
                        }
                    }
                }
            }
            Op::SelectLast { steps, lengths } => {
                let (b, h) = dims(g);
                for (r, &len) in lengths.iter().enumerate() {
                    let s = steps[len - 1];
                    if needs(s) {
                        let ds = slot(grads, s, (b, h));
                        for (o, &d) in ds.data_mut()[r * h..(r + 1) * h].iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                }
            }
            Op::ApplyMask { x, mask, scale } => {
                let (m, n) = dims(g);
                let mut d = g.clone();
                if mask.shape() == [m, n] {
                    for (o, &k) in d.data_mut().iter_mut().zip(mask.data()) {
                        *o *= k * *scale;
                    }
                } else {
                    for i in 0..m {
                        let k = mask.data()[i] * *scale;
                        d.data_mut()[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= k);
                    }
                }
                acc(grads, *x, d);
            }
            &Op::Sum(a) => {
                let (m, n) = dims(val(a));
                acc(grads, a, Tensor::filled(m, n, g.data()[0]));
            }
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_rows(a.rows(), a.cols(), data)
}
