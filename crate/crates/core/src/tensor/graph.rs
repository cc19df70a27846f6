use super::{gelu, gelu_grad, Real, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, R),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        sizes: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    WeightedRows {
        x: Var,
        index: Vec<usize>,
        weights: Vec<R>,
        k: usize,
    },
    Chamfer {
        pred: Var,
        target: Vec<R>,
        pred_size: usize,
        target_size: usize,
        pred_match: Vec<usize>,
        target_match: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<R>,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in execution order, so operands
/// always precede their consumers.
#[derive(Debug, Default)]
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
}

fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return dim_err(op, a, b);
    }
    Ok(())
}

fn matmul_into<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sq_dist3<R: Real>(a: &[R], b: &[R]) -> R {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the nearest point in `set` (rows of 3) to `p`; first index wins ties.
fn nearest<R: Real>(p: &[R], set: &[R]) -> (usize, R) {
    let mut best = (0, R::infinity());
    for (j, q) in set.chunks_exact(3).enumerate() {
        let d = sq_dist3(p, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return dim_err("transpose", &s, &[2]);
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        op: Op<R>,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., j] + bias[j]`, broadcasting a vector over all rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).numel() != c {
            return dim_err("add_bias", self.shape(x), self.shape(bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(x, c), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu(x), rg))
    }

    /// Per-row normalization over the last axis; `eps` is added to the variance
    /// inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return dim_err("layer_norm", self.shape(x), self.shape(gamma));
        }
        let rows = self.value(x).rows();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = R::of(d as f64);
        let mut xhat = vec![R::zero(); xs.len()];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis restricted to `allow`. Disallowed
    /// entries are exactly zero. A row with no allowed entry is an error.
    pub fn masked_softmax(&mut self, x: Var, allow: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if allow.len() != t.numel() {
            return dim_err("masked_softmax", t.shape(), &[allow.len()]);
        }
        let n = t.cols();
        let mut out = vec![R::zero(); t.numel()];
        for (r, (row, mrow)) in t.data().chunks_exact(n).zip(allow.chunks_exact(n)).enumerate() {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(R::neg_infinity(), R::max);
            if max == R::neg_infinity() {
                return Err(Error::InvalidMask(format!("row {r} has no allowed entry")));
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut total = R::zero();
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax(x), rg))
    }

    /// Concatenate along the last axis; all inputs must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat of zero tensors");
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return dim_err("concat_cols", self.shape(parts[0]), self.shape(p));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stack along the first axis; all inputs must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat of zero tensors");
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != cols {
                return dim_err("concat_rows", self.shape(parts[0]), self.shape(p));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if len == 0 || start + len > c {
            return dim_err("slice_cols", t.shape(), &[start, len]);
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// `out[i] = x[index[i]]` (rows). Repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        contract!(!index.is_empty(), "gather_rows with empty index");
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), c], out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    fn check_segments(&self, x: Var, sizes: &[usize]) -> Result<()> {
        contract!(!sizes.is_empty(), "segment pooling with no groups");
        contract!(
            sizes.iter().all(|&s| s > 0),
            "segment pooling over an empty group"
        );
        let rows = self.value(x).rows();
        if sizes.iter().sum::<usize>() != rows {
            return dim_err("segment", self.shape(x), sizes);
        }
        Ok(())
    }

    /// Column-wise max over consecutive row groups of the given sizes.
    pub fn segment_max(&mut self, x: Var, sizes: &[usize]) -> Result<Var> {
        self.check_segments(x, sizes)?;
        let t = self.value(x);
        let c = t.cols();
        let mut out = Vec::with_capacity(sizes.len() * c);
        let mut argmax = Vec::with_capacity(sizes.len() * c);
        let mut start = 0;
        for &s in sizes {
            for j in 0..c {
                let mut best = start;
                let mut bv = t.data()[start * c + j];
                for r in start + 1..start + s {
                    let v = t.data()[r * c + j];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
            start += s;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![sizes.len(), c], out)?,
            Op::SegmentMax { x, argmax },
            rg,
        ))
    }

    /// Column-wise mean over consecutive row groups of the given sizes.
    pub fn segment_mean(&mut self, x: Var, sizes: &[usize]) -> Result<Var> {
        self.check_segments(x, sizes)?;
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![R::zero(); sizes.len() * c];
        let mut start = 0;
        for (g, &s) in sizes.iter().enumerate() {
            let orow = &mut out[g * c..(g + 1) * c];
            for r in start..start + s {
                for (o, &v) in orow.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            let inv = R::one() / R::of(s as f64);
            for o in orow.iter_mut() {
                *o *= inv;
            }
            start += s;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![sizes.len(), c], out)?,
            Op::SegmentMean {
                x,
                sizes: sizes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<R>() / R::of(t.numel() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// `out[t] = sum_j weights[t*k+j] * x[index[t*k+j]]`. Gradient flows to `x`
    /// only; index and weights are constants.
    pub fn weighted_rows(
        &mut self,
        x: Var,
        index: &[usize],
        weights: &[R],
        k: usize,
    ) -> Result<Var> {
        contract!(k > 0 && !index.is_empty(), "weighted_rows needs k > 0");
        if index.len() != weights.len() || !index.len().is_multiple_of(k) {
            return dim_err("weighted_rows", &[index.len()], &[weights.len(), k]);
        }
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        contract!(
            index.iter().all(|&i| i < rows),
            "weighted_rows index out of range"
        );
        let targets = index.len() / k;
        let mut out = vec![R::zero(); targets * c];
        for tg in 0..targets {
            let orow = &mut out[tg * c..(tg + 1) * c];
            for j in 0..k {
                let w = weights[tg * k + j];
                for (o, &v) in orow.iter_mut().zip(t.row(index[tg * k + j])) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![targets, c], out)?,
            Op::WeightedRows {
                x,
                index: index.to_vec(),
                weights: weights.to_vec(),
                k,
            },
            rg,
        ))
    }

    /// Mean over groups of the squared-distance Chamfer distance between
    /// `pred` (G*pred_size x 3) and the constant `target` (G*target_size x 3),
    /// matching group g of one with group g of the other.
    pub fn chamfer(
        &mut self,
        pred: Var,
        target: &Tensor<R>,
        pred_size: usize,
        target_size: usize,
    ) -> Result<Var> {
        contract!(
            pred_size > 0 && target_size > 0,
            "chamfer distance of an empty set"
        );
        let p = self.value(pred);
        if p.cols() != 3 || target.cols() != 3 {
            return dim_err("chamfer", p.shape(), target.shape());
        }
        let groups = p.rows() / pred_size;
        if groups == 0
            || p.rows() != groups * pred_size
            || target.rows() != groups * target_size
        {
            return dim_err("chamfer", p.shape(), target.shape());
        }
        let mut pred_match = Vec::with_capacity(p.rows());
        let mut target_match = Vec::with_capacity(target.rows());
        let mut total = R::zero();
        for g in 0..groups {
            let ps = &p.data()[g * pred_size * 3..(g + 1) * pred_size * 3];
            let ts = &target.data()[g * target_size * 3..(g + 1) * target_size * 3];
            let mut fwd = R::zero();
            for a in ps.chunks_exact(3) {
                let (j, d) = nearest(a, ts);
                pred_match.push(j);
                fwd += d;
            }
            let mut bwd = R::zero();
            for b in ts.chunks_exact(3) {
                let (j, d) = nearest(b, ps);
                target_match.push(j);
                bwd += d;
            }
            total += fwd / R::of(pred_size as f64) + bwd / R::of(target_size as f64);
        }
        let loss = total / R::of(groups as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Chamfer {
                pred,
                target: target.data().to_vec(),
                pred_size,
                target_size,
                pred_match,
                target_match,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits` (m x c) against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.cols();
        if t.rows() != labels.len() {
            return dim_err("cross_entropy", t.shape(), &[labels.len()]);
        }
        contract!(labels.iter().all(|&l| l < c), "label out of range");
        let mut probs = vec![R::zero(); t.numel()];
        let mut total = R::zero();
        for (r, row) in t.data().chunks_exact(c).enumerate() {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let z: R = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            total += z.ln() + max - row[labels[r]];
        }
        let loss = total / R::of(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [R])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![R::zero(); n]);
        f(slot);
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// requires one are available through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        contract!(loss.0 < self.nodes.len(), "loss is not on this tape");
        contract!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Temporarily detach the op so operand values can be borrowed.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op<R>, g: &[R]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    self.acc(*a, |ga| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let mut s = R::zero();
                                for (&x, &y) in grow.iter().zip(brow) {
                                    s += x * y;
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    self.acc(*b, |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let a_rp = av[r * k + p];
                                for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += a_rp * x;
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc(*a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                self.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                self.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    self.acc(*a, |ga| {
                        for ((o, &x), &y) in ga.iter_mut().zip(g).zip(&bv) {
                            *o += x * y;
                        }
                    });
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    self.acc(*b, |gb| {
                        for ((o, &x), &y) in gb.iter_mut().zip(g).zip(&av) {
                            *o += x * y;
                        }
                    });
                }
            }
            Op::AddBias(x, bias) => {
                self.acc(*x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                let c = self.value(*bias).numel();
                self.acc(*bias, |gb| {
                    for row in g.chunks_exact(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * c));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                self.acc(*x, |gx| {
                    for ((o, &v), &xi) in gx.iter_mut().zip(g).zip(&xv) {
                        *o += v * gelu_grad(xi);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data().to_vec();
                self.acc(*gamma, |gg| {
                    for (row, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                });
                self.acc(*beta, |gb| {
                    for row in g.chunks_exact(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
                let dn = R::of(d as f64);
                self.acc(*x, |gx| {
                    for (r, (row, hrow)) in
                        g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate()
                    {
                        let mut s1 = R::zero();
                        let mut s2 = R::zero();
                        for j in 0..d {
                            let dh = row[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        let scale = rstd[r] / dn;
                        for j in 0..d {
                            let dh = row[j] * gam[j];
                            gx[r * d + j] += scale * (dn * dh - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let n = self.nodes[i].value.cols();
                self.acc(*x, |gx| {
                    for (r, (yrow, grow)) in y.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        let dot: R = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(p, |gp| {
                        for (r, grow) in g.chunks_exact(total).enumerate() {
                            for (o, &v) in gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&grow[offset..offset + w])
                            {
                                *o += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(p, |gp| {
                        for (o, &v) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += v;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = self.nodes[i].value.cols();
                let start = *start;
                self.acc(*x, |gx| {
                    for (r, grow) in g.chunks_exact(len).enumerate() {
                        for (o, &v) in gx[r * c + start..r * c + start + len].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let c = self.value(*x).cols();
                self.acc(*x, |gx| {
                    for (grow, &src) in g.chunks_exact(c).zip(index) {
                        for (o, &v) in gx[src * c..(src + 1) * c].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                let c = self.value(*x).cols();
                self.acc(*x, |gx| {
                    for (idx, (&v, &src)) in g.iter().zip(argmax).enumerate() {
                        gx[src * c + idx % c] += v;
                    }
                });
            }
            Op::SegmentMean { x, sizes } => {
                let c = self.value(*x).cols();
                self.acc(*x, |gx| {
                    let mut start = 0;
                    for (grp, &s) in sizes.iter().enumerate() {
                        let inv = R::one() / R::of(s as f64);
                        let grow = &g[grp * c..(grp + 1) * c];
                        for r in start..start + s {
                            for (o, &v) in gx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                                *o += v * inv;
                            }
                        }
                        start += s;
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(*x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(*x, |gx| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(x) => {
                let s = g[0] / R::of(self.value(*x).numel() as f64);
                self.acc(*x, |gx| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::WeightedRows {
                x,
                index,
                weights,
                k,
            } => {
                let c = self.value(*x).cols();
                let k = *k;
                self.acc(*x, |gx| {
                    for (t, grow) in g.chunks_exact(c).enumerate() {
                        for j in 0..k {
                            let w = weights[t * k + j];
                            let src = index[t * k + j];
                            for (o, &v) in gx[src * c..(src + 1) * c].iter_mut().zip(grow) {
                                *o += w * v;
                            }
                        }
                    }
                });
            }
            Op::Chamfer {
                pred,
                target,
                pred_size,
                target_size,
                pred_match,
                target_match,
            } => {
                let pv = self.value(*pred).data().to_vec();
                let groups = pv.len() / (3 * pred_size);
                let two = R::of(2.0);
                let wp = g[0] * two / R::of((groups * pred_size) as f64);
                let wt = g[0] * two / R::of((groups * target_size) as f64);
                self.acc(*pred, |gp| {
                    for a in 0..groups * pred_size {
                        let grp = a / pred_size;
                        let b = grp * target_size + pred_match[a];
                        for d in 0..3 {
                            gp[a * 3 + d] += wp * (pv[a * 3 + d] - target[b * 3 + d]);
                        }
                    }
                    for b in 0..groups * target_size {
                        let grp = b / target_size;
                        let a = grp * pred_size + target_match[b];
                        for d in 0..3 {
                            gp[a * 3 + d] += wt * (pv[a * 3 + d] - target[b * 3 + d]);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / R::of(labels.len() as f64);
                self.acc(*logits, |gl| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == lab { R::one() } else { R::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                });
            }
        }
    }
}
