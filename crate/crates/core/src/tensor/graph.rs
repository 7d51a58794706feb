use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var, Vec<f64>),
    Cosine(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Log(Var),
    Abs(Var),
    Pick(Var, Vec<usize>),
}

struct Node<F: Real> {
    value: Arc<Tensor<F>>,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations in creation (hence topological) order.
///
/// Leaves are created with [`Graph::param`] (gradient wanted) or
/// [`Graph::constant`]. Every primitive checks shapes, computes in `f64`, and
/// rejects non-finite outputs. [`Graph::backward`] may run once per graph.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the requires-grad leaves, keyed by their [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<F: Real = f32> {
    grads: BTreeMap<Var, Tensor<F>>,
    reached: BTreeSet<Var>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(&v)
    }

    /// Gradient of `v`, panicking if `v` was not a parameter leaf.
    pub fn of(&self, v: Var) -> &Tensor<F> {
        self.grads
            .get(&v)
            .unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<F>)> {
        self.grads.iter()
    }

    /// Whether any path connects `v` to the loss.
    pub fn reached(&self, v: Var) -> bool {
        self.reached.contains(&v)
    }
}

fn to64<F: Real>(t: &Tensor<F>) -> Vec<f64> {
    t.to_f64_vec()
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m,k] · b[n,k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]ᵀ · b[k,n]`
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (x, d) in g.iter_mut().zip(delta) {
                *x += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// First element of a node's value as `f64`; intended for scalars.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].to_f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape_of(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn vals(&self, v: Var) -> Vec<f64> {
        to64(&self.nodes[v.0].value)
    }

    fn leaf(&mut self, value: Arc<Tensor<F>>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(Arc::new(value), true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(Arc::new(value), false)
    }

    /// Constant leaf sharing storage with frozen weights.
    pub fn constant_shared(&mut self, value: &Arc<Tensor<F>>) -> Result<Var> {
        self.leaf(Arc::clone(value), false)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: &[usize],
        data: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self
            .parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        let value = Tensor::new(shape, data.into_iter().map(F::from_f64).collect())?;
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::LayerNorm(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::L2Normalize(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Pick(a, _) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape_of(a);
        let (k2, n) = self.shape_of(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = mm(&self.vals(a), &self.vals(b), m, k, n);
        self.push("matmul", &[m, n], out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape_of(a);
        let (n, k2) = self.shape_of(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("[{m},{k}] x [{n},{k2}]^T"),
            ));
        }
        let out = mm_nt(&self.vals(a), &self.vals(b), m, k, n);
        self.push("matmul_nt", &[m, n], out, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let out = transpose(&self.vals(a), r, c);
        self.push("transpose", &[c, r], out, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push("add", &[r, c], out, Op::Add(a, b))
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let (rr, rc) = self.shape_of(row);
        if rr != 1 || rc != c {
            return Err(Error::shape("add_row", format!("[{r},{c}] + [{rr},{rc}]")));
        }
        let bv = self.vals(row);
        let out = self
            .vals(a)
            .chunks(c)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(&bv)
                    .map(|(x, y)| x + y)
                    .collect::<Vec<_>>()
            })
            .collect();
        self.push("add_row", &[r, c], out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push("sub", &[r, c], out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", &[r, c], out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let out = self.vals(a).iter().map(|x| x * factor).collect();
        self.push("scale", &[r, c], out, Op::Scale(a, factor))
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape_of(s) != (1, 1) {
            return Err(Error::shape(
                "scale_by",
                format!("scalar expected, got {:?}", self.shape_of(s)),
            ));
        }
        let (r, c) = self.shape_of(a);
        let sv = self.scalar(s);
        let out = self.vals(a).iter().map(|x| x * sv).collect();
        self.push("scale_by", &[r, c], out, Op::ScaleBy(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let out = self
            .vals(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.push("gelu", &[r, c], out, Op::Gelu(a))
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let x = self.vals(a);
        let mut out = Vec::with_capacity(r * c);
        let mut rstds = Vec::with_capacity(r);
        for row in x.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            rstds.push(rstd);
            out.extend(row.iter().map(|v| (v - mean) * rstd));
        }
        self.push("layer_norm", &[r, c], out, Op::LayerNorm(a, rstds))
    }

    /// Per-row max-subtracted softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let x = self.vals(a);
        let mut out = Vec::with_capacity(r * c);
        for row in x.chunks(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        self.push("softmax", &[r, c], out, Op::Softmax(a))
    }

    /// Per-row log-softmax (log-sum-exp stabilised).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let x = self.vals(a);
        let mut out = Vec::with_capacity(r * c);
        for row in x.chunks(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        self.push("log_softmax", &[r, c], out, Op::LogSoftmax(a))
    }

    /// Per-row division by the Euclidean norm. Rows with norm below 1e-12 are
    /// divided by 1e-12 instead, so an all-zero row maps to zero.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let x = self.vals(a);
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for row in x.chunks(c) {
            let n = row
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        self.push("l2_normalize", &[r, c], out, Op::L2Normalize(a, norms))
    }

    /// Row-wise cosine similarity; output is `rows × 1`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("cosine_similarity", a, b)?;
        let av = self.vals(a);
        let bv = self.vals(b);
        let out = av
            .chunks(c)
            .zip(bv.chunks(c))
            .map(|(x, y)| {
                let na = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
            })
            .collect();
        self.push("cosine_similarity", &[r, 1], out, Op::Cosine(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let c = self.shape_of(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape_of(p);
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {c} vs {pc}"),
                ));
            }
            rows += pr;
            out.extend(self.vals(p));
        }
        self.push(
            "concat_rows",
            &[rows, c],
            out,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let r = self.shape_of(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.shape_of(p);
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {r} vs {pr}"),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.vals(p);
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(
            "concat_cols",
            &[r, total],
            out,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let out = self.vals(a)[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", &[len, c], out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {c}", start + len),
            ));
        }
        let x = self.vals(a);
        let out = x
            .chunks(c)
            .flat_map(|row| row[start..start + len].to_vec())
            .collect();
        self.push("slice_cols", &[r, len], out, Op::SliceCols(a, start))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(a).shape()),
            ));
        }
        let out = self.vals(a);
        self.push("reshape", shape, out, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.vals(a).iter().sum();
        self.push("sum", &[1, 1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.vals(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", &[1, 1], vec![s], Op::Mean(a))
    }

    /// Sum along each row; output is `rows × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let out = self.vals(a).chunks(c).map(|row| row.iter().sum()).collect();
        self.push("sum_cols", &[r, 1], out, Op::SumCols(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let out = self.vals(a).iter().map(|x| x.ln()).collect();
        self.push("log", &[r, c], out, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        let out = self.vals(a).iter().map(|x| x.abs()).collect();
        self.push("abs", &[r, c], out, Op::Abs(a))
    }

    /// Picks `a[i, cols[i]]` for every row; output is `rows × 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::shape(
                "pick",
                format!("{} indices into [{r},{c}]", cols.len()),
            ));
        }
        let x = self.vals(a);
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| x[i * c + j])
            .collect();
        self.push("pick", &[r, 1], out, Op::Pick(a, cols.to_vec()))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        let picked = self.pick(lp, targets)?;
        let m = self.mean(picked)?;
        self.scale(m, -1.0)
    }

    /// Reverse sweep from the scalar `loss`. Returns the gradient of every
    /// requires-grad leaf; intermediate gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }

        let mut out = BTreeMap::new();
        let mut reached = BTreeSet::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let shape = node.value.shape().to_vec();
                let data = match grads.get_mut(idx).and_then(Option::take) {
                    Some(g) => {
                        reached.insert(Var(idx));
                        g
                    }
                    None => vec![0.0; node.value.len()],
                };
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                out.insert(
                    Var(idx),
                    Tensor::new(&shape, data.into_iter().map(F::from_f64).collect())?,
                );
            }
        }
        Ok(Gradients {
            grads: out,
            reached,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = || to64(&node.value);
        let (r, c) = node.value.dims2();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape_of(*a);
                let n = c;
                if rg(*a) {
                    accumulate(&mut grads[a.0], &mm_nt(g, &self.vals(*b), m, n, k));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], &mm_tn(&self.vals(*a), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape_of(*a);
                let n = c;
                if rg(*a) {
                    accumulate(&mut grads[a.0], &mm(g, &self.vals(*b), m, n, k));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], &mm_tn(g, &self.vals(*a), m, n, k));
                }
            }
            Op::Transpose(a) => {
                accumulate(&mut grads[a.0], &transpose(g, r, c));
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(*row) {
                    let mut col = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (s, v) in col.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads[row.0], &col);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = self.vals(*b);
                    let d: Vec<f64> = g.iter().zip(&bv).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if rg(*b) {
                    let av = self.vals(*a);
                    let d: Vec<f64> = g.iter().zip(&av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, f) => {
                let d: Vec<f64> = g.iter().map(|x| x * f).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::ScaleBy(a, s) => {
                if rg(*a) {
                    let sv = self.scalar(*s);
                    let d: Vec<f64> = g.iter().map(|x| x * sv).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if rg(*s) {
                    let av = self.vals(*a);
                    let d: f64 = g.iter().zip(&av).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads[s.0], &[d]);
                }
            }
            Op::Gelu(a) => {
                let x = self.vals(*a);
                let d: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gv, &xv)| {
                        let t = (GELU_C * (xv + GELU_A * xv * xv * xv)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                        gv * (0.5 * (1.0 + t) + 0.5 * xv * dt)
                    })
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::LayerNorm(a, rstds) => {
                let yv = y();
                let mut d = Vec::with_capacity(r * c);
                for ((gr, yr), rstd) in g.chunks(c).zip(yv.chunks(c)).zip(rstds) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    d.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(gv, yv)| rstd * (gv - mg - yv * mgy)),
                    );
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::Softmax(a) => {
                let yv = y();
                let mut d = Vec::with_capacity(r * c);
                for (gr, yr) in g.chunks(c).zip(yv.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::LogSoftmax(a) => {
                let yv = y();
                let mut d = Vec::with_capacity(r * c);
                for (gr, yr) in g.chunks(c).zip(yv.chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * s));
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::L2Normalize(a, norms) => {
                let yv = y();
                let mut d = Vec::with_capacity(r * c);
                for ((gr, yr), n) in g.chunks(c).zip(yv.chunks(c)).zip(norms) {
                    if *n <= NORM_FLOOR {
                        d.extend(gr.iter().map(|gv| gv / n));
                    } else {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        d.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / n));
                    }
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::Cosine(a, b) => {
                let (_, w) = self.shape_of(*a);
                let av = self.vals(*a);
                let bv = self.vals(*b);
                let cv = y();
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for i in 0..r {
                    let x = &av[i * w..(i + 1) * w];
                    let z = &bv[i * w..(i + 1) * w];
                    let na = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                    let nb = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                    let cs = cv[i];
                    for (p, q) in x.iter().zip(z) {
                        let ah = p / na;
                        let bh = q / nb;
                        da.push(g[i] * (bh - cs * ah) / na);
                        db.push(g[i] * (ah - cs * bh) / nb);
                    }
                }
                if rg(*a) {
                    accumulate(&mut grads[a.0], &da);
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if rg(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.shape_of(*p);
                    if rg(*p) {
                        let d: Vec<f64> = g
                            .chunks(c)
                            .flat_map(|row| row[offset..offset + w].to_vec())
                            .collect();
                        accumulate(&mut grads[p.0], &d);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = vec![0.0; self.value(*a).len()];
                d[start * c..(start + r) * c].copy_from_slice(g);
                accumulate(&mut grads[a.0], &d);
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.shape_of(*a);
                let mut d = vec![0.0; ar * ac];
                for i in 0..ar {
                    d[i * ac + start..i * ac + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], &vec![g[0] / n as f64; n]);
            }
            Op::SumCols(a) => {
                let (ar, ac) = self.shape_of(*a);
                let d: Vec<f64> = (0..ar * ac).map(|k| g[k / ac]).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Log(a) => {
                let x = self.vals(*a);
                let d: Vec<f64> = g.iter().zip(&x).map(|(gv, xv)| gv / xv).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Abs(a) => {
                let x = self.vals(*a);
                let d: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gv, xv)| {
                        if *xv > 0.0 {
                            *gv
                        } else if *xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Pick(a, cols) => {
                let (ar, ac) = self.shape_of(*a);
                let mut d = vec![0.0; ar * ac];
                for (i, &j) in cols.iter().enumerate() {
                    d[i * ac + j] = g[i];
                }
                accumulate(&mut grads[a.0], &d);
            }
        }
        Ok(())
    }
}
