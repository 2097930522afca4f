//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward rule. Nodes only ever reference earlier nodes, so
//! the tape is topologically ordered by construction and `backward` is a
//! single reverse sweep.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttnLayout};
use crate::error::{NumericsError, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Arithmetic precision for forward values and matrix kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Matrix products run in single precision and every forward value is
    /// rounded to the nearest `f32`. Gradients still accumulate in `f64`.
    F32,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Elu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
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
    TransposeBlocks {
        x: Var,
        blocks: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
    },
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Elu(_) => "elu",
            Op::Abs(_) => "abs",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::TransposeBlocks { .. } => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dropout { .. } => "dropout",
            Op::LinearAttention { .. } => "linear_attention",
            Op::StraightThrough(_) => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    leaf_grad: Option<Vec<f64>>,
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    grad_enabled: bool,
    precision: Precision,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    /// Evaluation tape: dropout disabled, gradients recorded.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            grad_enabled: true,
            precision: Precision::F64,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training tape; the seed drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    /// Forward-only tape: parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn single(&self) -> bool {
        self.precision == Precision::F32
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.single() {
            value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].leaf_grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Gradients of every parameter that entered this tape.
    pub fn param_grads(&self, n_params: usize) -> Grads {
        let mut grads = Grads::new(n_params);
        let mut entries: Vec<_> = self.params.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (id, var) in entries {
            if let Some(g) = self.grad(*var) {
                grads.accumulate(*id, g);
            }
        }
        grads
    }

    // ----- primitives -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            &mut out,
            false,
            self.single(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_rows(m, n, out), Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).expect("same shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n || ta.shape().len() != 2 {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for r in data.chunks_mut(n) {
            r.iter_mut().zip(tr.data()).for_each(|(x, b)| *x += b);
        }
        let t = Tensor::from_rows(ta.rows(), n, data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.rg(a);
        self.push(t, Op::Elu(a), rg)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    /// Row-wise layer normalisation with learned gain and bias (`1 × n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(mismatch("layer_norm", tx, self.value(gain)));
        }
        let rows = tx.len() / n;
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::with_capacity(rows);
        for r in tx.data().chunks(n) {
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            xhat.extend(r.iter().map(|v| (v - mean) * s));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for r in out.chunks_mut(n) {
            for ((o, gi), bi) in r.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NumericsError::InvalidArgument(format!(
                "gather index {bad} out of range for {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::from_rows(indices.len(), d, data);
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for r in data.chunks_mut(n) {
            softmax_in_place(r);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    /// Returns 0 when every row is masked.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(NumericsError::InvalidArgument(format!(
                "target {bad} out of range for {v} classes"
            )));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = target else { continue };
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(tl.row(r));
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - p[*t];
            for x in p.iter_mut() {
                *x = (*x - lse).exp();
            }
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows || self.value(p).shape().len() != 2 {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_cols(&refs);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols || t.shape().len() != 2 {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_rows(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.cols() {
            return Err(NumericsError::InvalidArgument(format!(
                "column slice {start}..{end} of width {}",
                tx.cols()
            )));
        }
        let t = tx.slice_cols(start, end);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.rows() {
            return Err(NumericsError::InvalidArgument(format!(
                "row slice {start}..{end} of {} rows",
                tx.rows()
            )));
        }
        let t = tx.slice_rows(start, end);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    /// Transposes each of `blocks` stacked `R × C` matrices, giving stacked `C × R`.
    /// `blocks = 1` is the ordinary transpose.
    pub fn transpose_blocks(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        if blocks == 0 || rows % blocks != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "{rows} rows do not split into {blocks} blocks"
            )));
        }
        let r = rows / blocks;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..blocks {
            for i in 0..r {
                for j in 0..c {
                    out[(b * c + j) * r + i] = src[(b * r + i) * c + j];
                }
            }
        }
        let t = Tensor::from_rows(blocks * c, r, out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::TransposeBlocks { x, blocks }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.transpose_blocks(x, 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Kernelized attention (see [`crate::attention`]).
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (d, dv) = (tq.cols(), tv.cols());
        layout.validate(d, dv)?;
        if tk.cols() != d
            || tq.rows() != layout.batch * layout.q_len
            || tk.rows() != layout.batch * layout.kv_len
            || tv.rows() != tk.rows()
        {
            return Err(mismatch("linear_attention", tq, tk));
        }
        let out = attention::forward(tq.data(), tk.data(), tv.data(), d, dv, layout);
        let t = Tensor::from_rows(layout.batch * layout.q_len, dv, out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(t, Op::LinearAttention { q, k, v, layout }, rg))
    }

    /// Forward value `quantized`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, quantized: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != quantized.shape() {
            return Err(mismatch("straight_through", tx, quantized));
        }
        let rg = self.rg(x);
        Ok(self.push(quantized.clone(), Op::StraightThrough(x), rg))
    }

    // ----- backward ---------------------------------------------------

    /// Propagates `d loss / d leaf` into every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let single = self.single();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            macro_rules! slot {
                ($v:expr) => {{
                    let idx = $v.0;
                    let len = self.nodes[idx].value.len();
                    grads[idx].get_or_insert_with(|| vec![0.0; len])
                }};
            }
            match &node.op {
                Op::Leaf => {
                    let n = &mut self.nodes[i];
                    match &mut n.leaf_grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => n.leaf_grad = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let n = self.nodes[b.0].value.cols();
                    if needs(a) {
                        let bd = self.nodes[b.0].value.data().to_vec();
                        let ga = slot!(a);
                        // dA = G · Bᵀ
                        gemm(m, n, k, &g, (n as isize, 1), &bd, (1, n as isize), ga, true, single);
                    }
                    if needs(b) {
                        let ad = self.nodes[a.0].value.data().to_vec();
                        let gb = slot!(b);
                        // dB = Aᵀ · G
                        gemm(k, m, n, &ad, (1, k as isize), &g, (n as isize, 1), gb, true, single);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        add_into(slot!(a), &g);
                    }
                    if needs(b) {
                        add_into(slot!(b), &g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        add_into(slot!(a), &g);
                    }
                    if needs(b) {
                        slot!(b).iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    if needs(a) {
                        add_into(slot!(a), &g);
                    }
                    if needs(row) {
                        let n = self.nodes[row.0].value.len();
                        let gr = slot!(row);
                        for chunk in g.chunks(n) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        let bd = self.nodes[b.0].value.data().to_vec();
                        slot!(a)
                            .iter_mut()
                            .zip(g.iter().zip(&bd))
                            .for_each(|(x, (gi, bi))| *x += gi * bi);
                    }
                    if needs(b) {
                        let ad = self.nodes[a.0].value.data().to_vec();
                        slot!(b)
                            .iter_mut()
                            .zip(g.iter().zip(&ad))
                            .for_each(|(x, (gi, ai))| *x += gi * ai);
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    slot!(a).iter_mut().zip(&g).for_each(|(x, gi)| *x += c * gi);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = self.nodes[i].value.data().to_vec();
                    slot!(a)
                        .iter_mut()
                        .zip(g.iter().zip(&y))
                        .for_each(|(x, (gi, yi))| *x += gi * (1.0 - yi * yi));
                }
                Op::Elu(a) => {
                    let a = *a;
                    let xs = self.nodes[a.0].value.data().to_vec();
                    slot!(a).iter_mut().zip(g.iter().zip(&xs)).for_each(|(x, (gi, xi))| {
                        *x += gi * if *xi > 0.0 { 1.0 } else { xi.exp() }
                    });
                }
                Op::Abs(a) => {
                    let a = *a;
                    let xs = self.nodes[a.0].value.data().to_vec();
                    slot!(a).iter_mut().zip(g.iter().zip(&xs)).for_each(|(x, (gi, xi))| {
                        *x += gi * if *xi > 0.0 {
                            1.0
                        } else if *xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let n = self.nodes[gain.0].value.len();
                    let gv = self.nodes[gain.0].value.data().to_vec();
                    let (xhat, rstd) = (xhat.clone(), rstd.clone());
                    if needs(gain) {
                        let gg = slot!(gain);
                        for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += gr[j] * xr[j];
                            }
                        }
                    }
                    if needs(bias) {
                        let gb = slot!(bias);
                        for gr in g.chunks(n) {
                            add_into(gb, gr);
                        }
                    }
                    if needs(x) {
                        let gx = slot!(x);
                        let mut dxhat = vec![0.0; n];
                        for (r, (gr, xr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                            for j in 0..n {
                                dxhat[j] = gr[j] * gv[j];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / n as f64;
                            let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            let out = &mut gx[r * n..(r + 1) * n];
                            for j in 0..n {
                                out[j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                            }
                        }
                    }
                }
                Op::Gather { table, indices } => {
                    let table = *table;
                    let indices = indices.clone();
                    let d = self.nodes[table.0].value.cols();
                    let gt = slot!(table);
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(&mut gt[idx * d..(idx + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let y = self.nodes[i].value.data().to_vec();
                    let n = self.nodes[i].value.cols();
                    let ga = slot!(a);
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if *count > 0 {
                        let logits = *logits;
                        let v = self.nodes[logits.0].value.cols();
                        let scale = g[0] / *count as f64;
                        let targets = targets.clone();
                        let probs = probs.clone();
                        let gl = slot!(logits);
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = t else { continue };
                            let out = &mut gl[r * v..(r + 1) * v];
                            for j in 0..v {
                                out[j] += scale * probs[r * v + j];
                            }
                            out[*t] -= scale;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = self.nodes[i].value.rows();
                    let width = self.nodes[i].value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        if needs(p) {
                            let gp = slot!(p);
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * width + offset..r * width + offset + w],
                                );
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        if needs(p) {
                            add_into(slot!(p), &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let w = self.nodes[i].value.cols();
                    let c = self.nodes[x.0].value.cols();
                    let gx = slot!(x);
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + w], gr);
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let c = self.nodes[x.0].value.cols();
                    let gx = slot!(x);
                    add_into(&mut gx[start * c..start * c + g.len()], &g);
                }
                Op::TransposeBlocks { x, blocks } => {
                    let (x, blocks) = (*x, *blocks);
                    let (rows, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let r = rows / blocks;
                    let gx = slot!(x);
                    for b in 0..blocks {
                        for ii in 0..r {
                            for j in 0..c {
                                gx[(b * r + ii) * c + j] += g[(b * c + j) * r + ii];
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    add_into(slot!(x), &g);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let g0 = g[0];
                    slot!(a).iter_mut().for_each(|x| *x += g0);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.len().max(1) as f64;
                    let g0 = g[0] / n;
                    slot!(a).iter_mut().for_each(|x| *x += g0);
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    slot!(x)
                        .iter_mut()
                        .zip(g.iter().zip(&mask))
                        .for_each(|(a, (gi, m))| *a += gi * m);
                }
                Op::LinearAttention { q, k, v, layout } => {
                    let (q, k, v, layout) = (*q, *k, *v, *layout);
                    let (dq, dk, dv) = {
                        let (tq, tk, tv) = (
                            &self.nodes[q.0].value,
                            &self.nodes[k.0].value,
                            &self.nodes[v.0].value,
                        );
                        attention::backward(
                            tq.data(),
                            tk.data(),
                            tv.data(),
                            tq.cols(),
                            tv.cols(),
                            layout,
                            &g,
                        )
                    };
                    if needs(q) {
                        add_into(slot!(q), &dq);
                    }
                    if needs(k) {
                        add_into(slot!(k), &dk);
                    }
                    if needs(v) {
                        add_into(slot!(v), &dv);
                    }
                }
                Op::StraightThrough(x) => {
                    let x = *x;
                    add_into(slot!(x), &g);
                }
            }
        }
        Ok(())
    }

    /// Names of the primitives recorded so far, in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
