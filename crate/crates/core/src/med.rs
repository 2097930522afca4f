//! Element slicing of the latent sequence, distance matrices and the
//! sign-alignment regularisation loss.
//!
//! For each element ε and a batch of `m` sequences of length `N`:
//!
//! ```text
//! M^ε[i,j,t]   = x^ε[i,t] − x^ε[j,t]            (token indices)
//! M^ε,R[i,j,t] = z_DR^ε[i,t] − z_DR^ε[j,t]
//! L_R          = Σ_ε mean_{i,j,t} |tanh(M^ε,R) − sgn(M^ε)|
//! ```
//!
//! The mean runs over all `m·m·N` entries, diagonal and equal-token
//! entries included (their target is 0).

use rand::Rng;

use crate::config::{DrMode, StackDims};
use crate::error::{MuserError, Result};
use crate::vocab::{TokenType, NUM_ELEMENTS};
use muser_numerics::nn::{Embedding, Linear, StackConfig, TransformerStack};
use muser_numerics::{ParamStore, Tape, Tensor, Var};

fn element_slot(eps: TokenType) -> Result<usize> {
    if !eps.is_element() {
        return Err(MuserError::data(format!("{} has no latent slice", eps.name())));
    }
    Ok(eps.index())
}

/// Column range `[start, end)` of an element's slice.
pub fn slice_range(eps: TokenType, l: usize) -> Result<(usize, usize)> {
    let s = element_slot(eps)?;
    Ok((s * l, (s + 1) * l))
}

pub fn slice_latent(z_q: &Tensor, eps: TokenType, l: usize) -> Result<Tensor> {
    let (a, b) = slice_range(eps, l)?;
    if z_q.cols() != NUM_ELEMENTS * l {
        return Err(MuserError::data(format!("latent width {} is not 7·{l}", z_q.cols())));
    }
    Ok(z_q.slice_cols(a, b))
}

/// `m × m × N` difference tensor, stored `[i][j][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub m: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        self.data[(i * self.m + j) * self.n + t]
    }

    fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(MuserError::data("distance matrix: sequences differ in length"));
        }
        let mut data = Vec::with_capacity(m * m * n);
        for a in rows {
            for b in rows {
                data.extend(a.iter().zip(b).map(|(x, y)| x - y));
            }
        }
        Ok(Self { m, n, data })
    }
}

pub fn element_distance_matrix(xs: &[Vec<usize>]) -> Result<DistanceMatrix> {
    let rows: Vec<Vec<f64>> = xs.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    DistanceMatrix::from_rows(&rows)
}

pub fn latent_distance_matrix(z_dr: &[Vec<f64>]) -> Result<DistanceMatrix> {
    DistanceMatrix::from_rows(z_dr)
}

/// `sgn` with `sgn(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Σ over the given `(M^ε, M^ε,R)` pairs of `mean |tanh(M^ε,R) − sgn(M^ε)|`.
pub fn regularization_loss(pairs: &[(DistanceMatrix, DistanceMatrix)]) -> Result<f64> {
    let mut total = 0.0;
    for (me, mr) in pairs {
        if me.m != mr.m || me.n != mr.n {
            return Err(MuserError::data("regularization_loss: shape mismatch"));
        }
        if me.data.is_empty() {
            continue;
        }
        let s: f64 = me
            .data
            .iter()
            .zip(&mr.data)
            .map(|(e, r)| (r.tanh() - sign(*e)).abs())
            .sum();
        total += s / me.data.len() as f64;
    }
    Ok(total)
}

/// `(agreeing, counted)` over entries where `M^ε` is nonzero.
pub fn sign_agreement(me: &DistanceMatrix, mr: &DistanceMatrix) -> (usize, usize) {
    let mut agree = 0;
    let mut total = 0;
    for (e, r) in me.data.iter().zip(&mr.data) {
        if *e != 0.0 {
            total += 1;
            if sign(*e) == sign(*r) {
                agree += 1;
            }
        }
    }
    (agree, total)
}

/// `m² × m` operator taking stacked rows `z` to all pairwise differences
/// `z_i − z_j` at row `i·m + j`.
pub fn difference_operator(m: usize) -> Tensor {
    let mut d = Tensor::zeros(&[m * m, m]);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let row = d.row_mut(i * m + j);
                row[i] = 1.0;
                row[j] = -1.0;
            }
        }
    }
    d
}

/// `sgn(M^ε)` laid out like `difference_operator(m) · x`, i.e. `m² × N`.
pub fn sign_targets(xs: &[Vec<usize>]) -> Result<Tensor> {
    let me = element_distance_matrix(xs)?;
    let data = me.data.iter().map(|&v| sign(v)).collect();
    Ok(Tensor::from_rows(me.m * me.m, me.n, data))
}

/// One element's term on the tape: `mean |tanh(D·z_DR) − sgn(M^ε)|`.
pub fn regularization_term(tape: &mut Tape, z_dr: Var, signs: &Tensor) -> Result<Var> {
    let m = tape.value(z_dr).rows();
    let d = tape.constant(difference_operator(m));
    let mr = tape.matmul(d, z_dr)?;
    let th = tape.tanh(mr);
    let target = tape.constant(signs.clone());
    let diff = tape.sub(th, target)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a))
}

/// Transformer that reduces each `l`-wide slice to a single value per step.
/// It reads the transposed slice as `l` tokens of width `N` and keeps the
/// output at the first position.
#[derive(Debug, Clone)]
pub struct DrModel {
    pub input: Linear,
    pub positions: Embedding,
    pub stack: TransformerStack,
    pub output: Linear,
    pub seq_len: usize,
    pub l: usize,
}

impl DrModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: StackDims,
        seq_len: usize,
        l: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let cfg = StackConfig {
            layers: dims.layers,
            heads: dims.heads,
            dim: dims.hidden,
            ff_dim: dims.ff,
            dropout,
            causal: false,
            cross: false,
        };
        Self {
            input: Linear::new(store, "dr.input", seq_len, dims.hidden, rng),
            positions: Embedding::new(store, "dr.positions", l, dims.hidden, rng),
            stack: TransformerStack::new(store, "dr.stack", cfg, rng),
            output: Linear::new(store, "dr.output", dims.hidden, seq_len, rng),
            seq_len,
            l,
        }
    }
}

/// Reduces every element slice of `z_q` (`m·N × 7l`) to `z_DR^ε` (`m × N`).
pub fn reduce_all(
    tape: &mut Tape,
    store: &ParamStore,
    dr: Option<&DrModel>,
    mode: DrMode,
    z_q: Var,
    m: usize,
    l: usize,
) -> Result<Vec<Var>> {
    let rows = tape.value(z_q).rows();
    if m == 0 || rows % m != 0 {
        return Err(MuserError::data("latent rows do not split into the batch"));
    }
    let n = rows / m;
    let mut slices = Vec::with_capacity(NUM_ELEMENTS);
    for eps in TokenType::ELEMENTS {
        let (a, b) = slice_range(eps, l)?;
        slices.push(tape.slice_cols(z_q, a, b)?);
    }
    match mode {
        DrMode::Mean => {
            let avg = tape.constant(Tensor::full(&[l, 1], 1.0 / l as f64));
            let mut out = Vec::with_capacity(NUM_ELEMENTS);
            for s in slices {
                let col = tape.matmul(s, avg)?;
                out.push(tape.reshape(col, &[m, n])?);
            }
            Ok(out)
        }
        DrMode::Transformer => {
            let dr = dr.ok_or_else(|| MuserError::config("transformer DR mode without a DR model"))?;
            if n != dr.seq_len {
                return Err(MuserError::data(format!(
                    "DR model expects sequence length {}, got {n}",
                    dr.seq_len
                )));
            }
            let mut blocks = Vec::with_capacity(NUM_ELEMENTS);
            for s in slices {
                blocks.push(tape.transpose_blocks(s, m)?);
            }
            let stacked = tape.concat_rows(&blocks)?;
            let batch = NUM_ELEMENTS * m;
            let x = dr.input.forward(tape, store, stacked)?;
            let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..l).collect();
            let pos = dr.positions.forward(tape, store, &pos_idx)?;
            let x = tape.add(x, pos)?;
            let h = dr.stack.forward(tape, store, x, batch, l, None)?;
            let firsts: Vec<usize> = (0..batch).map(|b| b * l).collect();
            let h0 = tape.gather(h, &firsts)?;
            let z = dr.output.forward(tape, store, h0)?;
            let mut out = Vec::with_capacity(NUM_ELEMENTS);
            for e in 0..NUM_ELEMENTS {
                out.push(tape.slice_rows(z, e * m, (e + 1) * m)?);
            }
            Ok(out)
        }
    }
}
