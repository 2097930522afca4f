//! Nearest-neighbour vector quantisation with an EMA-maintained codebook.
//!
//! EMA update for code `k` with `n_k` assigned rows summing to `s_k`:
//!
//! ```text
//! count[k] ← γ·count[k] + (1−γ)·n_k
//! sum[k]   ← γ·sum[k]   + (1−γ)·s_k
//! n        = Σ_j count[j]
//! e[k]     = sum[k] / ((count[k] + ε)·n / (n + K·ε))
//! ```
//!
//! Counts start at 1 and sums at the initial embeddings, so an untouched code
//! keeps its vector while its statistics decay.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use muser_numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub embeddings: Tensor,
    pub ema_count: Vec<f64>,
    pub ema_sum: Tensor,
    pub decay: f64,
    pub epsilon: f64,
    /// Consecutive updates without any assignment, per code.
    pub idle_steps: Vec<u64>,
    /// False until the first batch has seeded the entries.
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub z_q: Tensor,
    pub codes: Vec<usize>,
    pub distances: Option<Vec<f64>>,
}

impl Codebook {
    pub fn new<R: Rng + ?Sized>(k: usize, dim: usize, decay: f64, epsilon: f64, rng: &mut R) -> Result<Self> {
        if k < 2 || dim == 0 {
            return Err(MuserError::config(format!("codebook needs K ≥ 2 and L > 0 (got {k}×{dim})")));
        }
        let emb = Tensor::uniform(&[k, dim], -1.0 / k as f64, 1.0 / k as f64, rng);
        Ok(Self::from_embeddings(emb, decay, epsilon))
    }

    pub fn from_embeddings(embeddings: Tensor, decay: f64, epsilon: f64) -> Self {
        let k = embeddings.rows();
        Self {
            ema_sum: embeddings.clone(),
            embeddings,
            ema_count: vec![1.0; k],
            decay,
            epsilon,
            idle_steps: vec![0; k],
            initialized: false,
        }
    }

    pub fn size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Codes by nearest squared Euclidean distance, lowest index on ties.
    pub fn quantize(&self, z_e: &Tensor) -> Result<QuantizeResult> {
        self.quantize_inner(z_e, false)
    }

    /// Like [`Codebook::quantize`] but keeps each row's winning distance.
    pub fn quantize_with_distances(&self, z_e: &Tensor) -> Result<QuantizeResult> {
        self.quantize_inner(z_e, true)
    }

    fn quantize_inner(&self, z_e: &Tensor, keep: bool) -> Result<QuantizeResult> {
        if z_e.cols() != self.dim() {
            return Err(MuserError::data(format!(
                "latent width {} does not match codebook width {}",
                z_e.cols(),
                self.dim()
            )));
        }
        if !z_e.is_finite() {
            return Err(MuserError::NonFinite("encoder output".into()));
        }
        let n = z_e.rows();
        let mut codes = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(if keep { n } else { 0 });
        let mut out = Vec::with_capacity(n * self.dim());
        for i in 0..n {
            let row = z_e.row(i);
            let mut best = (0, f64::INFINITY);
            for k in 0..self.size() {
                let d: f64 = row
                    .iter()
                    .zip(self.embeddings.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            codes.push(best.0);
            if keep {
                dists.push(best.1);
            }
            out.extend_from_slice(self.embeddings.row(best.0));
        }
        Ok(QuantizeResult {
            z_q: Tensor::from_rows(n, self.dim(), out),
            codes,
            distances: keep.then_some(dists),
        })
    }

    /// Rows of the codebook for a code sequence.
    pub fn lookup(&self, codes: &[usize]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(codes.len() * self.dim());
        for &c in codes {
            if c >= self.size() {
                return Err(MuserError::data(format!("code {c} outside codebook of size {}", self.size())));
            }
            out.extend_from_slice(self.embeddings.row(c));
        }
        Ok(Tensor::from_rows(codes.len(), self.dim(), out))
    }

    /// Seeds entries from encoder rows with k-means++ style D² sampling and
    /// resets the EMA statistics to match.
    pub fn init_from_samples<R: Rng + ?Sized>(&mut self, z_e: &Tensor, rng: &mut R) {
        let n = z_e.rows();
        if n == 0 {
            return;
        }
        let k = self.size();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut chosen = vec![rng.gen_range(0..n)];
        let mut d2: Vec<f64> = (0..n).map(|i| dist(z_e.row(i), z_e.row(chosen[0]))).collect();
        while chosen.len() < k {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.gen::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
                pick
            } else {
                rng.gen_range(0..n)
            };
            chosen.push(next);
            for (i, slot) in d2.iter_mut().enumerate() {
                *slot = slot.min(dist(z_e.row(i), z_e.row(next)));
            }
        }
        for (k, &i) in chosen.iter().enumerate() {
            self.embeddings.row_mut(k).copy_from_slice(z_e.row(i));
        }
        self.ema_sum = self.embeddings.clone();
        self.ema_count = vec![1.0; k];
        self.idle_steps = vec![0; k];
        self.initialized = true;
    }

    pub fn ema_update(&mut self, z_e: &Tensor, codes: &[usize]) -> Result<()> {
        if z_e.rows() != codes.len() || z_e.cols() != self.dim() {
            return Err(MuserError::data("ema_update: rows and codes disagree"));
        }
        let (k, dim, g) = (self.size(), self.dim(), self.decay);
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * dim];
        for (i, &c) in codes.iter().enumerate() {
            if c >= k {
                return Err(MuserError::data(format!("code {c} outside codebook")));
            }
            counts[c] += 1.0;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(z_e.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            self.ema_count[c] = g * self.ema_count[c] + (1.0 - g) * counts[c];
            let row = self.ema_sum.row_mut(c);
            for (s, add) in row.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *s = g * *s + (1.0 - g) * add;
            }
            self.idle_steps[c] = if counts[c] > 0.0 { 0 } else { self.idle_steps[c] + 1 };
        }
        self.refresh_embeddings();
        Ok(())
    }

    fn refresh_embeddings(&mut self) {
        let (k, eps) = (self.size() as f64, self.epsilon);
        let n: f64 = self.ema_count.iter().sum();
        for c in 0..self.size() {
            let smoothed = (self.ema_count[c] + eps) * n / (n + k * eps);
            let src: Vec<f64> = self.ema_sum.row(c).iter().map(|s| s / smoothed).collect();
            self.embeddings.row_mut(c).copy_from_slice(&src);
        }
    }

    /// Re-seeds codes idle for at least `after` updates from random rows of `z_e`.
    /// Returns how many codes were replaced.
    pub fn reseed_dead_codes<R: Rng + ?Sized>(&mut self, z_e: &Tensor, after: u64, rng: &mut R) -> usize {
        if after == 0 || z_e.rows() == 0 {
            return 0;
        }
        let dead: Vec<usize> = (0..self.size()).filter(|&c| self.idle_steps[c] >= after).collect();
        let rows: Vec<usize> = (0..z_e.rows()).collect();
        for &c in &dead {
            let r = *rows.choose(rng).expect("non-empty");
            self.embeddings.row_mut(c).copy_from_slice(z_e.row(r));
            self.ema_sum.row_mut(c).copy_from_slice(z_e.row(r));
            self.ema_count[c] = 1.0;
            self.idle_steps[c] = 0;
        }
        dead.len()
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite() && self.ema_sum.is_finite() && self.ema_count.iter().all(|c| c.is_finite())
    }
}

/// `mean((z_e − sg[z_q])²)`; the quantised side enters as a constant.
pub fn commitment_loss(tape: &mut Tape, z_e: Var, z_q: &Tensor) -> Result<Var> {
    let target = tape.constant(z_q.clone());
    let diff = tape.sub(z_e, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}
