//! Layers built from tape primitives. Every layer only stores [`ParamId`]s;
//! values live in a [`ParamStore`] so a whole model can be saved, cloned or
//! optimised as one flat collection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttnLayout;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[d_in, d_out], -limit, limit, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(&[vocab, dim], 1.0, rng));
        Self { table, vocab, dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.gather(t, indices)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.elu(h);
        let h = tape.dropout(h, self.dropout);
        self.down.forward(tape, store, h)
    }
}

/// Multi-head linear attention with input and output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// `x` holds `batch × q_len` query rows, `kv` holds `batch × kv_len` rows.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, kv: Var, layout: AttnLayout) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, kv)?;
        let v = self.v.forward(tape, store, kv)?;
        let a = tape.linear_attention(q, k, v, layout)?;
        self.o.forward(tape, store, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub causal: bool,
    /// Adds a non-causal cross-attention sublayer to every block.
    pub cross: bool,
}

/// Pre-norm block: self-attention, optional cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Memory rows for cross-attention: `batch × len` rows of width `dim`.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub rows: Var,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub config: StackConfig,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

impl TransformerStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: StackConfig, rng: &mut R) -> Self {
        let d = config.dim;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                Block {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d),
                    self_attn: Attention::new(store, &format!("{p}.self"), d, config.heads, rng),
                    cross: config.cross.then(|| {
                        (
                            LayerNorm::new(store, &format!("{p}.ln_cross"), d),
                            Attention::new(store, &format!("{p}.cross"), d, config.heads, rng),
                        )
                    }),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ff_dim, config.dropout, rng),
                }
            })
            .collect();
        Self {
            config,
            blocks,
            final_ln: LayerNorm::new(store, &format!("{name}.ln_out"), d),
        }
    }

    /// `x` is `batch × len` rows of width `dim`. `memory` is required iff the
    /// stack was built with cross-attention.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        batch: usize,
        len: usize,
        memory: Option<Memory>,
    ) -> Result<Var> {
        let c = self.config;
        let self_layout = AttnLayout::self_attention(batch, len, c.heads, c.causal);
        let mut h = x;
        for block in &self.blocks {
            let n = block.ln_self.forward(tape, store, h)?;
            let a = block.self_attn.forward(tape, store, n, n, self_layout)?;
            let a = tape.dropout(a, c.dropout);
            h = tape.add(h, a)?;
            if let Some((ln, attn)) = &block.cross {
                let mem = memory.ok_or_else(|| {
                    crate::error::NumericsError::InvalidArgument("cross-attention stack needs memory".into())
                })?;
                let layout = AttnLayout {
                    batch,
                    q_len: len,
                    kv_len: mem.len,
                    heads: c.heads,
                    causal: false,
                };
                let n = ln.forward(tape, store, h)?;
                let a = attn.forward(tape, store, n, mem.rows, layout)?;
                let a = tape.dropout(a, c.dropout);
                h = tape.add(h, a)?;
            }
            let n = block.ln_ff.forward(tape, store, h)?;
            let f = block.ff.forward(tape, store, n)?;
            let f = tape.dropout(f, c.dropout);
            h = tape.add(h, f)?;
        }
        self.final_ln.forward(tape, store, h)
    }
}

/// Sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_rows(len, dim, data)
}

/// Same table repeated for every sequence in a packed batch.
pub fn tiled_positions(batch: usize, len: usize, dim: usize) -> Tensor {
    let one = sinusoidal_positions(len, dim);
    let mut data = Vec::with_capacity(batch * len * dim);
    for _ in 0..batch {
        data.extend_from_slice(one.data());
    }
    Tensor::from_rows(batch * len, dim, data)
}
