//! The full autoencoder: encoder, quantiser, element regulariser and the
//! two-level decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CondMode, DecoderMode, ModelConfig, StackDims};
use crate::error::{MuserError, Result};
use crate::med::{self, DrModel};
use crate::tokenizer::{CpSequence, CpToken};
use crate::vocab::{Emotion, TokenType, Vocabulary, NUM_ELEMENTS, NUM_TYPES};
use crate::vq::{commitment_loss, Codebook};
use muser_numerics::nn::{tiled_positions, Embedding, Linear, Memory, StackConfig, TransformerStack};
use muser_numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// `m` sequences padded with EOS tokens to a common length `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub m: usize,
    pub n: usize,
    pub tokens: Vec<CpToken>,
    /// Positions that count towards the loss: everything up to and including EOS.
    pub lengths: Vec<usize>,
    pub emotions: Vec<Option<Emotion>>,
}

impl Batch {
    pub fn new(seqs: &[CpSequence], n: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(MuserError::data("empty batch"));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * n);
        let mut lengths = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            if s.len() > n {
                return Err(MuserError::data(format!(
                    "sequence {i} has {} tokens, more than the model length {n}",
                    s.len()
                )));
            }
            if s.is_empty() {
                return Err(MuserError::data(format!("sequence {i} is empty")));
            }
            tokens.extend_from_slice(&s.tokens);
            tokens.extend(std::iter::repeat(CpToken::EOS).take(n - s.len()));
            lengths.push(s.eos_position().map_or(s.len(), |p| p + 1));
        }
        Ok(Self {
            m: seqs.len(),
            n,
            tokens,
            lengths,
            emotions: seqs.iter().map(|s| s.emotion).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.m * self.n
    }

    pub fn column(&self, t: TokenType) -> Vec<usize> {
        self.tokens.iter().map(|tok| tok.get(t)).collect()
    }

    /// Targets for one type, `None` past each sequence's EOS.
    pub fn targets(&self, t: TokenType) -> Vec<Option<usize>> {
        (0..self.rows())
            .map(|r| (r % self.n < self.lengths[r / self.n]).then(|| self.tokens[r].get(t)))
            .collect()
    }

    /// Per-sequence index rows of one element, padding included.
    pub fn element_rows(&self, t: TokenType) -> Vec<Vec<usize>> {
        self.tokens
            .chunks(self.n)
            .map(|c| c.iter().map(|tok| tok.get(t)).collect())
            .collect()
    }
}

/// Per-type embeddings concatenated and projected to a hidden width.
#[derive(Debug, Clone)]
pub struct TokenEmbedder {
    pub tables: Vec<Embedding>,
    pub proj: Linear,
}

impl TokenEmbedder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, vocab: &Vocabulary, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let sizes = cfg.embeddings.as_array();
        let tables = TokenType::ALL
            .iter()
            .map(|&t| Embedding::new(store, &format!("{name}.{}", t.name()), vocab.size(t), sizes[t.index()], rng))
            .collect();
        Self {
            tables,
            proj: Linear::new(store, &format!("{name}.proj"), cfg.embeddings.total(), hidden, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[CpToken]) -> Result<Var> {
        let mut parts = Vec::with_capacity(NUM_TYPES);
        for (t, table) in TokenType::ALL.iter().zip(&self.tables) {
            let idx: Vec<usize> = tokens.iter().map(|tok| tok.get(*t)).collect();
            parts.push(table.forward(tape, store, &idx)?);
        }
        let x = tape.concat_cols(&parts)?;
        Ok(self.proj.forward(tape, store, x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: TokenEmbedder,
    pub stack: TransformerStack,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct GlobalDecoder {
    pub embed: TokenEmbedder,
    pub bos: ParamId,
    pub latent: Linear,
    /// Concat conditioning: `[x ; Linear(z_q)] → hidden`.
    pub fuse: Option<Linear>,
    /// Absent in element-only mode.
    pub stack: Option<TransformerStack>,
}

#[derive(Debug, Clone)]
pub struct ElementDecoder {
    pub element: TokenType,
    pub latent: Option<Linear>,
    /// Stage-two conditioning on the family token; absent for the family head.
    pub family: Option<Embedding>,
    pub stack: Option<TransformerStack>,
    pub head: Linear,
}

/// Latent conditioning for the decoders. `memory` holds all `N` latent rows
/// per sequence for cross-attention; `aligned` has one row per decoded step.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning {
    pub memory: Var,
    pub memory_len: usize,
    pub aligned: Var,
}

#[derive(Debug, Clone)]
pub struct MuserModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub codebook: Codebook,
    pub encoder: Encoder,
    pub dr: Option<DrModel>,
    pub global: GlobalDecoder,
    pub elements: Vec<ElementDecoder>,
}

/// How `z_q` is formed during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Quantization<'a> {
    /// Nearest codebook rows with a straight-through gradient.
    Nearest,
    /// `z_q = z_q0 + (z_e − z_e0)`: the selection made at `z_e0` is held
    /// fixed so the loss is smooth for finite differences. At the base point
    /// `z_q` equals `z_q0` exactly, so rows sharing a code stay tied.
    Frozen { z_e0: &'a Tensor, z_q0: &'a Tensor },
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub total: Var,
    pub rec: [Var; NUM_ELEMENTS],
    pub commit: Var,
    pub reg: Option<Var>,
    pub logits: [Var; NUM_ELEMENTS],
    pub z_e: Var,
    pub z_q: Var,
    pub codes: Vec<usize>,
}

fn stack_config(d: StackDims, dropout: f64, causal: bool, cross: bool) -> StackConfig {
    StackConfig {
        layers: d.layers,
        heads: d.heads,
        dim: d.hidden,
        ff_dim: d.ff,
        dropout,
        causal,
        cross,
    }
}

impl MuserModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = config.vocabulary();
        let mut store = ParamStore::new();
        let c = &config;
        let l = c.latent_per_element;
        let big_l = c.latent_size();

        let encoder = Encoder {
            embed: TokenEmbedder::new(&mut store, "enc.embed", c, &vocab, c.encoder.hidden, &mut rng),
            stack: TransformerStack::new(&mut store, "enc.stack", stack_config(c.encoder, c.dropout, false, false), &mut rng),
            out: Linear::new(&mut store, "enc.out", c.encoder.hidden, big_l, &mut rng),
        };
        let codebook = Codebook::new(c.codebook_size, big_l, c.ema_decay, c.ema_epsilon, &mut rng)?;
        let dr = (c.med && c.dr_mode == crate::config::DrMode::Transformer)
            .then(|| DrModel::new(&mut store, c.dr, c.seq_len, l, c.dropout, &mut rng));

        let hg = c.global_decoder.hidden;
        let cross = c.cond_mode == CondMode::CrossAttention;
        let global = GlobalDecoder {
            embed: TokenEmbedder::new(&mut store, "dec.embed", c, &vocab, hg, &mut rng),
            bos: store.add("dec.bos", Tensor::randn(&[1, hg], 1.0, &mut rng)),
            latent: Linear::new(&mut store, "dec.latent", big_l, hg, &mut rng),
            fuse: (!cross).then(|| Linear::new(&mut store, "dec.fuse", 2 * hg, hg, &mut rng)),
            stack: (c.decoders != DecoderMode::ElementOnly).then(|| {
                TransformerStack::new(&mut store, "dec.global", stack_config(c.global_decoder, c.dropout, true, cross), &mut rng)
            }),
        };

        let he = c.element_decoder.hidden;
        let elements = TokenType::ELEMENTS
            .iter()
            .map(|&e| {
                let name = format!("dec.{}", e.name());
                let with_stack = c.decoders != DecoderMode::GlobalOnly;
                let width = if with_stack { he } else { hg };
                ElementDecoder {
                    element: e,
                    latent: with_stack.then(|| Linear::new(&mut store, &format!("{name}.latent"), l, he, &mut rng)),
                    family: (e != TokenType::Family)
                        .then(|| Embedding::new(&mut store, &format!("{name}.family"), vocab.size(TokenType::Family), width, &mut rng)),
                    stack: with_stack.then(|| {
                        TransformerStack::new(&mut store, &format!("{name}.stack"), stack_config(c.element_decoder, c.dropout, true, false), &mut rng)
                    }),
                    head: Linear::new(&mut store, &format!("{name}.head"), width, vocab.size(e), &mut rng),
                }
            })
            .collect();

        Ok(Self {
            config,
            vocab,
            store,
            codebook,
            encoder,
            dr,
            global,
            elements,
        })
    }

    pub fn latent_size(&self) -> usize {
        self.config.latent_size()
    }

    pub fn batch(&self, seqs: &[CpSequence]) -> Result<Batch> {
        for s in seqs {
            for tok in &s.tokens {
                for t in TokenType::ALL {
                    self.vocab.check(t, tok.get(t))?;
                }
            }
        }
        Batch::new(seqs, self.config.seq_len)
    }

    /// `z_e` for `m` sequences of `len` tokens each.
    pub fn encode(&self, tape: &mut Tape, tokens: &[CpToken], m: usize, len: usize) -> Result<Var> {
        let s = &self.store;
        let x = self.encoder.embed.forward(tape, s, tokens)?;
        let pe = tape.constant(tiled_positions(m, len, self.config.encoder.hidden));
        let x = tape.add(x, pe)?;
        let h = self.encoder.stack.forward(tape, s, x, m, len, None)?;
        Ok(self.encoder.out.forward(tape, s, h)?)
    }

    /// Global decoder states for `tokens` (`m × len`, the tokens being
    /// predicted). Inputs are shifted right by one with a learned start vector.
    pub fn decode_global(&self, tape: &mut Tape, tokens: &[CpToken], m: usize, len: usize, cond: Conditioning) -> Result<Var> {
        let s = &self.store;
        let g = &self.global;
        let hg = self.config.global_decoder.hidden;
        let mut shifted = Vec::with_capacity(tokens.len());
        for seq in tokens.chunks(len) {
            shifted.push(CpToken::EOS);
            shifted.extend_from_slice(&seq[..len - 1]);
        }
        let x = g.embed.forward(tape, s, &shifted)?;
        let mut keep = Tensor::full(&[m * len, hg], 1.0);
        let mut first = Tensor::zeros(&[m * len, 1]);
        for b in 0..m {
            keep.row_mut(b * len).iter_mut().for_each(|v| *v = 0.0);
            first.row_mut(b * len)[0] = 1.0;
        }
        let keep = tape.constant(keep);
        let x = tape.mul(x, keep)?;
        let first = tape.constant(first);
        let bos = tape.param(s, g.bos);
        let bos_rows = tape.matmul(first, bos)?;
        let x = tape.add(x, bos_rows)?;
        let pe = tape.constant(tiled_positions(m, len, hg));
        let mut x = tape.add(x, pe)?;

        let memory = match &g.fuse {
            Some(fuse) => {
                let zl = g.latent.forward(tape, s, cond.aligned)?;
                let cat = tape.concat_cols(&[x, zl])?;
                x = fuse.forward(tape, s, cat)?;
                None
            }
            None => {
                let rows = g.latent.forward(tape, s, cond.memory)?;
                Some(Memory {
                    rows,
                    len: cond.memory_len,
                })
            }
        };
        match &g.stack {
            Some(stack) => Ok(stack.forward(tape, s, x, m, len, memory)?),
            None => Ok(x),
        }
    }

    /// Logits of one element head. `families` gives the (known or sampled)
    /// family per row for stage-two conditioning; ignored by the family head.
    pub fn decode_element(
        &self,
        tape: &mut Tape,
        eps: TokenType,
        h: Var,
        aligned: Var,
        families: &[usize],
        m: usize,
        len: usize,
    ) -> Result<Var> {
        let s = &self.store;
        let d = &self.elements[eps.index()];
        let mut x = h;
        if let Some(lin) = &d.latent {
            let (a, b) = med::slice_range(eps, self.config.latent_per_element)?;
            let zs = tape.slice_cols(aligned, a, b)?;
            let zl = lin.forward(tape, s, zs)?;
            x = tape.add(x, zl)?;
        }
        if let Some(fam) = &d.family {
            let f = fam.forward(tape, s, families)?;
            x = tape.add(x, f)?;
        }
        if let Some(stack) = &d.stack {
            x = stack.forward(tape, s, x, m, len, None)?;
        }
        Ok(d.head.forward(tape, s, x)?)
    }

    /// Teacher-forced loss on a batch.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, quant: Quantization) -> Result<ForwardOutput> {
        let (m, n) = (batch.m, batch.n);
        let c = &self.config;
        let z_e = self.encode(tape, &batch.tokens, m, n)?;
        let (z_q, codes, commit) = match quant {
            Quantization::Nearest => {
                let q = self.codebook.quantize(tape.value(z_e))?;
                let commit = commitment_loss(tape, z_e, &q.z_q)?;
                (tape.straight_through(z_e, &q.z_q)?, q.codes, commit)
            }
            Quantization::Frozen { z_e0, z_q0 } => {
                let codes = self.codebook.quantize(z_e0)?.codes;
                let base = tape.constant(z_e0.clone());
                let moved = tape.sub(z_e, base)?;
                let anchor = tape.constant(z_q0.clone());
                let commit = commitment_loss(tape, z_e, z_q0)?;
                (tape.add(moved, anchor)?, codes, commit)
            }
        };

        let reg = if c.med {
            let z_dr = med::reduce_all(tape, &self.store, self.dr.as_ref(), c.dr_mode, z_q, m, c.latent_per_element)?;
            let mut terms = Vec::with_capacity(NUM_ELEMENTS);
            for (eps, zd) in TokenType::ELEMENTS.iter().zip(z_dr) {
                let signs = med::sign_targets(&batch.element_rows(*eps))?;
                let term = med::regularization_term(tape, zd, &signs)?;
                terms.push(term);
            }
            Some(sum_vars(tape, &terms)?)
        } else {
            None
        };

        let cond = Conditioning {
            memory: z_q,
            memory_len: n,
            aligned: z_q,
        };
        let h = self.decode_global(tape, &batch.tokens, m, n, cond)?;
        let families = batch.column(TokenType::Family);
        let mut logits = Vec::with_capacity(NUM_ELEMENTS);
        let mut rec = Vec::with_capacity(NUM_ELEMENTS);
        for eps in TokenType::ELEMENTS {
            let lg = self.decode_element(tape, eps, h, z_q, &families, m, n)?;
            rec.push(tape.cross_entropy(lg, &batch.targets(eps))?);
            logits.push(lg);
        }
        let rec_sum = sum_vars(tape, &rec)?;
        let commit_w = tape.scale(commit, c.beta);
        let mut total = tape.add(rec_sum, commit_w)?;
        if let Some(r) = reg {
            let rw = tape.scale(r, c.alpha);
            total = tape.add(total, rw)?;
        }
        Ok(ForwardOutput {
            total,
            rec: rec.try_into().expect("seven heads"),
            commit,
            reg,
            logits: logits.try_into().expect("seven heads"),
            z_e,
            z_q,
            codes,
        })
    }

    /// Fraction of correctly predicted targets per head (argmax, teacher forcing).
    pub fn teacher_forced_accuracy(&self, seqs: &[CpSequence]) -> Result<[f64; NUM_ELEMENTS]> {
        let batch = self.batch(seqs)?;
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, &batch, Quantization::Nearest)?;
        let mut acc = [0.0; NUM_ELEMENTS];
        for (k, eps) in TokenType::ELEMENTS.iter().enumerate() {
            let lg = tape.value(out.logits[k]);
            let (mut hit, mut total) = (0usize, 0usize);
            for (r, target) in batch.targets(*eps).iter().enumerate() {
                let Some(t) = target else { continue };
                total += 1;
                if argmax(lg.row(r)) == *t {
                    hit += 1;
                }
            }
            acc[k] = hit as f64 / total.max(1) as f64;
        }
        Ok(acc)
    }

    /// Codes and quantised latents (`N × L`) of each sequence.
    pub fn quantize_sequences(&self, seqs: &[CpSequence]) -> Result<Vec<(Vec<usize>, Tensor)>> {
        let batch = self.batch(seqs)?;
        let mut tape = Tape::inference();
        let z_e = self.encode(&mut tape, &batch.tokens, batch.m, batch.n)?;
        let q = self.codebook.quantize(tape.value(z_e))?;
        let n = batch.n;
        Ok((0..batch.m)
            .map(|i| (q.codes[i * n..(i + 1) * n].to_vec(), q.z_q.slice_rows(i * n, (i + 1) * n)))
            .collect())
    }

    /// `z_DR^ε` (`m × N` each) for a batch under the current parameters.
    pub fn reduced_latents(&self, seqs: &[CpSequence]) -> Result<Vec<Tensor>> {
        let batch = self.batch(seqs)?;
        let mut tape = Tape::inference();
        let z_e = self.encode(&mut tape, &batch.tokens, batch.m, batch.n)?;
        let q = self.codebook.quantize(tape.value(z_e))?;
        let z_q = tape.constant(q.z_q);
        let outs = med::reduce_all(
            &mut tape,
            &self.store,
            self.dr.as_ref(),
            self.config.dr_mode,
            z_q,
            batch.m,
            self.config.latent_per_element,
        )?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Teacher-forced logits for an arbitrary latent (`N × L`) and token prefix.
    pub fn logits_for(&self, tokens: &[CpToken], z_q: &Tensor) -> Result<Vec<Tensor>> {
        let len = tokens.len();
        let mut tape = Tape::inference();
        let memory = tape.constant(z_q.clone());
        let aligned = tape.constant(z_q.slice_rows(0, len));
        let cond = Conditioning {
            memory,
            memory_len: z_q.rows(),
            aligned,
        };
        let h = self.decode_global(&mut tape, tokens, 1, len, cond)?;
        let fams: Vec<usize> = tokens.iter().map(|t| t.get(TokenType::Family)).collect();
        TokenType::ELEMENTS
            .iter()
            .map(|&e| {
                let v = self.decode_element(&mut tape, e, h, aligned, &fams, 1, len)?;
                Ok(tape.value(v).clone())
            })
            .collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::{DrMode, Preset};

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::preset(Preset::Desk);
        c.seq_len = 8;
        c.latent_per_element = 2;
        c.codebook_size = 8;
        c.encoder = StackDims::new(1, 2, 8, 16);
        c.global_decoder = StackDims::new(1, 2, 8, 16);
        c.element_decoder = StackDims::new(1, 2, 8, 16);
        c.dr = StackDims::new(1, 2, 8, 16);
        c.prior = StackDims::new(1, 2, 8, 16);
        c.embeddings = crate::config::EmbeddingSizes {
            family: 2,
            bar_beat: 2,
            tempo: 2,
            chord: 2,
            pitch: 3,
            duration: 2,
            velocity: 2,
            emotion: 2,
        };
        c.dropout = 0.0;
        c
    }

    pub(crate) fn toy_sequence(shift: usize) -> CpSequence {
        CpSequence {
            tokens: vec![
                CpToken::emotion(Emotion::Q1),
                CpToken::bar(),
                CpToken::metric(0, 23, 1),
                CpToken::note(10 + shift, 2, 3 + shift),
                CpToken::note(14 + shift, 4, 5),
                CpToken::EOS,
            ],
            emotion: Some(Emotion::Q1),
        }
    }

    #[test]
    fn shapes_of_a_forward_pass() {
        let model = MuserModel::new(tiny_config(), 0).unwrap();
        let batch = model.batch(&[toy_sequence(0), toy_sequence(3)]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Quantization::Nearest).unwrap();
        assert_eq!(tape.shape(out.z_e), &[16, 14]);
        for (k, e) in TokenType::ELEMENTS.iter().enumerate() {
            assert_eq!(tape.shape(out.logits[k]), &[16, model.vocab.size(*e)]);
        }
        assert!(tape.value(out.total).item().is_finite());
        assert_eq!(out.codes.len(), 16);
    }

    #[test]
    fn total_is_weighted_sum() {
        let model = MuserModel::new(tiny_config(), 1).unwrap();
        let batch = model.batch(&[toy_sequence(0), toy_sequence(1)]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Quantization::Nearest).unwrap();
        let rec: f64 = out.rec.iter().map(|v| tape.value(*v).item()).sum();
        let expect = rec
            + 0.25 * tape.value(out.commit).item()
            + 0.1 * tape.value(out.reg.unwrap()).item();
        assert!((tape.value(out.total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn targets_stop_after_eos() {
        let batch = Batch::new(&[toy_sequence(0)], 8).unwrap();
        let t = batch.targets(TokenType::Pitch);
        assert_eq!(t.iter().filter(|v| v.is_some()).count(), 6);
        assert!(t[6].is_none() && t[7].is_none());
    }

    #[test]
    fn overlong_sequence_rejected() {
        let model = MuserModel::new(tiny_config(), 0).unwrap();
        let mut s = toy_sequence(0);
        s.tokens.splice(1..1, std::iter::repeat(CpToken::bar()).take(5));
        assert!(model.batch(&[s]).is_err());
    }

    #[test]
    fn logits_are_causal_in_the_tokens() {
        let model = MuserModel::new(tiny_config(), 2).unwrap();
        let a = toy_sequence(0);
        let mut b = a.clone();
        b.tokens[4] = CpToken::note(30, 1, 1);
        let z = model.quantize_sequences(&[a.clone()]).unwrap().remove(0).1;
        let la = model.logits_for(&a.tokens, &z).unwrap();
        let lb = model.logits_for(&b.tokens, &z).unwrap();
        for (x, y) in la.iter().zip(&lb) {
            // Rows 0..=4 only see inputs before position 4.
            for r in 0..=4 {
                assert_eq!(x.row(r), y.row(r));
            }
        }
    }

    #[test]
    fn cross_attention_sees_later_latent_rows() {
        let model = MuserModel::new(tiny_config(), 3).unwrap();
        let a = toy_sequence(0);
        let z = model.quantize_sequences(&[a.clone()]).unwrap().remove(0).1;
        let mut z2 = z.clone();
        z2.row_mut(7).iter_mut().for_each(|v| *v += 1.0);
        let base = model.logits_for(&a.tokens, &z).unwrap();
        let moved = model.logits_for(&a.tokens, &z2).unwrap();
        assert_ne!(base[0].row(0), moved[0].row(0));
    }

    #[test]
    fn every_configuration_builds_and_runs() {
        for dr_mode in [DrMode::Transformer, DrMode::Mean] {
            for cond in [CondMode::CrossAttention, CondMode::Concat] {
                for dec in [DecoderMode::GlobalElement, DecoderMode::GlobalOnly, DecoderMode::ElementOnly] {
                    for med in [true, false] {
                        let mut c = tiny_config();
                        c.dr_mode = dr_mode;
                        c.cond_mode = cond;
                        c.decoders = dec;
                        c.med = med;
                        let model = MuserModel::new(c, 0).unwrap();
                        let batch = model.batch(&[toy_sequence(0), toy_sequence(2)]).unwrap();
                        let mut tape = Tape::new();
                        let out = model.forward(&mut tape, &batch, Quantization::Nearest).unwrap();
                        assert!(tape.value(out.total).item().is_finite());
                        assert_eq!(out.reg.is_some(), med);
                        tape.backward(out.total).unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn regularizer_gives_no_gradient_to_token_embeddings_through_signs() {
        // Only the encoder path can carry L_R back to embeddings; with the
        // encoder out of the picture (latent given as a constant) none arrives.
        let model = MuserModel::new(tiny_config(), 4).unwrap();
        let batch = model.batch(&[toy_sequence(0), toy_sequence(2)]).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(&[16, 14], 0.3));
        let zd = med::reduce_all(&mut tape, &model.store, model.dr.as_ref(), DrMode::Transformer, z, 2, 2).unwrap();
        let signs = med::sign_targets(&batch.element_rows(TokenType::Pitch)).unwrap();
        let term = med::regularization_term(&mut tape, zd[4], &signs).unwrap();
        tape.backward(term).unwrap();
        let grads = tape.param_grads(model.store.len());
        assert!(model.store.with_prefix("enc.").all(|id| grads.get(id).is_none()));
    }
}
