//! Autoregressive prior over code indices, conditioned on an emotion
//! embedding placed at the first position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, SamplingPolicy, TrainConfig};
use crate::error::{MuserError, Result};
use crate::model::{argmax, MuserModel};
use crate::sampling::sample_token;
use crate::tokenizer::CpSequence;
use crate::vocab::Emotion;
use muser_numerics::nn::{tiled_positions, Embedding, Linear, StackConfig, TransformerStack};
use muser_numerics::{AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};

/// One training sequence for the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorExample {
    pub codes: Vec<usize>,
    pub emotion: Emotion,
}

#[derive(Debug, Clone)]
pub struct PriorModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub emotion: Embedding,
    pub codes: Embedding,
    pub stack: TransformerStack,
    pub head: Linear,
}

impl PriorModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.prior;
        let k = config.codebook_size;
        let stack = TransformerStack::new(
            &mut store,
            "prior.stack",
            StackConfig {
                layers: d.layers,
                heads: d.heads,
                dim: d.hidden,
                ff_dim: d.ff,
                dropout: config.dropout,
                causal: true,
                cross: false,
            },
            &mut rng,
        );
        Ok(Self {
            emotion: Embedding::new(&mut store, "prior.emotion", Emotion::ALL.len() + 1, d.hidden, &mut rng),
            codes: Embedding::new(&mut store, "prior.codes", k, d.hidden, &mut rng),
            head: Linear::new(&mut store, "prior.head", d.hidden, k, &mut rng),
            stack,
            store,
            config,
        })
    }

    /// Errors unless the prior was built for the same codebook and sequence
    /// layout as `model`.
    pub fn check_compatible(&self, model: &MuserModel) -> Result<()> {
        let (a, b) = (&self.config, &model.config);
        let same = a.vocab == b.vocab
            && a.codebook_size == b.codebook_size
            && a.latent_per_element == b.latent_per_element
            && a.seq_len == b.seq_len;
        if !same {
            return Err(MuserError::config(format!(
                "prior (vocab {}, K {}, l {}, N {}) does not match model (vocab {}, K {}, l {}, N {})",
                a.vocab, a.codebook_size, a.latent_per_element, a.seq_len, b.vocab, b.codebook_size, b.latent_per_element, b.seq_len
            )));
        }
        Ok(())
    }

    /// Next-code logits for every position of `m` prefixes of length `len`.
    /// Position 0 sees only the emotion; position `t` sees codes `< t`.
    pub fn logits(&self, tape: &mut Tape, codes: &[usize], emotions: &[Emotion], len: usize) -> Result<Var> {
        let m = emotions.len();
        if codes.len() != m * len {
            return Err(MuserError::data("prior: code count does not match batch shape"));
        }
        let k = self.config.codebook_size;
        if let Some(c) = codes.iter().find(|&&c| c >= k) {
            return Err(MuserError::data(format!("code {c} outside a codebook of {k}")));
        }
        let hidden = self.config.prior.hidden;
        let s = &self.store;
        let mut shifted = Vec::with_capacity(m * len);
        let mut emo = Vec::with_capacity(m * len);
        for (b, e) in emotions.iter().enumerate() {
            shifted.push(0);
            shifted.extend_from_slice(&codes[b * len..(b + 1) * len - 1]);
            emo.extend(std::iter::repeat(e.index()).take(len));
        }
        let mut first = Tensor::zeros(&[m * len, hidden]);
        let mut rest = Tensor::full(&[m * len, hidden], 1.0);
        for b in 0..m {
            first.row_mut(b * len).iter_mut().for_each(|v| *v = 1.0);
            rest.row_mut(b * len).iter_mut().for_each(|v| *v = 0.0);
        }
        let ce = self.codes.forward(tape, s, &shifted)?;
        let rest = tape.constant(rest);
        let ce = tape.mul(ce, rest)?;
        let ee = self.emotion.forward(tape, s, &emo)?;
        let first = tape.constant(first);
        let ee = tape.mul(ee, first)?;
        let x = tape.add(ce, ee)?;
        let pe = tape.constant(tiled_positions(m, len, hidden));
        let x = tape.add(x, pe)?;
        let h = self.stack.forward(tape, s, x, m, len, None)?;
        Ok(self.head.forward(tape, s, h)?)
    }

    /// Mean next-code cross-entropy over a batch of full-length sequences.
    pub fn loss(&self, tape: &mut Tape, batch: &[PriorExample]) -> Result<Var> {
        let n = self.config.seq_len;
        let (codes, emotions) = flatten(batch, n)?;
        let lg = self.logits(tape, &codes, &emotions, n)?;
        let targets: Vec<Option<usize>> = codes.iter().map(|&c| Some(c)).collect();
        Ok(tape.cross_entropy(lg, &targets)?)
    }

    /// Fraction of positions where the argmax next code is the true one.
    pub fn accuracy(&self, examples: &[PriorExample]) -> Result<f64> {
        let n = self.config.seq_len;
        let (codes, emotions) = flatten(examples, n)?;
        let mut tape = Tape::inference();
        let lg = self.logits(&mut tape, &codes, &emotions, n)?;
        let lg = tape.value(lg);
        let hits = codes.iter().enumerate().filter(|(r, &c)| argmax(lg.row(*r)) == c).count();
        Ok(hits as f64 / codes.len() as f64)
    }

    /// Samples a full code sequence for `emotion`.
    pub fn sample<R: Rng + ?Sized>(&self, emotion: Emotion, policy: SamplingPolicy, rng: &mut R) -> Result<Vec<usize>> {
        let n = self.config.seq_len;
        let mut codes = Vec::with_capacity(n);
        for t in 0..n {
            // The last prefix entry is a placeholder; it is never read at position t.
            let mut prefix = codes.clone();
            prefix.push(0);
            let mut tape = Tape::inference();
            let lg = self.logits(&mut tape, &prefix, &[emotion], t + 1)?;
            let row = tape.value(lg).row(t).to_vec();
            codes.push(sample_token(&row, policy, rng)?);
        }
        Ok(codes)
    }
}

fn flatten(batch: &[PriorExample], n: usize) -> Result<(Vec<usize>, Vec<Emotion>)> {
    if batch.is_empty() {
        return Err(MuserError::data("empty prior batch"));
    }
    let mut codes = Vec::with_capacity(batch.len() * n);
    for ex in batch {
        if ex.codes.len() != n {
            return Err(MuserError::data(format!("prior example has {} codes, expected {n}", ex.codes.len())));
        }
        codes.extend_from_slice(&ex.codes);
    }
    Ok((codes, batch.iter().map(|e| e.emotion).collect()))
}

/// Encodes and quantises a labelled corpus into prior training examples.
pub fn prior_corpus(model: &MuserModel, seqs: &[CpSequence]) -> Result<Vec<PriorExample>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(16) {
        for (i, s) in chunk.iter().enumerate() {
            if s.emotion.is_none() {
                return Err(MuserError::data(format!(
                    "sequence {} has no emotion label; the prior needs one",
                    out.len() + i
                )));
            }
        }
        for (s, (codes, _)) in chunk.iter().zip(model.quantize_sequences(chunk)?) {
            out.push(PriorExample {
                codes,
                emotion: s.emotion.expect("checked above"),
            });
        }
    }
    Ok(out)
}

pub struct PriorTrainer {
    pub prior: PriorModel,
    pub config: TrainConfig,
    pub step: u64,
    adam: AdamState,
    rng: ChaCha8Rng,
}

impl PriorTrainer {
    pub fn new(prior: PriorModel, config: TrainConfig) -> Self {
        Self {
            adam: AdamState::new(&prior.store, AdamConfig::default()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            prior,
            config,
            step: 0,
        }
    }

    pub fn train_step(&mut self, batch: &[PriorExample]) -> Result<f64> {
        let mut tape = Tape::training(self.rng.gen()).with_precision(self.config.precision);
        let loss = self.prior.loss(&mut tape, batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(MuserError::NonFinite(format!("prior loss {value} at step {}", self.step)));
        }
        tape.backward(loss)?;
        let mut grads = tape.param_grads(self.prior.store.len());
        if !grads.all_finite() {
            return Err(MuserError::NonFinite(format!("prior gradient at step {}", self.step)));
        }
        if self.config.grad_clip > 0.0 {
            grads.clip_global_norm(self.config.grad_clip);
        }
        self.adam.step(&mut self.prior.store, &grads, self.config.prior_lr)?;
        self.step += 1;
        Ok(value)
    }

    /// `steps` minibatch steps drawn uniformly with replacement.
    pub fn fit<F>(&mut self, corpus: &[PriorExample], steps: usize, mut on_step: F) -> Result<Vec<f64>>
    where
        F: FnMut(u64, f64),
    {
        if corpus.is_empty() {
            return Err(MuserError::data("empty prior corpus"));
        }
        let size = self.config.batch_size.min(corpus.len());
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<PriorExample> = (0..size).map(|_| corpus[self.rng.gen_range(0..corpus.len())].clone()).collect();
            let loss = self.train_step(&batch)?;
            on_step(self.step, loss);
            history.push(loss);
        }
        Ok(history)
    }

    pub fn into_prior(self) -> PriorModel {
        self.prior
    }
}
