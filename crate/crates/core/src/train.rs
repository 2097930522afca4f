//! One optimisation step: forward, backward, Adam on the network, EMA on
//! the codebook.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{MuserError, Result};
use crate::model::{MuserModel, Quantization};
use crate::tokenizer::CpSequence;
use crate::vocab::NUM_ELEMENTS;
use muser_numerics::{AdamConfig, AdamState, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: [f64; NUM_ELEMENTS],
    pub commit: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn rec_total(&self) -> f64 {
        self.rec.iter().sum()
    }

    /// `rec + β·commit + α·reg`.
    pub fn combine(rec: [f64; NUM_ELEMENTS], commit: f64, reg: f64, alpha: f64, beta: f64) -> Self {
        let total = rec.iter().sum::<f64>() + beta * commit + alpha * reg;
        Self {
            rec,
            commit,
            reg,
            total,
        }
    }
}

pub struct Trainer {
    pub model: MuserModel,
    pub config: TrainConfig,
    pub lr: f64,
    pub step: u64,
    adam: AdamState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: MuserModel, config: TrainConfig) -> Self {
        let adam = AdamState::new(&model.store, AdamConfig::default());
        Self {
            lr: config.lr,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
            adam,
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// Batch-order generator, for checkpointing.
    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Switches to the fine-tuning learning rate; optimiser moments are kept.
    pub fn start_finetune(&mut self) {
        self.lr = self.config.finetune_lr;
    }

    pub fn train_step(&mut self, seqs: &[CpSequence]) -> Result<LossBreakdown> {
        let batch = self.model.batch(seqs)?;
        if !self.model.codebook.initialized {
            let mut tape = Tape::inference();
            let z_e = self.model.encode(&mut tape, &batch.tokens, batch.m, batch.n)?;
            let z = tape.value(z_e).clone();
            self.model.codebook.init_from_samples(&z, &mut self.rng);
        }
        let mut tape = Tape::training(self.rng.gen()).with_precision(self.config.precision);
        let out = self.model.forward(&mut tape, &batch, Quantization::Nearest)?;
        let c = &self.model.config;
        let rec: Vec<f64> = out.rec.iter().map(|v| tape.value(*v).item()).collect();
        let breakdown = LossBreakdown::combine(
            rec.try_into().expect("seven heads"),
            tape.value(out.commit).item(),
            out.reg.map_or(0.0, |r| tape.value(r).item()),
            c.alpha,
            c.beta,
        );
        let total = tape.value(out.total).item();
        if !total.is_finite() {
            return Err(MuserError::NonFinite(format!("loss {total} at step {}", self.step)));
        }
        tape.backward(out.total)?;
        let mut grads = tape.param_grads(self.model.store.len());
        if !grads.all_finite() {
            return Err(MuserError::NonFinite(format!("gradient at step {}", self.step)));
        }
        if self.config.grad_clip > 0.0 {
            grads.clip_global_norm(self.config.grad_clip);
        }
        self.adam.step(&mut self.model.store, &grads, self.lr)?;
        let z_e = tape.value(out.z_e).clone();
        self.model.codebook.ema_update(&z_e, &out.codes)?;
        let dead = self.model.config.dead_code_steps;
        if dead > 0 {
            let n = self.model.codebook.reseed_dead_codes(&z_e, dead, &mut self.rng);
            if n > 0 {
                log::debug!("step {}: reseeded {n} idle codes", self.step);
            }
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Next minibatch from a reshuffled pass over the corpus.
    pub fn next_batch<'a>(&mut self, corpus: &'a [CpSequence]) -> Vec<&'a CpSequence> {
        let size = self.config.batch_size.min(corpus.len());
        let mut picked = Vec::with_capacity(size);
        while picked.len() < size {
            if self.cursor >= self.order.len() || self.order.len() != corpus.len() {
                self.order = (0..corpus.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(&corpus[self.order[self.cursor]]);
            self.cursor += 1;
        }
        picked
    }

    /// Runs `steps` minibatch steps, calling `on_step` after each.
    pub fn fit<F>(&mut self, corpus: &[CpSequence], steps: usize, mut on_step: F) -> Result<Vec<LossBreakdown>>
    where
        F: FnMut(u64, &LossBreakdown),
    {
        if corpus.is_empty() {
            return Err(MuserError::data("empty training corpus"));
        }
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<CpSequence> = self.next_batch(corpus).into_iter().cloned().collect();
            let loss = self.train_step(&batch)?;
            on_step(self.step, &loss);
            history.push(loss);
        }
        Ok(history)
    }

    pub fn into_model(self) -> MuserModel {
        self.model
    }
}
