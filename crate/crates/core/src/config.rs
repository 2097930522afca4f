//! Model and training configuration, presets and TOML loading.
//!
//! A config file names a preset and overrides any subset of its fields:
//!
//! ```toml
//! preset = "desk"
//! [model]
//! seq_len = 64
//! [model.encoder]
//! layers = 3
//! [train]
//! steps = 500
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::vocab::{TokenType, VocabPreset, Vocabulary, NUM_ELEMENTS, NUM_TYPES};
use muser_numerics::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackDims {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff: usize,
}

impl StackDims {
    pub const fn new(layers: usize, heads: usize, hidden: usize, ff: usize) -> Self {
        Self {
            layers,
            heads,
            hidden,
            ff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrMode {
    Transformer,
    /// Averages each latent row over its `l` dimensions instead of learning a reduction.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    CrossAttention,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    GlobalElement,
    GlobalOnly,
    ElementOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    pub tau: f64,
    pub rho: f64,
}

impl SamplingPolicy {
    pub const fn new(tau: f64, rho: f64) -> Self {
        Self { tau, rho }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingTable {
    pub family: SamplingPolicy,
    pub bar_beat: SamplingPolicy,
    pub tempo: SamplingPolicy,
    pub chord: SamplingPolicy,
    pub pitch: SamplingPolicy,
    pub duration: SamplingPolicy,
    pub velocity: SamplingPolicy,
}

impl SamplingTable {
    pub fn uniform(p: SamplingPolicy) -> Self {
        Self {
            family: p,
            bar_beat: p,
            tempo: p,
            chord: p,
            pitch: p,
            duration: p,
            velocity: p,
        }
    }

    pub fn get(&self, t: TokenType) -> SamplingPolicy {
        match t {
            TokenType::Family => self.family,
            TokenType::BarBeat => self.bar_beat,
            TokenType::Tempo => self.tempo,
            TokenType::Chord => self.chord,
            TokenType::Pitch => self.pitch,
            TokenType::Duration => self.duration,
            TokenType::Velocity => self.velocity,
            TokenType::Emotion => panic!("emotion is never sampled"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSizes {
    pub family: usize,
    pub bar_beat: usize,
    pub tempo: usize,
    pub chord: usize,
    pub pitch: usize,
    pub duration: usize,
    pub velocity: usize,
    pub emotion: usize,
}

impl EmbeddingSizes {
    pub fn as_array(&self) -> [usize; NUM_TYPES] {
        [
            self.family,
            self.bar_beat,
            self.tempo,
            self.chord,
            self.pitch,
            self.duration,
            self.velocity,
            self.emotion,
        ]
    }

    pub fn total(&self) -> usize {
        self.as_array().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: VocabPreset,
    /// Fixed sequence length N every batch is padded to.
    pub seq_len: usize,
    /// Width `l` of one element slice; the full latent is `7·l`.
    pub latent_per_element: usize,
    pub codebook_size: usize,
    pub encoder: StackDims,
    pub global_decoder: StackDims,
    pub element_decoder: StackDims,
    pub dr: StackDims,
    pub prior: StackDims,
    pub embeddings: EmbeddingSizes,
    pub dropout: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    /// Reseed codes unused for this many consecutive steps; 0 disables.
    pub dead_code_steps: u64,
    pub med: bool,
    pub dr_mode: DrMode,
    pub cond_mode: CondMode,
    pub decoders: DecoderMode,
    pub sampling: SamplingTable,
    /// Sampling policy for prior code generation.
    pub prior_sampling: SamplingPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub finetune_lr: f64,
    pub prior_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub prior_steps: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub precision: Precision,
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = MuserError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(MuserError::config(format!("unknown preset `{s}` (expected paper|desk)"))),
        }
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                vocab: VocabPreset::Paper,
                seq_len: 1024,
                latent_per_element: 16,
                codebook_size: 512,
                encoder: StackDims::new(8, 8, 128, 512),
                global_decoder: StackDims::new(4, 8, 256, 1024),
                element_decoder: StackDims::new(2, 8, 256, 1024),
                dr: StackDims::new(4, 4, 1024, 4096),
                prior: StackDims::new(8, 8, 256, 1024),
                embeddings: EmbeddingSizes {
                    family: 32,
                    bar_beat: 64,
                    tempo: 128,
                    chord: 256,
                    pitch: 512,
                    duration: 128,
                    velocity: 128,
                    emotion: 128,
                },
                dropout: 0.1,
                alpha: 0.1,
                beta: 0.25,
                ema_decay: 0.99,
                ema_epsilon: 1e-5,
                dead_code_steps: 2000,
                med: true,
                dr_mode: DrMode::Transformer,
                cond_mode: CondMode::CrossAttention,
                decoders: DecoderMode::GlobalElement,
                sampling: SamplingTable {
                    family: SamplingPolicy::new(1.0, 0.90),
                    bar_beat: SamplingPolicy::new(1.2, 1.00),
                    tempo: SamplingPolicy::new(1.2, 0.90),
                    chord: SamplingPolicy::new(1.0, 0.99),
                    pitch: SamplingPolicy::new(1.0, 0.90),
                    duration: SamplingPolicy::new(2.0, 0.90),
                    velocity: SamplingPolicy::new(5.0, 1.00),
                },
                prior_sampling: SamplingPolicy::new(1.0, 1.0),
            },
            Preset::Desk => Self {
                vocab: VocabPreset::Desk,
                seq_len: 256,
                latent_per_element: 4,
                codebook_size: 64,
                encoder: StackDims::new(2, 8, 32, 128),
                global_decoder: StackDims::new(2, 8, 64, 256),
                element_decoder: StackDims::new(1, 8, 64, 256),
                dr: StackDims::new(2, 4, 128, 512),
                prior: StackDims::new(2, 8, 64, 256),
                embeddings: EmbeddingSizes {
                    family: 8,
                    bar_beat: 16,
                    tempo: 32,
                    chord: 64,
                    pitch: 128,
                    duration: 32,
                    velocity: 32,
                    emotion: 32,
                },
                dropout: 0.1,
                alpha: 0.1,
                beta: 0.25,
                ema_decay: 0.99,
                ema_epsilon: 1e-5,
                dead_code_steps: 2000,
                med: true,
                dr_mode: DrMode::Transformer,
                cond_mode: CondMode::CrossAttention,
                decoders: DecoderMode::GlobalElement,
                sampling: SamplingTable::uniform(SamplingPolicy::new(1.0, 0.9)),
                prior_sampling: SamplingPolicy::new(1.0, 1.0),
            },
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.vocab)
    }

    /// Full latent width `L = 7·l`.
    pub fn latent_size(&self) -> usize {
        NUM_ELEMENTS * self.latent_per_element
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MuserError::config(m));
        if self.seq_len < 2 {
            return bad(format!("seq_len {} too short", self.seq_len));
        }
        if self.latent_per_element == 0 {
            return bad("latent_per_element must be positive".into());
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook_size {} < 2", self.codebook_size));
        }
        for (name, s) in [
            ("encoder", self.encoder),
            ("global_decoder", self.global_decoder),
            ("element_decoder", self.element_decoder),
            ("dr", self.dr),
            ("prior", self.prior),
        ] {
            if s.heads == 0 || s.hidden % s.heads != 0 || s.hidden == 0 || s.ff == 0 {
                return bad(format!("{name}: hidden {} not divisible by {} heads", s.hidden, s.heads));
            }
        }
        if self.decoders != DecoderMode::GlobalOnly && self.global_decoder.hidden != self.element_decoder.hidden {
            return bad("element decoders add the global state, so both hidden sizes must match".into());
        }
        if self.embeddings.as_array().contains(&0) {
            return bad("embedding sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_epsilon <= 0.0 {
            return bad("ema_decay must be in [0, 1) and ema_epsilon positive".into());
        }
        for t in TokenType::ELEMENTS {
            let p = self.sampling.get(t);
            if !(p.tau > 0.0) || !(p.rho > 0.0 && p.rho <= 1.0) {
                return bad(format!("sampling policy for {} out of range", t.name()));
            }
        }
        let p = self.prior_sampling;
        if !(p.tau > 0.0) || !(p.rho > 0.0 && p.rho <= 1.0) {
            return bad("prior sampling policy out of range".into());
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                lr: 1e-4,
                finetune_lr: 1e-5,
                prior_lr: 1e-4,
                batch_size: 16,
                steps: 100_000,
                prior_steps: 100_000,
                seed: 0,
                grad_clip: 0.0,
                precision: Precision::F32,
                log_every: 100,
            },
            Preset::Desk => Self {
                lr: 1e-3,
                finetune_lr: 1e-4,
                prior_lr: 1e-3,
                batch_size: 8,
                steps: 2000,
                prior_steps: 1000,
                seed: 0,
                grad_clip: 1.0,
                precision: Precision::F64,
                log_every: 100,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.finetune_lr > 0.0 && self.prior_lr > 0.0) {
            return Err(MuserError::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(MuserError::config("batch_size must be positive"));
        }
        if self.grad_clip < 0.0 {
            return Err(MuserError::config("grad_clip must be non-negative"));
        }
        Ok(())
    }
}

/// Everything a run needs: the preset it started from plus resolved values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            model: ModelConfig::preset(preset),
            train: TrainConfig::preset(preset),
        }
    }

    /// Parses a config document: `preset` picks the base values, the
    /// `[model]` and `[train]` tables override them field by field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| MuserError::config(e.to_string()))?;
        for key in doc.keys() {
            if !matches!(key.as_str(), "preset" | "model" | "train") {
                return Err(MuserError::config(format!("unknown top-level key `{key}`")));
            }
        }
        let preset: Preset = match doc.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(MuserError::config("`preset` must be a string")),
            None => Preset::Desk,
        };
        let mut base = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| MuserError::config(e.to_string()))?;
        let mut overrides = doc.clone();
        overrides.remove("preset");
        merge(&mut base, toml::Value::Table(overrides));
        let cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| MuserError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MuserError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        // Unknown keys survive the merge so deserialisation rejects them.
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::preset(Preset::Paper).validate().unwrap();
        RunConfig::preset(Preset::Desk).validate().unwrap();
        assert_eq!(ModelConfig::preset(Preset::Paper).latent_size(), 112);
        assert_eq!(ModelConfig::preset(Preset::Desk).latent_size(), 28);
    }

    #[test]
    fn toml_overrides_merge_onto_preset() {
        let cfg = RunConfig::from_toml(
            r#"
            preset = "desk"
            [model]
            seq_len = 32
            [model.encoder]
            layers = 3
            [train]
            steps = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.seq_len, 32);
        assert_eq!(cfg.model.encoder, StackDims::new(3, 8, 32, 128));
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_toml("[model]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("[model.encoder]\ndepth = 1").is_err());
        assert!(RunConfig::from_toml("extra = 1").is_err());
        assert!(RunConfig::from_toml("preset = \"huge\"").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::preset(Preset::Paper);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[model.sampling.pitch]\ntau = 1.0\nrho = 1.5").is_err());
        assert!(RunConfig::from_toml("[model.encoder]\nheads = 3").is_err());
    }
}
