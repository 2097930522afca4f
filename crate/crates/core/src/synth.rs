//! Small synthetic corpora with planted, emotion-dependent element patterns.
//! Used by tests, the acceptance suite and CLI demos; no real dataset ships
//! with the crate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::score::{NoteEvent, Score, DEFAULT_TICKS_PER_BEAT};
use crate::tokenizer::{tokenize, CpSequence};
use crate::vocab::{Emotion, Vocabulary, GRID_PER_BAR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub bars: usize,
    /// Token budget per sequence (bars past it are dropped by the tokenizer).
    pub max_len: usize,
    /// Velocity level override, for corpora that should differ only in dynamics.
    pub velocity: Option<u8>,
    /// Reuse one rhythm and contour for every piece.
    pub shared_rhythm: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            bars: 3,
            max_len: 32,
            velocity: None,
            shared_rhythm: false,
        }
    }
}

const RHYTHMS: [&[usize]; 4] = [&[0, 4, 8, 12], &[0, 2, 4, 8], &[0, 6, 8, 12], &[0, 4, 10, 12]];

fn high_arousal(e: Emotion) -> bool {
    matches!(e, Emotion::Q1 | Emotion::Q2)
}

fn positive_valence(e: Emotion) -> bool {
    matches!(e, Emotion::Q1 | Emotion::Q4)
}

/// One piece: rhythm, contour, durations, dynamics, tempo and harmony all
/// depend on the quadrant plus per-piece randomness.
pub fn synthetic_score<R: Rng + ?Sized>(emotion: Emotion, opts: &SynthOptions, rng: &mut R) -> Score {
    let mut score = Score::new(DEFAULT_TICKS_PER_BEAT);
    let unit = score.ticks_per_bar() / GRID_PER_BAR as u64;
    let aroused = high_arousal(emotion);
    let positive = positive_valence(emotion);

    let rhythm = if opts.shared_rhythm {
        RHYTHMS[0]
    } else {
        *RHYTHMS.choose(rng).expect("non-empty")
    };
    let base: i32 = if opts.shared_rhythm { 60 } else { rng.gen_range(52..68) };
    let step: i32 = if positive { 2 } else { -2 };
    let dur_units: u64 = if aroused { 2 } else { 4 };
    let level: i32 = match opts.velocity {
        Some(v) => v as i32,
        None if aroused => rng.gen_range(96..116),
        None => rng.gen_range(36..56),
    };
    let bpm = if aroused { rng.gen_range(132.0..160.0) } else { rng.gen_range(64.0..88.0) };
    score.tempo_changes.push((0, bpm));
    let root = if positive { "C:maj" } else { "A:min" };

    let mut pitch = base;
    for bar in 0..opts.bars {
        let bar_start = bar as u64 * GRID_PER_BAR as u64;
        score.chords.push((bar_start * unit, root.to_string()));
        for (k, &pos) in rhythm.iter().enumerate() {
            let onset = (bar_start + pos as u64) * unit;
            let vel = (level + if k % 2 == 0 { 8 } else { -8 }).clamp(1, 127) as u8;
            score
                .notes
                .push(NoteEvent::new(pitch.clamp(40, 86) as u8, onset, dur_units * unit, vel));
            pitch += step;
        }
    }
    score.sort();
    score
}

/// `count` pieces cycling through the four quadrants.
pub fn synthetic_corpus(count: usize, vocab: &Vocabulary, opts: &SynthOptions, seed: u64) -> Result<Vec<CpSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let e = Emotion::ALL[i % 4];
            let score = synthetic_score(e, opts, &mut rng);
            Ok(tokenize(&score, Some(e), vocab, opts.max_len)?.0)
        })
        .collect()
}
