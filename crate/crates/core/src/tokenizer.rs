//! Compound-word tokenization.
//!
//! Emission order: an emotion token (only when the piece carries a label),
//! then for each bar a bar token followed, for each occupied sub-beat, by a
//! metric token and the notes starting there in ascending pitch. A sub-beat
//! is occupied by a note onset, a tempo change or a chord change. Tempo is
//! written on the first metric token and again whenever its bin changes;
//! chord is written where a chord change falls. The sequence ends with one
//! EOS token (all indices zero).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::score::{NoteEvent, Score, DEFAULT_BEATS_PER_BAR, DEFAULT_BPM, DEFAULT_TICKS_PER_BEAT};
use crate::vocab::{chord_index, chord_symbol, Emotion, Family, TokenType, Vocabulary, BAR_MARKER, GRID_PER_BAR, NUM_TYPES};

/// One index per token type, in [`TokenType::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CpToken(pub [usize; NUM_TYPES]);

impl CpToken {
    pub const EOS: CpToken = CpToken([0; NUM_TYPES]);

    pub fn get(&self, t: TokenType) -> usize {
        self.0[t.index()]
    }

    pub fn set(&mut self, t: TokenType, v: usize) {
        self.0[t.index()] = v;
    }

    pub fn family(&self) -> Option<Family> {
        Family::from_index(self.0[0])
    }

    pub fn emotion(e: Emotion) -> Self {
        let mut t = Self::EOS;
        t.set(TokenType::Family, Family::Emotion as usize);
        t.set(TokenType::Emotion, e.index());
        t
    }

    pub fn bar() -> Self {
        let mut t = Self::EOS;
        t.set(TokenType::Family, Family::Metric as usize);
        t.set(TokenType::BarBeat, BAR_MARKER);
        t
    }

    pub fn metric(position: usize, tempo: usize, chord: usize) -> Self {
        let mut t = Self::EOS;
        t.set(TokenType::Family, Family::Metric as usize);
        t.set(TokenType::BarBeat, 2 + position);
        t.set(TokenType::Tempo, tempo);
        t.set(TokenType::Chord, chord);
        t
    }

    pub fn note(pitch: usize, duration: usize, velocity: usize) -> Self {
        let mut t = Self::EOS;
        t.set(TokenType::Family, Family::Note as usize);
        t.set(TokenType::Pitch, pitch);
        t.set(TokenType::Duration, duration);
        t.set(TokenType::Velocity, velocity);
        t
    }

    pub fn is_eos(&self) -> bool {
        self.0[0] == Family::Eos as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CpSequence {
    pub tokens: Vec<CpToken>,
    pub emotion: Option<Emotion>,
}

impl CpSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position of the first EOS token.
    pub fn eos_position(&self) -> Option<usize> {
        self.tokens.iter().position(CpToken::is_eos)
    }

    /// Checks vocabulary bounds and the structural rules of the emission order.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(MuserError::data("empty token sequence"));
        }
        let mut seen_metric = false;
        for (i, tok) in self.tokens.iter().enumerate() {
            for t in TokenType::ALL {
                vocab.check(t, tok.get(t))?;
            }
            let fam = tok.family().expect("family index checked");
            for t in TokenType::ALL.into_iter().skip(1) {
                if tok.get(t) != 0 && !fam.active_types().contains(&t) {
                    return Err(MuserError::data(format!(
                        "token {i}: {} set on a {fam:?} token",
                        t.name()
                    )));
                }
            }
            for t in fam.required_types() {
                if tok.get(*t) == 0 {
                    return Err(MuserError::data(format!(
                        "token {i}: {fam:?} token with empty {}",
                        t.name()
                    )));
                }
            }
            match fam {
                Family::Emotion => {
                    if i != 0 {
                        return Err(MuserError::data(format!("emotion token at position {i}")));
                    }
                    if Emotion::from_index(tok.get(TokenType::Emotion)) != self.emotion {
                        return Err(MuserError::data("emotion token disagrees with sequence label"));
                    }
                }
                Family::Metric => seen_metric = true,
                Family::Note if !seen_metric => {
                    return Err(MuserError::data(format!("note token {i} before any metric token")));
                }
                Family::Eos if i + 1 != self.tokens.len() => {
                    return Err(MuserError::data(format!("EOS at position {i} is not last")));
                }
                _ => {}
            }
        }
        if !self.tokens.last().unwrap().is_eos() {
            return Err(MuserError::data("sequence does not end with EOS"));
        }
        if self.emotion.is_some() && self.tokens[0].family() != Some(Family::Emotion) {
            return Err(MuserError::data("labelled sequence does not start with an emotion token"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenizeReport {
    /// Values outside a binning table that were clamped to its edge.
    pub clamped: usize,
    /// Bars dropped from the end to respect the length limit.
    pub truncated_bars: usize,
    /// Tokens dropped inside the last kept bar when even one bar did not fit.
    pub truncated_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetokenizeReport {
    /// Note tokens with an empty pitch, duration or velocity.
    pub skipped_notes: usize,
}

#[derive(Default)]
struct Step {
    notes: Vec<(usize, usize, usize, u8)>,
    tempo: Option<usize>,
    chord: Option<usize>,
}

/// Tokenizes a score onto the 16-per-bar grid. `max_len` bounds the total
/// sequence length including the emotion and EOS tokens.
pub fn tokenize(
    score: &Score,
    emotion: Option<Emotion>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(CpSequence, TokenizeReport)> {
    score.validate()?;
    let mut report = TokenizeReport::default();
    let unit = score.grid_unit();
    let grid = |tick: u64| (tick as f64 / unit).round() as usize;

    // Grid position → events.
    let mut steps: BTreeMap<usize, Step> = BTreeMap::new();
    for n in &score.notes {
        let (start, end) = score.note_span(n);
        let p = vocab.pitch_index(n.pitch);
        let d = vocab.duration_index((end - start) as u32);
        let v = vocab.velocity_index(n.velocity);
        report.clamped += p.clamped as usize + d.clamped as usize + v.clamped as usize;
        steps
            .entry(start as usize)
            .or_default()
            .notes
            .push((p.index, d.index, v.index, n.pitch));
    }
    let last_note_step = steps.keys().next_back().copied();
    let Some(last_note_step) = last_note_step else {
        let mut tokens = Vec::new();
        if let Some(e) = emotion {
            tokens.push(CpToken::emotion(e));
        }
        tokens.push(CpToken::EOS);
        return Ok((CpSequence { tokens, emotion }, report));
    };
    let last_bar = last_note_step / GRID_PER_BAR;

    let tempos = if score.tempo_changes.is_empty() {
        vec![(0, DEFAULT_BPM)]
    } else {
        score.tempo_changes.clone()
    };
    for (tick, bpm) in tempos {
        let b = vocab.tempo_index(bpm);
        report.clamped += b.clamped as usize;
        let pos = grid(tick);
        if pos / GRID_PER_BAR > last_bar {
            continue;
        }
        steps.entry(pos).or_default().tempo = Some(b.index);
    }
    for (tick, sym) in &score.chords {
        let pos = grid(*tick);
        if pos / GRID_PER_BAR > last_bar {
            continue;
        }
        steps.entry(pos).or_default().chord = Some(chord_index(sym)?);
    }

    // Build bars, then fit them to the length budget.
    let mut bars: Vec<Vec<CpToken>> = vec![Vec::new(); last_bar + 1];
    let mut emitted_tempo: Option<usize> = None;
    let mut active_tempo: Option<usize> = None;
    for (pos, mut step) in steps {
        if let Some(t) = step.tempo {
            active_tempo = Some(t);
        }
        let tempo_out = match active_tempo {
            Some(t) if emitted_tempo != Some(t) => {
                emitted_tempo = Some(t);
                t
            }
            _ => 0,
        };
        let chord_out = step.chord.unwrap_or(0);
        if step.notes.is_empty() && tempo_out == 0 && chord_out == 0 {
            continue;
        }
        let bar = &mut bars[pos / GRID_PER_BAR];
        bar.push(CpToken::metric(pos % GRID_PER_BAR, tempo_out, chord_out));
        step.notes.sort_by_key(|&(p, d, v, raw)| (raw, p, d, v));
        for (p, d, v, _) in step.notes {
            bar.push(CpToken::note(p, d, v));
        }
    }

    let fixed = emotion.is_some() as usize + 1;
    if max_len <= fixed {
        return Err(MuserError::data(format!("length limit {max_len} leaves no room for content")));
    }
    let mut tokens = Vec::new();
    if let Some(e) = emotion {
        tokens.push(CpToken::emotion(e));
    }
    let budget = max_len - fixed;
    let mut used = 0;
    for (i, bar) in bars.iter().enumerate() {
        let need = 1 + bar.len();
        if used + need > budget {
            report.truncated_bars = bars.len() - i;
            if i == 0 {
                // Not even the first bar fits: keep its head.
                tokens.push(CpToken::bar());
                let room = budget - 1;
                tokens.extend_from_slice(&bar[..room]);
                // A trailing metric token without its notes is still well-formed.
                report.truncated_tokens = bar.len() - room;
                report.truncated_bars -= 1;
            }
            break;
        }
        tokens.push(CpToken::bar());
        tokens.extend_from_slice(bar);
        used += need;
    }
    tokens.push(CpToken::EOS);
    Ok((CpSequence { tokens, emotion }, report))
}

/// Inverse of [`tokenize`], written at the default resolution.
pub fn detokenize(seq: &CpSequence, vocab: &Vocabulary) -> (Score, DetokenizeReport) {
    let mut score = Score::new(DEFAULT_TICKS_PER_BEAT);
    score.beats_per_bar = DEFAULT_BEATS_PER_BAR;
    let unit = score.ticks_per_bar() / GRID_PER_BAR as u64;
    let mut report = DetokenizeReport::default();
    let mut bar: Option<u64> = None;
    let mut pos: u64 = 0;
    for tok in &seq.tokens {
        match tok.family() {
            Some(Family::Eos) => break,
            Some(Family::Metric) => {
                let b = tok.get(TokenType::BarBeat);
                if b == BAR_MARKER {
                    bar = Some(bar.map_or(0, |x| x + 1));
                    pos = 0;
                } else if b >= 2 {
                    pos = (b - 2) as u64;
                }
                let tick = (bar.unwrap_or(0) * GRID_PER_BAR as u64 + pos) * unit;
                if let Some(bpm) = vocab.tempo_value(tok.get(TokenType::Tempo)) {
                    if score.tempo_changes.last().map(|x| x.0) == Some(tick) {
                        score.tempo_changes.pop();
                    }
                    score.tempo_changes.push((tick, bpm));
                }
                if let Some(sym) = chord_symbol(tok.get(TokenType::Chord)) {
                    score.chords.push((tick, sym));
                }
            }
            Some(Family::Note) => {
                let p = vocab.pitch_value(tok.get(TokenType::Pitch));
                let d = vocab.duration_value(tok.get(TokenType::Duration));
                let v = vocab.velocity_value(tok.get(TokenType::Velocity));
                match (p, d, v) {
                    (Some(p), Some(d), Some(v)) => {
                        let onset = (bar.unwrap_or(0) * GRID_PER_BAR as u64 + pos) * unit;
                        score.notes.push(NoteEvent::new(p, onset, d as u64 * unit, v));
                    }
                    _ => report.skipped_notes += 1,
                }
            }
            _ => {}
        }
    }
    (score, report)
}
