//! Token types, vocabulary presets and value binning tables.
//!
//! Index 0 of every type is the empty symbol. For the family type index 0 is
//! EOS, which is also what an all-empty token means.
//!
//! | type      | layout |
//! |-----------|--------|
//! | family    | 0 EOS, 1 emotion, 2 metric, 3 note |
//! | bar/beat  | 1 bar marker, 2..=17 sub-beat positions 0..=15 |
//! | tempo     | 32..=248 bpm in steps of 4 |
//! | chord     | 1 `N:N`, 2 `CONTI`, then 12 roots × 11 qualities |
//! | pitch     | paper: MIDI 22..=107; desk: MIDI 40..=86 |
//! | duration  | grid units; paper 1..=16 and 32; desk 1,2,3,4,6,8,12,16 |
//! | velocity  | bin centres; paper `round(1 + k·126/40)`; desk multiples of 16 (127 last) |
//! | emotion   | 0 none, 1..=4 quadrants Q1..Q4 |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};

/// The eight token types, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenType {
    Family,
    BarBeat,
    Tempo,
    Chord,
    Pitch,
    Duration,
    Velocity,
    Emotion,
}

pub const NUM_TYPES: usize = 8;
pub const NUM_ELEMENTS: usize = 7;

impl TokenType {
    pub const ALL: [TokenType; NUM_TYPES] = [
        TokenType::Family,
        TokenType::BarBeat,
        TokenType::Tempo,
        TokenType::Chord,
        TokenType::Pitch,
        TokenType::Duration,
        TokenType::Velocity,
        TokenType::Emotion,
    ];

    /// Element order used for latent slices; emotion is not an element.
    pub const ELEMENTS: [TokenType; NUM_ELEMENTS] = [
        TokenType::Family,
        TokenType::BarBeat,
        TokenType::Tempo,
        TokenType::Chord,
        TokenType::Pitch,
        TokenType::Duration,
        TokenType::Velocity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            TokenType::Family => "f",
            TokenType::BarBeat => "b",
            TokenType::Tempo => "t",
            TokenType::Chord => "c",
            TokenType::Pitch => "p",
            TokenType::Duration => "d",
            TokenType::Velocity => "v",
            TokenType::Emotion => "o",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenType::Family => "family",
            TokenType::BarBeat => "bar_beat",
            TokenType::Tempo => "tempo",
            TokenType::Chord => "chord",
            TokenType::Pitch => "pitch",
            TokenType::Duration => "duration",
            TokenType::Velocity => "velocity",
            TokenType::Emotion => "emotion",
        }
    }

    pub fn is_element(self) -> bool {
        self != TokenType::Emotion
    }
}

impl fmt::Display for TokenType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for TokenType {
    type Err = MuserError;

    fn from_str(s: &str) -> Result<Self> {
        TokenType::ALL
            .into_iter()
            .find(|t| t.short() == s || t.name() == s)
            .ok_or_else(|| MuserError::data(format!("unknown token type `{s}`")))
    }
}

/// Parses a comma-separated element list such as `p,d,v`. Empty string is the empty set.
pub fn parse_elements(s: &str) -> Result<Vec<TokenType>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let t: TokenType = part.parse()?;
        if !t.is_element() {
            return Err(MuserError::data("emotion is not a transferable element"));
        }
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(usize)]
pub enum Family {
    Eos = 0,
    Emotion = 1,
    Metric = 2,
    Note = 3,
}

impl Family {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Family::Eos),
            1 => Some(Family::Emotion),
            2 => Some(Family::Metric),
            3 => Some(Family::Note),
            _ => None,
        }
    }

    /// Types that may hold a non-empty index under this family.
    pub fn active_types(self) -> &'static [TokenType] {
        match self {
            Family::Eos => &[],
            Family::Emotion => &[TokenType::Emotion],
            Family::Metric => &[TokenType::BarBeat, TokenType::Tempo, TokenType::Chord],
            Family::Note => &[TokenType::Pitch, TokenType::Duration, TokenType::Velocity],
        }
    }

    /// Types that must be non-empty under this family.
    pub fn required_types(self) -> &'static [TokenType] {
        match self {
            Family::Eos => &[],
            Family::Emotion => &[],
            Family::Metric => &[TokenType::BarBeat],
            Family::Note => &[TokenType::Pitch, TokenType::Duration, TokenType::Velocity],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Emotion {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [Emotion::Q1, Emotion::Q2, Emotion::Q3, Emotion::Q4];

    /// Vocabulary index (1..=4).
    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Emotion::ALL.get(i.checked_sub(1)?).copied()
    }

    /// Index for an optional label, 0 meaning none.
    pub fn index_of(e: Option<Emotion>) -> usize {
        e.map_or(0, Emotion::index)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.index())
    }
}

impl FromStr for Emotion {
    type Err = MuserError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Q1" | "q1" => Ok(Emotion::Q1),
            "Q2" | "q2" => Ok(Emotion::Q2),
            "Q3" | "q3" => Ok(Emotion::Q3),
            "Q4" | "q4" => Ok(Emotion::Q4),
            _ => Err(MuserError::data(format!("unknown emotion `{s}` (expected Q1..Q4)"))),
        }
    }
}

/// Parses `Q1`..`Q4` or `none`.
pub fn parse_optional_emotion(s: &str) -> Result<Option<Emotion>> {
    if s.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabPreset {
    Paper,
    #[default]
    Desk,
}

impl fmt::Display for VocabPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabPreset::Paper => "paper",
            VocabPreset::Desk => "desk",
        })
    }
}

impl FromStr for VocabPreset {
    type Err = MuserError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(VocabPreset::Paper),
            "desk" => Ok(VocabPreset::Desk),
            _ => Err(MuserError::config(format!("unknown preset `{s}` (expected paper|desk)"))),
        }
    }
}

pub const GRID_PER_BAR: usize = 16;
pub const BAR_MARKER: usize = 1;
pub const CHORD_NONE: usize = 1;
pub const CHORD_CONTI: usize = 2;

pub const CHORD_ROOTS: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
pub const CHORD_QUALITIES: [&str; 11] = [
    "maj", "min", "dim", "aug", "7", "maj7", "min7", "hdim7", "dim7", "sus2", "sus4",
];

const TEMPO_MIN: f64 = 32.0;
const TEMPO_STEP: f64 = 4.0;
const TEMPO_BINS: usize = 55;

/// Result of mapping a raw value onto a bin; `clamped` marks values outside the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binned {
    pub index: usize,
    pub clamped: bool,
}

/// Per-type sizes and binning tables for one preset.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub preset: VocabPreset,
    pitch_low: u8,
    pitch_high: u8,
    durations: Vec<u32>,
    velocities: Vec<u8>,
}

impl Vocabulary {
    pub fn new(preset: VocabPreset) -> Self {
        match preset {
            VocabPreset::Paper => Self {
                preset,
                pitch_low: 22,
                pitch_high: 107,
                durations: (1..=16).chain(std::iter::once(32)).collect(),
                velocities: (0..41)
                    .map(|k| (1.0 + k as f64 * 126.0 / 40.0).round() as u8)
                    .collect(),
            },
            VocabPreset::Desk => Self {
                preset,
                pitch_low: 40,
                pitch_high: 86,
                durations: vec![1, 2, 3, 4, 6, 8, 12, 16],
                velocities: vec![16, 32, 48, 64, 80, 96, 112, 127],
            },
        }
    }

    pub fn size(&self, t: TokenType) -> usize {
        match t {
            TokenType::Family => 4,
            TokenType::BarBeat => 2 + GRID_PER_BAR,
            TokenType::Tempo => 1 + TEMPO_BINS,
            TokenType::Chord => 3 + CHORD_ROOTS.len() * CHORD_QUALITIES.len(),
            TokenType::Pitch => 1 + (self.pitch_high - self.pitch_low) as usize + 1,
            TokenType::Duration => 1 + self.durations.len(),
            TokenType::Velocity => 1 + self.velocities.len(),
            TokenType::Emotion => 5,
        }
    }

    pub fn sizes(&self) -> [usize; NUM_TYPES] {
        TokenType::ALL.map(|t| self.size(t))
    }

    pub fn pitch_range(&self) -> (u8, u8) {
        (self.pitch_low, self.pitch_high)
    }

    pub fn duration_table(&self) -> &[u32] {
        &self.durations
    }

    pub fn velocity_table(&self) -> &[u8] {
        &self.velocities
    }

    pub fn pitch_index(&self, pitch: u8) -> Binned {
        let p = pitch.clamp(self.pitch_low, self.pitch_high);
        Binned {
            index: 1 + (p - self.pitch_low) as usize,
            clamped: p != pitch,
        }
    }

    pub fn pitch_value(&self, index: usize) -> Option<u8> {
        (1..self.size(TokenType::Pitch))
            .contains(&index)
            .then(|| self.pitch_low + (index - 1) as u8)
    }

    /// Nearest table entry; ties go to the shorter duration.
    pub fn duration_index(&self, units: u32) -> Binned {
        let units = units.max(1);
        let (i, _) = self
            .durations
            .iter()
            .enumerate()
            .min_by_key(|(_, &d)| (d as i64 - units as i64).abs())
            .expect("non-empty table");
        let max = *self.durations.last().unwrap();
        Binned {
            index: i + 1,
            clamped: units > max,
        }
    }

    pub fn duration_value(&self, index: usize) -> Option<u32> {
        self.durations.get(index.checked_sub(1)?).copied()
    }

    /// Nearest bin centre; ties go to the lower bin.
    pub fn velocity_index(&self, velocity: u8) -> Binned {
        let v = velocity.clamp(1, 127);
        let (i, _) = self
            .velocities
            .iter()
            .enumerate()
            .min_by_key(|(_, &c)| (c as i32 - v as i32).abs())
            .expect("non-empty table");
        Binned {
            index: i + 1,
            clamped: v != velocity,
        }
    }

    pub fn velocity_value(&self, index: usize) -> Option<u8> {
        self.velocities.get(index.checked_sub(1)?).copied()
    }

    pub fn tempo_index(&self, bpm: f64) -> Binned {
        let raw = ((bpm - TEMPO_MIN) / TEMPO_STEP).round();
        let k = raw.clamp(0.0, (TEMPO_BINS - 1) as f64);
        Binned {
            index: 1 + k as usize,
            clamped: raw != k || !bpm.is_finite(),
        }
    }

    pub fn tempo_value(&self, index: usize) -> Option<f64> {
        (1..=TEMPO_BINS)
            .contains(&index)
            .then(|| TEMPO_MIN + TEMPO_STEP * (index - 1) as f64)
    }

    pub fn check(&self, t: TokenType, index: usize) -> Result<()> {
        if index < self.size(t) {
            Ok(())
        } else {
            Err(MuserError::data(format!(
                "{} index {index} out of range for vocabulary size {} ({} preset)",
                t.name(),
                self.size(t),
                self.preset
            )))
        }
    }
}

/// Chord symbol for an index, e.g. `C:maj`, `N:N`, `CONTI`.
pub fn chord_symbol(index: usize) -> Option<String> {
    match index {
        0 => None,
        CHORD_NONE => Some("N:N".into()),
        CHORD_CONTI => Some("CONTI".into()),
        i if i < 3 + CHORD_ROOTS.len() * CHORD_QUALITIES.len() => {
            let k = i - 3;
            Some(format!(
                "{}:{}",
                CHORD_ROOTS[k / CHORD_QUALITIES.len()],
                CHORD_QUALITIES[k % CHORD_QUALITIES.len()]
            ))
        }
        _ => None,
    }
}

pub fn chord_index(symbol: &str) -> Result<usize> {
    match symbol {
        "N:N" | "N" => return Ok(CHORD_NONE),
        "CONTI" => return Ok(CHORD_CONTI),
        _ => {}
    }
    let (root, quality) = symbol
        .split_once(':')
        .ok_or_else(|| MuserError::data(format!("chord `{symbol}` is not root:quality")))?;
    let r = CHORD_ROOTS
        .iter()
        .position(|x| *x == root)
        .ok_or_else(|| MuserError::data(format!("unknown chord root `{root}`")))?;
    let q = CHORD_QUALITIES
        .iter()
        .position(|x| *x == quality)
        .ok_or_else(|| MuserError::data(format!("unknown chord quality `{quality}`")))?;
    Ok(3 + r * CHORD_QUALITIES.len() + q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sizes() {
        let v = Vocabulary::new(VocabPreset::Paper);
        assert_eq!(v.sizes(), [4, 18, 56, 135, 87, 18, 42, 5]);
    }

    #[test]
    fn desk_sizes() {
        let v = Vocabulary::new(VocabPreset::Desk);
        assert_eq!(v.sizes(), [4, 18, 56, 135, 48, 9, 9, 5]);
    }

    #[test]
    fn tempo_bins_clamp() {
        let v = Vocabulary::new(VocabPreset::Paper);
        assert_eq!(v.tempo_index(120.0), Binned { index: 1 + 22, clamped: false });
        assert_eq!(v.tempo_value(23), Some(120.0));
        assert!(v.tempo_index(400.0).clamped);
        assert_eq!(v.tempo_index(400.0).index, 55);
        assert_eq!(v.tempo_index(10.0).index, 1);
    }

    #[test]
    fn velocity_centres_span_range() {
        let v = Vocabulary::new(VocabPreset::Paper);
        assert_eq!(v.velocity_table().first(), Some(&1));
        assert_eq!(v.velocity_table().last(), Some(&127));
        let i = v.velocity_index(64).index;
        assert!((v.velocity_value(i).unwrap() as i32 - 64).abs() <= 2);
    }

    #[test]
    fn chord_symbols_round_trip() {
        for i in 1..135 {
            let s = chord_symbol(i).unwrap();
            assert_eq!(chord_index(&s).unwrap(), i);
        }
        assert!(chord_symbol(135).is_none());
    }

    #[test]
    fn element_list_parsing() {
        assert_eq!(
            parse_elements("v,p, d").unwrap(),
            vec![TokenType::Pitch, TokenType::Duration, TokenType::Velocity]
        );
        assert!(parse_elements("").unwrap().is_empty());
        assert!(parse_elements("o").is_err());
    }
}
