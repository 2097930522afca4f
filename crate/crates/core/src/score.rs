use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::vocab::GRID_PER_BAR;

pub const DEFAULT_TICKS_PER_BEAT: u32 = 480;
pub const DEFAULT_BEATS_PER_BAR: u32 = 4;
pub const DEFAULT_BPM: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: u64, duration: u64, velocity: u8) -> Self {
        Self {
            pitch,
            onset,
            duration,
            velocity,
        }
    }

    pub fn end(&self) -> u64 {
        self.onset + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub notes: Vec<NoteEvent>,
    /// `(tick, bpm)` sorted by tick.
    pub tempo_changes: Vec<(u64, f64)>,
    pub ticks_per_beat: u32,
    pub beats_per_bar: u32,
    /// `(tick, chord symbol)` sorted by tick.
    pub chords: Vec<(u64, String)>,
}

impl Default for Score {
    fn default() -> Self {
        Self::new(DEFAULT_TICKS_PER_BEAT)
    }
}

impl Score {
    pub fn new(ticks_per_beat: u32) -> Self {
        Self {
            notes: Vec::new(),
            tempo_changes: Vec::new(),
            ticks_per_beat,
            beats_per_bar: DEFAULT_BEATS_PER_BAR,
            chords: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ticks_per_beat == 0 || self.beats_per_bar == 0 {
            return Err(MuserError::data("ticks_per_beat and beats_per_bar must be positive"));
        }
        for n in &self.notes {
            if n.duration == 0 || n.pitch > 127 || n.velocity == 0 || n.velocity > 127 {
                return Err(MuserError::data(format!("invalid note {n:?}")));
            }
        }
        if self.tempo_changes.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(MuserError::data("tempo changes not sorted by tick"));
        }
        if self.chords.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(MuserError::data("chords not sorted by tick"));
        }
        Ok(())
    }

    pub fn ticks_per_bar(&self) -> u64 {
        self.ticks_per_beat as u64 * self.beats_per_bar as u64
    }

    /// Length of one grid step in ticks (fractional when the bar does not divide by 16).
    pub fn grid_unit(&self) -> f64 {
        self.ticks_per_bar() as f64 / GRID_PER_BAR as f64
    }

    /// Nearest grid step of a tick position.
    pub fn to_grid(&self, tick: u64) -> u64 {
        (tick as f64 / self.grid_unit()).round() as u64
    }

    /// Half-open grid interval `[start, end)` covered by a note, at least one step long.
    pub fn note_span(&self, n: &NoteEvent) -> (u64, u64) {
        let start = self.to_grid(n.onset);
        let end = self.to_grid(n.end()).max(start + 1);
        (start, end)
    }

    pub fn sort(&mut self) {
        self.notes
            .sort_by_key(|n| (n.onset, n.pitch, n.duration, n.velocity));
        self.tempo_changes
            .sort_by(|a, b| a.0.cmp(&b.0));
        self.chords.sort_by(|a, b| a.0.cmp(&b.0));
    }
}
