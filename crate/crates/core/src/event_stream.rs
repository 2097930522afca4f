//! Pre-tokenized corpus files.
//!
//! ```json
//! {"version": 1, "vocab_preset": "desk", "emotion": "Q1",
//!  "tokens": [[1,0,0,0,0,0,0,1], [2,1,0,0,0,0,0,0], [0,0,0,0,0,0,0,0]]}
//! ```
//!
//! `emotion` is `Q1`..`Q4` or `none`; each token lists the
//! family, bar/beat, tempo, chord, pitch, duration, velocity and emotion
//! indices in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::tokenizer::{CpSequence, CpToken};
use crate::vocab::{parse_optional_emotion, TokenType, VocabPreset, Vocabulary, NUM_TYPES};

pub const EVENT_STREAM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventStream {
    pub version: u32,
    pub vocab_preset: VocabPreset,
    pub emotion: String,
    pub tokens: Vec<[usize; NUM_TYPES]>,
}

impl EventStream {
    pub fn from_sequence(seq: &CpSequence, preset: VocabPreset) -> Self {
        Self {
            version: EVENT_STREAM_VERSION,
            vocab_preset: preset,
            emotion: seq.emotion.map_or_else(|| "none".to_string(), |e| e.to_string()),
            tokens: seq.tokens.iter().map(|t| t.0).collect(),
        }
    }

    /// Validates indices against the stream's own preset.
    pub fn into_sequence(self) -> Result<(CpSequence, VocabPreset)> {
        if self.version != EVENT_STREAM_VERSION {
            return Err(MuserError::data(format!("unsupported event stream version {}", self.version)));
        }
        let emotion = parse_optional_emotion(&self.emotion)?;
        let vocab = Vocabulary::new(self.vocab_preset);
        for (i, tok) in self.tokens.iter().enumerate() {
            for t in TokenType::ALL {
                vocab
                    .check(t, tok[t.index()])
                    .map_err(|e| MuserError::data(format!("token {i}: {e}")))?;
            }
        }
        let seq = CpSequence {
            tokens: self.tokens.into_iter().map(CpToken).collect(),
            emotion,
        };
        Ok((seq, self.vocab_preset))
    }
}

pub fn parse_event_stream(json: &str) -> Result<(CpSequence, VocabPreset)> {
    let stream: EventStream =
        serde_json::from_str(json).map_err(|e| MuserError::data(format!("event stream: {e}")))?;
    stream.into_sequence()
}

pub fn load_event_stream(path: &Path) -> Result<(CpSequence, VocabPreset)> {
    let text = std::fs::read_to_string(path).map_err(|e| MuserError::io(path, e))?;
    parse_event_stream(&text).map_err(|e| MuserError::data(format!("{}: {e}", path.display())))
}

pub fn save_event_stream(seq: &CpSequence, preset: VocabPreset, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&EventStream::from_sequence(seq, preset))
        .map_err(|e| MuserError::data(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| MuserError::io(path, e))
}
