//! Loading pieces from MIDI files and event-stream JSON, and writing them back.

use std::path::{Path, PathBuf};

use crate::error::{MuserError, Result};
use crate::event_stream::{load_event_stream, save_event_stream};
use crate::midi::{read_midi, write_midi};
use crate::tokenizer::{detokenize, tokenize, CpSequence, TokenizeReport};
use crate::vocab::{Emotion, Vocabulary};

/// Quadrant label from a file name such as `Q3_piece.mid`.
pub fn emotion_from_name(path: &Path) -> Option<Emotion> {
    let stem = path.file_stem()?.to_str()?;
    let head = stem.get(..2)?;
    let rest = &stem[2..];
    if !(rest.is_empty() || rest.starts_with(['_', '-', '.', ' '])) {
        return None;
    }
    head.parse().ok()
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn is_piece(path: &Path) -> bool {
    matches!(extension(path).as_str(), "mid" | "midi" | "json")
}

/// Expands directories (recursively) into piece files, sorted by path.
pub fn collect_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack: Vec<PathBuf> = inputs.to_vec();
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            let entries = std::fs::read_dir(&p).map_err(|e| MuserError::io(&p, e))?;
            for entry in entries {
                stack.push(entry.map_err(|e| MuserError::io(&p, e))?.path());
            }
        } else if p.is_file() {
            if is_piece(&p) || inputs.contains(&p) {
                out.push(p);
            }
        } else {
            return Err(MuserError::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Reads one piece. MIDI is tokenized with the label taken from the file
/// name; event streams must use the same vocabulary preset.
pub fn load_piece(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<(CpSequence, Option<TokenizeReport>)> {
    match extension(path).as_str() {
        "json" => {
            let (seq, preset) = load_event_stream(path)?;
            if preset != vocab.preset {
                return Err(MuserError::data(format!(
                    "{}: vocabulary preset {preset}, expected {}",
                    path.display(),
                    vocab.preset
                )));
            }
            if seq.len() > max_len {
                return Err(MuserError::data(format!("{}: {} tokens exceed {max_len}", path.display(), seq.len())));
            }
            Ok((seq, None))
        }
        "mid" | "midi" => {
            let score = read_midi(path)?;
            let (seq, report) = tokenize(&score, emotion_from_name(path), vocab, max_len)
                .map_err(|e| MuserError::data(format!("{}: {e}", path.display())))?;
            Ok((seq, Some(report)))
        }
        other => Err(MuserError::data(format!("{}: unsupported extension `{other}`", path.display()))),
    }
}

/// All pieces under `inputs`, named by file stem.
pub fn load_corpus(inputs: &[PathBuf], vocab: &Vocabulary, max_len: usize) -> Result<Vec<(String, CpSequence)>> {
    let paths = collect_paths(inputs)?;
    if paths.is_empty() {
        return Err(MuserError::data("no .mid, .midi or .json pieces found"));
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("piece").to_string();
            Ok((name, load_piece(p, vocab, max_len)?.0))
        })
        .collect()
}

/// Writes MIDI for `.mid`/`.midi` paths and an event stream otherwise.
pub fn write_piece(seq: &CpSequence, vocab: &Vocabulary, path: &Path) -> Result<()> {
    match extension(path).as_str() {
        "mid" | "midi" => write_midi(&detokenize(seq, vocab).0, path),
        _ => save_event_stream(seq, vocab.preset, path),
    }
}
