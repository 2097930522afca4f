//! Piece- and bar-level pitch statistics on the 16-per-bar grid.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::score::{NoteEvent, Score};
use crate::vocab::GRID_PER_BAR;

fn non_empty(score: &Score) -> Result<()> {
    if score.notes.is_empty() {
        return Err(MuserError::data("metric of a score without notes"));
    }
    Ok(())
}

/// Highest minus lowest pitch, in semitones.
pub fn pitch_range(score: &Score) -> Result<f64> {
    non_empty(score)?;
    let hi = score.notes.iter().map(|n| n.pitch).max().unwrap();
    let lo = score.notes.iter().map(|n| n.pitch).min().unwrap();
    Ok((hi - lo) as f64)
}

/// Number of distinct pitch classes.
pub fn n_pitch_classes(score: &Score) -> Result<f64> {
    non_empty(score)?;
    let classes: BTreeSet<u8> = score.notes.iter().map(|n| n.pitch % 12).collect();
    Ok(classes.len() as f64)
}

/// Mean number of sounding notes over the grid steps where at least one
/// note sounds.
pub fn polyphony(score: &Score) -> Result<f64> {
    non_empty(score)?;
    let mut spans: Vec<(u64, u64)> = score.notes.iter().map(|n| score.note_span(n)).collect();
    let sounding: u64 = spans.iter().map(|(a, b)| b - a).sum();
    spans.sort_unstable();
    let mut covered = 0;
    let (mut start, mut end) = spans[0];
    for &(a, b) in &spans[1..] {
        if a > end {
            covered += end - start;
            start = a;
            end = b;
        } else {
            end = end.max(b);
        }
    }
    covered += end - start;
    Ok(sounding as f64 / covered as f64)
}

/// Splits a score into bars by note onset; a note belongs wholly to the bar
/// it starts in. Bars without onsets are omitted.
pub fn bars(score: &Score) -> Vec<Score> {
    let mut out: Vec<(u64, Vec<NoteEvent>)> = Vec::new();
    let mut notes = score.notes.clone();
    notes.sort_by_key(|n| score.note_span(n).0);
    for n in notes {
        let bar = score.note_span(&n).0 / GRID_PER_BAR as u64;
        match out.last_mut() {
            Some((b, v)) if *b == bar => v.push(n),
            _ => out.push((bar, vec![n])),
        }
    }
    out.into_iter()
        .map(|(_, notes)| Score {
            notes,
            ..score.clone()
        })
        .collect()
}

/// Metric averaged over the non-empty bars.
pub fn bar_level(metric: fn(&Score) -> Result<f64>, score: &Score) -> Result<f64> {
    let bars = bars(score);
    if bars.is_empty() {
        return Err(MuserError::data("no bar contains a note"));
    }
    let mut sum = 0.0;
    for b in &bars {
        sum += metric(b)?;
    }
    Ok(sum / bars.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PieceMetrics {
    pub pr: f64,
    pub npc: f64,
    pub poly: f64,
    pub b_pr: f64,
    pub b_npc: f64,
    pub b_poly: f64,
}

impl PieceMetrics {
    pub const NAMES: [&'static str; 6] = ["PR", "NPC", "POLY", "B-PR", "B-NPC", "B-POLY"];

    pub fn of(score: &Score) -> Result<Self> {
        Ok(Self {
            pr: pitch_range(score)?,
            npc: n_pitch_classes(score)?,
            poly: polyphony(score)?,
            b_pr: bar_level(pitch_range, score)?,
            b_npc: bar_level(n_pitch_classes, score)?,
            b_poly: bar_level(polyphony, score)?,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [self.pr, self.npc, self.poly, self.b_pr, self.b_npc, self.b_poly]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single piece.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pieces: Vec<(String, PieceMetrics)>,
    /// Pieces without notes, left out of the summary.
    pub skipped: Vec<String>,
    pub summary: Vec<(String, MeanStd)>,
}

impl MetricsReport {
    /// Metrics for named scores, computed in parallel; the order of the
    /// report follows the input.
    pub fn build(scores: &[(String, Score)]) -> Result<Self> {
        use rayon::prelude::*;
        let results: Vec<Result<PieceMetrics>> = super::thread_pool()?.install(|| scores.par_iter().map(|(_, s)| PieceMetrics::of(s)).collect());
        let mut pieces = Vec::new();
        let mut skipped = Vec::new();
        for ((name, s), r) in scores.iter().zip(results) {
            match r {
                Ok(m) => pieces.push((name.clone(), m)),
                Err(_) if s.notes.is_empty() => skipped.push(name.clone()),
                Err(e) => return Err(e),
            }
        }
        if pieces.is_empty() {
            return Err(MuserError::data("no piece with notes to evaluate"));
        }
        let summary = PieceMetrics::NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let xs: Vec<f64> = pieces.iter().map(|(_, m)| m.values()[k]).collect();
                (name.to_string(), MeanStd::of(&xs))
            })
            .collect();
        Ok(Self { pieces, skipped, summary })
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:>10} {:>10}\n", "metric", "mean", "std");
        for (name, ms) in &self.summary {
            s.push_str(&format!("{name:<8} {:>10.3} {:>10.3}\n", ms.mean, ms.std));
        }
        s.push_str(&format!("pieces: {}  skipped: {}\n", self.pieces.len(), self.skipped.len()));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// One grid step is 120 ticks at 480 ticks per beat.
    fn score(notes: &[(u8, u64, u64)]) -> Score {
        let mut s = Score::default();
        s.notes = notes.iter().map(|&(p, on, dur)| NoteEvent::new(p, on * 120, dur * 120, 80)).collect();
        s
    }

    #[test]
    fn hand_cases() {
        let s = score(&[(60, 0, 1), (67, 1, 1), (72, 2, 1)]);
        assert_eq!(pitch_range(&s).unwrap(), 12.0);
        assert_eq!(pitch_range(&score(&[(64, 0, 1)])).unwrap(), 0.0);
        assert_eq!(n_pitch_classes(&score(&[(60, 0, 1), (72, 0, 1), (67, 0, 1), (79, 0, 1)])).unwrap(), 2.0);
        let chromatic: Vec<_> = (0..12).map(|i| (60 + i as u8, i, 1)).collect();
        assert_eq!(n_pitch_classes(&score(&chromatic)).unwrap(), 12.0);
        assert_eq!(polyphony(&score(&[(60, 0, 2), (62, 1, 2)])).unwrap(), 4.0 / 3.0);
        assert_eq!(polyphony(&score(&[(60, 0, 1), (62, 3, 2)])).unwrap(), 1.0);
        assert!(pitch_range(&Score::default()).is_err());
    }

    #[test]
    fn two_bar_range() {
        let s = score(&[(60, 0, 1), (64, 4, 1), (60, 16, 1), (72, 20, 1)]);
        assert_eq!(bar_level(pitch_range, &s).unwrap(), 8.0);
        let one = score(&[(60, 0, 1), (65, 3, 2)]);
        assert_eq!(bar_level(polyphony, &one).unwrap(), polyphony(&one).unwrap());
    }

    #[test]
    fn report_skips_empty_pieces() {
        let r = MetricsReport::build(&[("a".into(), score(&[(60, 0, 4)])), ("b".into(), Score::default())]).unwrap();
        assert_eq!(r.skipped, vec!["b".to_string()]);
        assert_eq!(r.summary[0].1, MeanStd { mean: 0.0, std: 0.0 });
        assert!(r.to_table().contains("B-POLY"));
        assert!(r.to_json().contains("\"pieces\""));
    }

    proptest! {
        #[test]
        fn bar_metrics_never_exceed_piece_metrics(notes in prop::collection::vec((40u8..90, 0u64..64, 1u64..24), 1..30)) {
            let s = score(&notes);
            prop_assert!(bar_level(pitch_range, &s).unwrap() <= pitch_range(&s).unwrap());
            prop_assert!(bar_level(n_pitch_classes, &s).unwrap() <= n_pitch_classes(&s).unwrap());
            prop_assert!(polyphony(&s).unwrap() >= 1.0);
        }
    }
}
