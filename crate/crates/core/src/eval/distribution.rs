//! Per-element token value histograms grouped by quadrant.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::tokenizer::CpSequence;
use crate::vocab::{Emotion, TokenType};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub element: TokenType,
    pub emotion: Option<Emotion>,
    pub index: usize,
    pub count: usize,
}

/// Counts of non-empty indices per (element, quadrant), sorted by element,
/// quadrant and index.
pub fn element_distribution(seqs: &[CpSequence]) -> Vec<HistogramRow> {
    let mut counts: BTreeMap<(TokenType, Option<Emotion>, usize), usize> = BTreeMap::new();
    for s in seqs {
        for tok in &s.tokens {
            for eps in TokenType::ELEMENTS {
                let v = tok.get(eps);
                if v != 0 {
                    *counts.entry((eps, s.emotion, v)).or_default() += 1;
                }
            }
        }
    }
    counts
        .into_iter()
        .map(|((element, emotion, index), count)| HistogramRow {
            element,
            emotion,
            index,
            count,
        })
        .collect()
}

pub fn write_distribution_csv<W: Write>(rows: &[HistogramRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| MuserError::data(format!("csv: {e}"));
    w.write_record(["element", "emotion", "index", "count"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.element.name().to_string(),
            r.emotion.map_or("none".into(), |e| e.to_string()),
            r.index.to_string(),
            r.count.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| MuserError::data(format!("csv: {e}")))?;
    Ok(())
}

/// Histogram of one element's non-empty indices over a sequence, `size` bins.
pub fn value_histogram(seq: &CpSequence, element: TokenType, size: usize) -> Vec<f64> {
    let mut h = vec![0.0; size];
    for tok in &seq.tokens {
        let v = tok.get(element);
        if v != 0 && v < size {
            h[v] += 1.0;
        }
    }
    h
}

/// Earth mover's distance between two histograms on the same ordered bins,
/// each normalised to unit mass. Unit ground distance between adjacent bins.
pub fn histogram_emd(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MuserError::data("histograms differ in bin count"));
    }
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if sa <= 0.0 || sb <= 0.0 {
        return Err(MuserError::data("EMD of an empty histogram"));
    }
    let mut carry = 0.0;
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        carry += x / sa - y / sb;
        total += carry.abs();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::CpToken;

    fn seq(tokens: Vec<CpToken>, e: Option<Emotion>) -> CpSequence {
        CpSequence { tokens, emotion: e }
    }

    #[test]
    fn totals_equal_non_empty_counts() {
        let a = seq(
            vec![CpToken::emotion(Emotion::Q2), CpToken::bar(), CpToken::metric(0, 5, 3), CpToken::note(4, 2, 6), CpToken::note(4, 1, 6), CpToken::EOS],
            Some(Emotion::Q2),
        );
        let rows = element_distribution(&[a.clone()]);
        for eps in TokenType::ELEMENTS {
            let expect: usize = a.tokens.iter().filter(|t| t.get(eps) != 0).count();
            let got: usize = rows.iter().filter(|r| r.element == eps).map(|r| r.count).sum();
            assert_eq!(got, expect, "{eps}");
        }
        assert!(rows.iter().all(|r| r.index != 0));
        let pitch: Vec<_> = rows.iter().filter(|r| r.element == TokenType::Pitch).collect();
        assert_eq!((pitch.len(), pitch[0].count), (1, 2));
    }

    #[test]
    fn note_only_family_mass_sits_on_one_bin() {
        let s = seq(vec![CpToken::note(1, 1, 1), CpToken::note(2, 1, 1), CpToken::EOS], None);
        let fam: Vec<_> = element_distribution(&[s]).into_iter().filter(|r| r.element == TokenType::Family).collect();
        assert_eq!(fam.len(), 1);
        assert_eq!(fam[0].count, 2);
    }

    #[test]
    fn emd_of_shifted_mass() {
        assert_eq!(histogram_emd(&[1.0, 0.0, 0.0], &[0.0, 0.0, 2.0]).unwrap(), 2.0);
        assert_eq!(histogram_emd(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(histogram_emd(&[0.0], &[1.0]).is_err());
    }
}
