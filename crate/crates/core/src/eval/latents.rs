//! Time-pooled element latents, their CSV export and a 2-D PCA projection.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::med::slice_latent;
use crate::model::MuserModel;
use crate::tokenizer::CpSequence;
use crate::vocab::{Emotion, TokenType};

use super::silhouette::silhouette;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub piece: usize,
    pub emotion: Option<Emotion>,
    pub element: TokenType,
    /// Mean of the element's `z_q` slice over all `N` steps.
    pub vector: Vec<f64>,
}

/// One row per (piece, element).
pub fn export_latents(model: &MuserModel, seqs: &[CpSequence]) -> Result<Vec<LatentRow>> {
    if seqs.is_empty() {
        return Err(MuserError::data("no sequences to export"));
    }
    let l = model.config.latent_per_element;
    let mut rows = Vec::with_capacity(seqs.len() * TokenType::ELEMENTS.len());
    let mut piece = 0;
    for chunk in seqs.chunks(16) {
        for (s, (_, z_q)) in chunk.iter().zip(model.quantize_sequences(chunk)?) {
            for eps in TokenType::ELEMENTS {
                let slice = slice_latent(&z_q, eps, l)?;
                let mut v = vec![0.0; l];
                for r in 0..slice.rows() {
                    v.iter_mut().zip(slice.row(r)).for_each(|(a, b)| *a += b);
                }
                v.iter_mut().for_each(|a| *a /= slice.rows() as f64);
                rows.push(LatentRow {
                    piece,
                    emotion: s.emotion,
                    element: eps,
                    vector: v,
                });
            }
            piece += 1;
        }
    }
    Ok(rows)
}

/// CSV with header `piece,emotion,element,z0..z{l-1}`.
pub fn write_latents_csv<W: Write>(rows: &[LatentRow], out: W) -> Result<()> {
    let l = rows.first().map_or(0, |r| r.vector.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["piece".to_string(), "emotion".into(), "element".into()];
    header.extend((0..l).map(|i| format!("z{i}")));
    let csv_err = |e: csv::Error| MuserError::data(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.piece.to_string(), r.emotion.map_or("none".into(), |e| e.to_string()), r.element.name().to_string()];
        rec.extend(r.vector.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| MuserError::data(format!("csv: {e}")))?;
    Ok(())
}

/// Projects centred points onto the two leading eigenvectors of their
/// covariance. Fewer than two dimensions are zero-padded.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n == 0 {
        return Err(MuserError::data("PCA of an empty point set"));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(MuserError::data("PCA: points differ in dimension"));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = vec![[0.0; 2]; n];
    for (k, &c) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(c);
        // Fix the sign so the projection is deterministic.
        let flip = if v.iter().find(|x| x.abs() > 1e-12).map_or(false, |x| *x < 0.0) { -1.0 } else { 1.0 };
        let proj = &x * v;
        for i in 0..n {
            out[i][k] = flip * proj[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteResult {
    pub element: TokenType,
    pub pair: (Emotion, Emotion),
    pub score: f64,
}

/// Silhouette of every element's pooled latents for each quadrant pair,
/// restricted to the pieces of those two quadrants. Pairs missing a
/// quadrant are skipped.
pub fn quadrant_silhouettes(rows: &[LatentRow]) -> Result<Vec<SilhouetteResult>> {
    let mut out = Vec::new();
    for eps in TokenType::ELEMENTS {
        for (i, &qa) in Emotion::ALL.iter().enumerate() {
            for &qb in &Emotion::ALL[i + 1..] {
                let (mut pts, mut labels) = (Vec::new(), Vec::new());
                for r in rows.iter().filter(|r| r.element == eps) {
                    if r.emotion == Some(qa) || r.emotion == Some(qb) {
                        pts.push(r.vector.clone());
                        labels.push(usize::from(r.emotion == Some(qb)));
                    }
                }
                if labels.contains(&0) && labels.contains(&1) {
                    out.push(SilhouetteResult {
                        element: eps,
                        pair: (qa, qb),
                        score: silhouette(&pts, &labels)?,
                    });
                }
            }
        }
    }
    Ok(out)
}
