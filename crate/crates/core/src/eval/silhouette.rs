//! Silhouette coefficient with Euclidean distance.
//!
//! For point `i` in cluster `A`: `a` is the mean distance to the other points
//! of `A`, `b` the smallest mean distance to another cluster, and
//! `s = (b − a) / max(a, b)`. Points in singleton clusters score 0.

use std::collections::BTreeMap;

use crate::error::{MuserError, Result};

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Per-point silhouette values.
pub fn silhouette_samples(points: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if points.len() != labels.len() {
        return Err(MuserError::data("silhouette: points and labels differ in length"));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(MuserError::data("silhouette needs at least two clusters"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(MuserError::data("silhouette: points differ in dimension"));
    }
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let own = &members[&labels[i]];
        if own.len() == 1 {
            out.push(0.0);
            continue;
        }
        let mean_to = |idx: &[usize]| idx.iter().filter(|&&j| j != i).map(|&j| euclidean(p, &points[j])).sum::<f64>();
        let a = mean_to(own) / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, idx)| mean_to(idx) / idx.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        out.push(if denom > 0.0 { (b - a) / denom } else { 0.0 });
    }
    Ok(out)
}

/// Mean silhouette over all points, in `[-1, 1]`.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let s = silhouette_samples(points, labels)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dimensional_hand_case() {
        let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
        let s = silhouette_samples(&pts, &[0, 0, 1]).unwrap();
        assert!((s[0] - 0.9).abs() < 1e-12);
        assert!((s[1] - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(s[2], 0.0);
        assert!((silhouette(&pts, &[0, 0, 1]).unwrap() - 0.5963).abs() < 1e-4);
    }

    #[test]
    fn separated_clusters_approach_one() {
        let mut last = -1.0;
        for sep in [1.0, 10.0, 100.0, 1000.0] {
            let pts = vec![vec![0.0], vec![0.5], vec![sep], vec![sep + 0.5]];
            let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
            assert!(s > last);
            last = s;
        }
        assert!(last > 0.999);
    }

    #[test]
    fn single_cluster_is_an_error() {
        assert!(silhouette(&[vec![0.0], vec![1.0]], &[3, 3]).is_err());
    }

    proptest! {
        #[test]
        fn invariant_under_translation_and_scale(
            pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..12),
            shift in -10.0f64..10.0,
            scale in 0.1f64..10.0,
        ) {
            let labels: Vec<usize> = (0..pts.len()).map(|i| i % 3).collect();
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|x| x * scale + shift).collect()).collect();
            let a = silhouette(&pts, &labels).unwrap();
            let b = silhouette(&moved, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
