//! Objective metrics, latent-space analysis and token distributions.

pub mod distribution;
pub mod latents;
pub mod metrics;
pub mod silhouette;

pub use distribution::{element_distribution, histogram_emd, value_histogram, write_distribution_csv, HistogramRow};
pub use latents::{export_latents, pca_2d, quadrant_silhouettes, write_latents_csv, LatentRow, SilhouetteResult};
pub use metrics::{bar_level, n_pitch_classes, pitch_range, polyphony, MeanStd, MetricsReport, PieceMetrics};
pub use silhouette::{silhouette, silhouette_samples};

use crate::error::{MuserError, Result};

/// Worker pool sized by `MUSER_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("MUSER_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| MuserError::config(format!("MUSER_THREADS={v} is not a positive integer")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MuserError::config(format!("thread pool: {e}")))
}
