//! Frozen-feature evaluation: multi-crop extraction, retrieval, 1-NN,
//! linear probing, transform-matching diagnostics and plots.

mod bank;
mod diagnostic;
mod metrics;
mod probe;
pub mod plots;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

pub use bank::{
    embed_clips, embed_videos, extract_features, spatial_crops, temporal_crops, CropConfig, FeatureBank,
    Standardization,
};
pub use diagnostic::{equivariance_diagnostic, plan_probes, random_baseline, DiagnosticReport};
pub use metrics::{nn_classify, ranked_neighbors, retrieval_recall, Neighbors};
pub use probe::{fit_probe, linear_probe, LinearClassifier, ProbeConfig};

use crate::error::Result;

/// Appends one JSON record per line.
pub fn append_record<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}
