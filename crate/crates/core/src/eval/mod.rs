//! Metrics and the diagnostic experiments.

mod diagnostics;
mod perturb;
mod report;
mod segment;

pub use diagnostics::{routing_diagnostics, RoutingDiagnostics};
pub use perturb::{perturb_dimensions, perturbation_offsets, PerturbationGrid, PERTURB_STEPS};
pub use report::{evaluate, EvalMode, EvalReport, PlainImages, Prediction, Predictor};
pub use segment::{segment, Assignment, SegmentationResult, SEGMENT_THRESHOLD};

use std::path::Path;

use crate::data::write_atomic;
use crate::tensor::Real;
use crate::{CapsError, Result};

/// Index of the longest capsule; ties go to the lower index.
pub fn classify<T: Real>(lengths: &[T]) -> usize {
    let mut best = 0;
    for (i, &l) in lengths.iter().enumerate().skip(1) {
        if l > lengths[best] {
            best = i;
        }
    }
    best
}

/// The two longest capsules as `(lower index, higher index)`. Ties go to the
/// lower index.
pub fn classify_top2<T: Real>(lengths: &[T]) -> (usize, usize) {
    assert!(lengths.len() >= 2, "need at least two capsules");
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    // Stable sort keeps lower indices first among equal lengths.
    idx.sort_by(|&a, &b| lengths[b].partial_cmp(&lengths[a]).unwrap_or(std::cmp::Ordering::Equal));
    (idx[0].min(idx[1]), idx[0].max(idx[1]))
}

/// Set equality of two unordered pairs.
pub fn pair_matches(predicted: (usize, usize), labels: (usize, usize)) -> bool {
    predicted == labels || predicted == (labels.1, labels.0)
}

/// Writes an 8-bit greyscale PNG atomically. `pixels` are in `[0, 1]`.
pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CapsError::InvalidArgument(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let bytes: Vec<u8> = pixels.iter().map(|&p| to_byte(p)).collect();
    let mut out = std::io::Cursor::new(Vec::new());
    image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer size checked")
        .write_to(&mut out, image::ImageFormat::Png)?;
    write_atomic(path, out.get_ref())
}

/// Writes a text file atomically.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub(crate) fn to_byte(p: f32) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}
