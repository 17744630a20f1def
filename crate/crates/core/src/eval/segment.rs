use std::path::Path;

use super::{classify_top2, to_byte};
use crate::data::write_atomic;
use crate::model::{CapsNet, Decode};
use crate::tensor::Tensor;
use crate::{CapsError, Result};

/// Reconstruction intensity at or above which a pixel belongs to a digit
/// (one grey level).
pub const SEGMENT_THRESHOLD: f32 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub first: bool,
    pub second: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub composite: Tensor<f32>,
    /// Top-2 classes, lower index first.
    pub classes: (usize, usize),
    pub reconstructions: [Tensor<f32>; 2],
    /// One entry per pixel; both flags may be set.
    pub assignment: Vec<Assignment>,
    pub side: usize,
}

/// Decodes the two most active capsules one at a time and assigns every
/// pixel bright in a reconstruction to that digit.
pub fn segment(model: &CapsNet<f32>, composite: &Tensor<f32>) -> Result<SegmentationResult> {
    let fwd = model.forward(composite, Decode::None)?;
    let classes = classify_top2(fwd.lengths.data());
    let a = model.mask_and_decode(&fwd.v, classes.0)?;
    let b = model.mask_and_decode(&fwd.v, classes.1)?;
    SegmentationResult::from_reconstructions(composite.clone(), classes, [a, b], model.config().input_size)
}

impl SegmentationResult {
    pub fn from_reconstructions(
        composite: Tensor<f32>,
        classes: (usize, usize),
        reconstructions: [Tensor<f32>; 2],
        side: usize,
    ) -> Result<Self> {
        if reconstructions.iter().any(|r| r.len() != side * side) || composite.len() != side * side {
            return Err(CapsError::InvalidArgument(format!("segmentation inputs must all be {side}x{side}")));
        }
        let on = |t: &Tensor<f32>, i: usize| t.data()[i] >= SEGMENT_THRESHOLD;
        let assignment = (0..side * side)
            .map(|i| Assignment { first: on(&reconstructions[0], i), second: on(&reconstructions[1], i) })
            .collect();
        Ok(Self { composite, classes, reconstructions, assignment, side })
    }

    /// Side-by-side panels: composite, first and second reconstruction, and
    /// the assignment map (red = first, green = second, yellow = both).
    pub fn to_rgb(&self) -> image::RgbImage {
        let s = self.side as u32;
        let mut img = image::RgbImage::new(4 * s, s);
        for y in 0..s {
            for x in 0..s {
                let i = (y * s + x) as usize;
                let grey = |t: &Tensor<f32>| {
                    let v = to_byte(t.data()[i]);
                    image::Rgb([v, v, v])
                };
                img.put_pixel(x, y, grey(&self.composite));
                img.put_pixel(s + x, y, grey(&self.reconstructions[0]));
                img.put_pixel(2 * s + x, y, grey(&self.reconstructions[1]));
                let a = self.assignment[i];
                img.put_pixel(
                    3 * s + x,
                    y,
                    image::Rgb([if a.first { 255 } else { 0 }, if a.second { 255 } else { 0 }, 0]),
                );
            }
        }
        img
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb().write_to(&mut out, image::ImageFormat::Png)?;
        write_atomic(path, out.get_ref())
    }
}
