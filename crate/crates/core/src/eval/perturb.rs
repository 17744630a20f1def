use std::fmt::Write as _;
use std::path::Path;

use super::{write_png, write_text};
use crate::model::{CapsNet, Decode};
use crate::tensor::Tensor;
use crate::{CapsError, Result};

/// Offsets per dimension: -0.25 to 0.25 in steps of 0.05.
pub const PERTURB_STEPS: usize = 11;

/// `(k - 5) * 0.05`; the middle entry is exactly zero.
pub fn perturbation_offsets() -> [f32; PERTURB_STEPS] {
    std::array::from_fn(|k| (k as f32 - 5.0) * 0.05)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationGrid {
    pub class: usize,
    /// Unperturbed activity vector of `class`.
    pub base: Vec<f32>,
    pub offsets: [f32; PERTURB_STEPS],
    /// Decode of the unperturbed vector.
    pub baseline: Tensor<f32>,
    /// `tiles[d][k]`: decode with `offsets[k]` added to dimension `d`.
    pub tiles: Vec<Vec<Tensor<f32>>>,
    pub side: usize,
}

/// Decodes the `class` capsule's activity vector with each dimension nudged
/// by each offset. The vector is fed to the decoder as-is, without squashing.
pub fn perturb_dimensions(model: &CapsNet<f32>, image: &Tensor<f32>, class: usize) -> Result<PerturbationGrid> {
    let cfg = model.config();
    if class >= cfg.num_classes {
        return Err(CapsError::InvalidArgument(format!("class {class} out of range")));
    }
    let fwd = model.forward(image, Decode::None)?;
    let d = cfg.digit_dim;
    let base = fwd.v.data()[class * d..(class + 1) * d].to_vec();
    let baseline = model.decode_activity(class, &base)?;
    let offsets = perturbation_offsets();
    let tiles = (0..d)
        .map(|dim| {
            offsets
                .iter()
                .map(|&off| {
                    let mut a = base.clone();
                    a[dim] += off;
                    model.decode_activity(class, &a)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationGrid { class, base, offsets, baseline, tiles, side: cfg.input_size })
}

impl PerturbationGrid {
    pub fn rows(&self) -> usize {
        self.tiles.len()
    }

    /// Tiles laid out as `rows × 11`, row-major pixels in `[0, 1]`.
    pub fn mosaic(&self) -> (usize, usize, Vec<f32>) {
        let s = self.side;
        let (w, h) = (PERTURB_STEPS * s, self.rows() * s);
        let mut px = vec![0.0f32; w * h];
        for (r, row) in self.tiles.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                for y in 0..s {
                    let dst = (r * s + y) * w + c * s;
                    px[dst..dst + s].copy_from_slice(&tile.data()[y * s..(y + 1) * s]);
                }
            }
        }
        (w, h, px)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (w, h, px) = self.mosaic();
        write_png(path, w, h, &px)
    }

    /// One row per tile: dimension, offset, perturbed value, mean intensity.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dimension,offset,value,mean_intensity\n");
        for (d, row) in self.tiles.iter().enumerate() {
            for (k, tile) in row.iter().enumerate() {
                let mean = tile.data().iter().map(|&p| f64::from(p)).sum::<f64>() / tile.len() as f64;
                let _ = writeln!(s, "{d},{},{},{mean}", self.offsets[k], self.base[d] + self.offsets[k]);
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}
