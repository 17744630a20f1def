//! Datasets: MNIST IDX files, augmentation, the affine generator and
//! MultiMNIST composites.

mod affine;
mod augment;
mod idx;
mod multimnist;

pub use affine::{affine_sample, warp_canvas, AffineBounds, AffineParams, AFFINE_MAX_ATTEMPTS};
pub use augment::{pad_translate_40, place, shift_augment, shift_image, TRANSLATE_CANVAS};
pub use idx::{load_idx, load_mnist, Split};
pub(crate) use multimnist::write_atomic;
pub use multimnist::{
    composite, generate_multimnist, multimnist_count, overlap_stats, read_multimnist, write_multimnist, MultiExample,
    OverlapStats, MULTI_SHIFT, MULTI_SIDE,
};

use crate::model::TrainSample;
use crate::rng::{self, domain, RngKey};
use crate::tensor::Tensor;
use crate::Result;

/// One greyscale image with its digit label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pub height: usize,
    pub width: usize,
    /// Row-major bytes, 0 = background.
    pub pixels: Vec<u8>,
    pub label: u8,
}

impl LabeledImage {
    pub fn side(&self) -> usize {
        debug_assert_eq!(self.height, self.width);
        self.height
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        bytes_to_tensor(&self.pixels, self.height, self.width)
    }
}

/// Scales bytes to `[0, 1]`.
pub fn bytes_to_tensor(pixels: &[u8], height: usize, width: usize) -> Tensor<f32> {
    Tensor::new(vec![height, width], pixels.iter().map(|&p| f32::from(p) / 255.0).collect())
        .expect("pixel count matches dimensions")
}

/// Source of training samples for the batch loop. `sample` may draw
/// augmentation randomness from the `(key, epoch, index)` stream only, so the
/// result does not depend on which worker produces it.
pub trait TrainSet: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn input_size(&self) -> usize;
    fn sample(&self, index: usize, epoch: usize, key: &RngKey) -> Result<TrainSample<f32>>;
}

fn augment_stream(key: &RngKey, epoch: usize, index: usize, domain: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(key, domain, ((epoch as u64) << 32) | index as u64)
}

/// 28×28 digits with random integer shifts.
pub struct ShiftedMnist<'a> {
    pub images: &'a [LabeledImage],
    pub max_shift: usize,
}

impl TrainSet for ShiftedMnist<'_> {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn input_size(&self) -> usize {
        self.images.first().map_or(28, LabeledImage::side)
    }
    fn sample(&self, index: usize, epoch: usize, key: &RngKey) -> Result<TrainSample<f32>> {
        let img = &self.images[index];
        let mut r = augment_stream(key, epoch, index, domain::AUGMENT);
        let shifted = shift_augment(&img.pixels, img.side(), self.max_shift, &mut r);
        Ok(TrainSample::single(bytes_to_tensor(&shifted, img.height, img.width), usize::from(img.label)))
    }
}

/// 28×28 digits placed at a random offset on a 40×40 canvas.
pub struct Translated40<'a> {
    pub images: &'a [LabeledImage],
}

impl TrainSet for Translated40<'_> {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn input_size(&self) -> usize {
        TRANSLATE_CANVAS
    }
    fn sample(&self, index: usize, epoch: usize, key: &RngKey) -> Result<TrainSample<f32>> {
        let img = &self.images[index];
        let mut r = augment_stream(key, epoch, index, domain::TRANSLATE);
        let canvas = pad_translate_40(&img.pixels, &mut r);
        Ok(TrainSample::single(bytes_to_tensor(&canvas, TRANSLATE_CANVAS, TRANSLATE_CANVAS), usize::from(img.label)))
    }
}

/// MultiMNIST composites. Each present digit reconstructs its own shifted
/// source image, recovered from the example's provenance.
pub struct MultiSet<'a> {
    pub examples: &'a [MultiExample],
    pub base: &'a [LabeledImage],
}

impl MultiSet<'_> {
    pub fn train_sample(&self, index: usize) -> Result<TrainSample<f32>> {
        let ex = &self.examples[index];
        let (a, b) = ex.parts(self.base)?;
        let t = |p: &[u8]| bytes_to_tensor(p, MULTI_SIDE, MULTI_SIDE);
        Ok(TrainSample {
            image: t(&ex.pixels),
            targets: vec![usize::from(ex.labels.0), usize::from(ex.labels.1)],
            recon_targets: vec![(usize::from(ex.labels.0), t(&a)), (usize::from(ex.labels.1), t(&b))],
        })
    }
}

impl TrainSet for MultiSet<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }
    fn input_size(&self) -> usize {
        MULTI_SIDE
    }
    fn sample(&self, index: usize, _epoch: usize, _key: &RngKey) -> Result<TrainSample<f32>> {
        self.train_sample(index)
    }
}

/// Test digits under a fixed random affine transform each, on the 40×40
/// canvas. The transform for image `i` depends only on `key` and `i`.
pub struct AffineSet<'a> {
    pub images: &'a [LabeledImage],
    pub bounds: AffineBounds,
    pub key: RngKey,
}

impl TrainSet for AffineSet<'_> {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn input_size(&self) -> usize {
        TRANSLATE_CANVAS
    }
    fn sample(&self, index: usize, _epoch: usize, _key: &RngKey) -> Result<TrainSample<f32>> {
        let img = &self.images[index];
        let mut r = rng::stream(&self.key, domain::AFFINE, index as u64);
        let (canvas, _) = affine_sample(&img.pixels, &self.bounds, &mut r)?;
        Ok(TrainSample::single(bytes_to_tensor(&canvas, TRANSLATE_CANVAS, TRANSLATE_CANVAS), usize::from(img.label)))
    }
}
