use std::path::Path;

use super::LabeledImage;
use crate::{CapsError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CapsError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CapsError::format(path, format!("truncated header at byte {at}")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(CapsError::WrongMagic { path: path.to_path_buf(), expected, found });
    }
    Ok(())
}

/// Parses an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledImage>> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    check_magic(&images, IMAGES_MAGIC, images_path)?;
    check_magic(&labels, LABELS_MAGIC, labels_path)?;

    let count = be_u32(&images, 4, images_path)? as usize;
    let height = be_u32(&images, 8, images_path)? as usize;
    let width = be_u32(&images, 12, images_path)? as usize;
    let label_count = be_u32(&labels, 4, labels_path)? as usize;
    if count != label_count {
        return Err(CapsError::format(
            images_path,
            format!("{count} images but {label_count} labels in {}", labels_path.display()),
        ));
    }

    let px = height * width;
    let need = 16 + count * px;
    if images.len() < need {
        return Err(CapsError::format(
            images_path,
            format!("truncated: {} bytes, header promises {need}", images.len()),
        ));
    }
    if labels.len() < 8 + count {
        return Err(CapsError::format(
            labels_path,
            format!("truncated: {} bytes, header promises {}", labels.len(), 8 + count),
        ));
    }

    images[16..need]
        .chunks_exact(px.max(1))
        .zip(&labels[8..8 + count])
        .enumerate()
        .map(|(i, (pixels, &label))| {
            if label > 9 {
                return Err(CapsError::format(labels_path, format!("label {label} at index {i} is not a digit")));
            }
            Ok(LabeledImage { height, width, pixels: pixels.to_vec(), label })
        })
        .collect()
}

/// Loads `train-*` or `t10k-*` from a directory with the standard MNIST
/// file names (uncompressed).
pub fn load_mnist(dir: &Path, split: Split) -> Result<Vec<LabeledImage>> {
    let p = split.prefix();
    load_idx(&dir.join(format!("{p}-images-idx3-ubyte")), &dir.join(format!("{p}-labels-idx1-ubyte")))
}
