use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::augment::place;
use super::LabeledImage;
use crate::rng::{self, domain};
use crate::{CapsError, Result};

pub const MULTI_SIDE: usize = 36;
/// Maximum shift of each digit in each direction.
pub const MULTI_SHIFT: i8 = 4;

const MAGIC: &[u8; 4] = b"MMN1";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 2;
const RECORD: usize = 2 + 8 + 4 + MULTI_SIDE * MULTI_SIDE;

/// Two overlapping digits of different classes on a 36×36 canvas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiExample {
    pub pixels: Vec<u8>,
    pub labels: (u8, u8),
    /// Indices of the source digits in the base split.
    pub sources: (u32, u32),
    /// `(dx, dy)` of each source digit.
    pub shifts: [(i8, i8); 2],
}

impl MultiExample {
    /// The two shifted source digits, each alone on a 36×36 canvas.
    pub fn parts(&self, base: &[LabeledImage]) -> Result<(Vec<u8>, Vec<u8>)> {
        let get = |idx: u32, label: u8| -> Result<&LabeledImage> {
            let img = base.get(idx as usize).ok_or_else(|| {
                CapsError::InvalidArgument(format!("source index {idx} outside base set of {}", base.len()))
            })?;
            if img.label != label || img.side() != 28 {
                return Err(CapsError::InvalidArgument(format!(
                    "source {idx} does not match the recorded label {label}"
                )));
            }
            Ok(img)
        };
        let a = get(self.sources.0, self.labels.0)?;
        let b = get(self.sources.1, self.labels.1)?;
        Ok((shifted_on_canvas(&a.pixels, self.shifts[0]), shifted_on_canvas(&b.pixels, self.shifts[1])))
    }
}

fn shifted_on_canvas(pixels: &[u8], (dx, dy): (i8, i8)) -> Vec<u8> {
    let o = i32::from(MULTI_SHIFT);
    place(pixels, 28, MULTI_SIDE, o + i32::from(dx), o + i32::from(dy))
}

/// Pixel-wise `min(255, a + b)` of two shifted 28×28 digits.
pub fn composite(a: &[u8], b: &[u8], shift_a: (i8, i8), shift_b: (i8, i8)) -> Vec<u8> {
    shifted_on_canvas(a, shift_a).iter().zip(shifted_on_canvas(b, shift_b)).map(|(&x, y)| x.saturating_add(y)).collect()
}

/// Number of composites generated from `base_len` digits.
pub fn multimnist_count(base_len: u64, per_digit: u64) -> u64 {
    base_len * per_digit
}

/// For every base digit, `per_digit` composites with a partner drawn
/// uniformly from the other-class digits of the same split. Each base index
/// draws from its own random stream, so the output does not depend on the
/// number of worker threads.
pub fn generate_multimnist(base: &[LabeledImage], per_digit: usize, seed: u64) -> Result<Vec<MultiExample>> {
    if per_digit == 0 {
        return Err(CapsError::InvalidArgument("per_digit must be at least 1".into()));
    }
    if let Some(bad) = base.iter().position(|im| im.side() != 28 || im.width != 28) {
        return Err(CapsError::InvalidArgument(format!("base image {bad} is not 28x28")));
    }
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); 10];
    for (i, im) in base.iter().enumerate() {
        by_class[usize::from(im.label)].push(i as u32);
    }
    if by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
        return Err(CapsError::InvalidArgument("base set needs digits from at least two classes".into()));
    }
    let key = rng::key_from_seed(seed);
    let n = base.len();
    let per_base: Vec<Vec<MultiExample>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(&key, domain::MULTIMNIST, i as u64);
            let a = &base[i];
            let own = usize::from(a.label);
            let others = n - by_class[own].len();
            (0..per_digit)
                .map(|_| {
                    let mut pick = r.random_range(0..others);
                    let mut partner = 0u32;
                    for (c, members) in by_class.iter().enumerate() {
                        if c == own {
                            continue;
                        }
                        if pick < members.len() {
                            partner = members[pick];
                            break;
                        }
                        pick -= members.len();
                    }
                    let mut shift =
                        || (r.random_range(-MULTI_SHIFT..=MULTI_SHIFT), r.random_range(-MULTI_SHIFT..=MULTI_SHIFT));
                    let shifts = [shift(), shift()];
                    let b = &base[partner as usize];
                    MultiExample {
                        pixels: composite(&a.pixels, &b.pixels, shifts[0], shifts[1]),
                        labels: (a.label, b.label),
                        sources: (i as u32, partner),
                        shifts,
                    }
                })
                .collect()
        })
        .collect();
    Ok(per_base.into_iter().flatten().collect())
}

/// Mean bounding-box overlap of the two digits in each composite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapStats {
    /// Intersection area over each digit's own box area, averaged over both
    /// digits and all examples.
    pub intersection_over_area: f64,
    /// Intersection over union.
    pub iou: f64,
}

fn bbox(pixels: &[u8]) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in pixels.iter().enumerate().filter(|(_, &p)| p != 0) {
        let (x, y) = (i % MULTI_SIDE, i / MULTI_SIDE);
        b = Some(match b {
            None => (x, y, x + 1, y + 1),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
        });
    }
    b
}

pub fn overlap_stats(examples: &[MultiExample], base: &[LabeledImage]) -> Result<OverlapStats> {
    let mut ioa = 0.0;
    let mut iou = 0.0;
    let mut n = 0usize;
    for ex in examples {
        let (a, b) = ex.parts(base)?;
        let (Some(ba), Some(bb)) = (bbox(&a), bbox(&b)) else {
            continue;
        };
        let area = |b: (usize, usize, usize, usize)| ((b.2 - b.0) * (b.3 - b.1)) as f64;
        let iw = ba.2.min(bb.2).saturating_sub(ba.0.max(bb.0));
        let ih = ba.3.min(bb.3).saturating_sub(ba.1.max(bb.1));
        let inter = (iw * ih) as f64;
        ioa += 0.5 * (inter / area(ba) + inter / area(bb));
        iou += inter / (area(ba) + area(bb) - inter);
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok(OverlapStats { intersection_over_area: ioa / n, iou: iou / n })
}

/// Writes the examples atomically (temp file in the same directory, then rename).
pub fn write_multimnist(examples: &[MultiExample], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER + examples.len() * RECORD);
    buf.extend_from_slice(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    buf.extend((examples.len() as u64).to_le_bytes());
    buf.extend([MULTI_SIDE as u8, MULTI_SIDE as u8]);
    for ex in examples {
        if ex.pixels.len() != MULTI_SIDE * MULTI_SIDE {
            return Err(CapsError::InvalidArgument(format!(
                "composite has {} pixels, expected {}",
                ex.pixels.len(),
                MULTI_SIDE * MULTI_SIDE
            )));
        }
        buf.extend([ex.labels.0, ex.labels.1]);
        buf.extend(ex.sources.0.to_le_bytes());
        buf.extend(ex.sources.1.to_le_bytes());
        for (dx, dy) in ex.shifts {
            buf.extend([dx as u8, dy as u8]);
        }
        buf.extend_from_slice(&ex.pixels);
    }
    write_atomic(path, &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CapsError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CapsError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CapsError::io(path, e))?;
    tmp.persist(path).map_err(|e| CapsError::io(path, e.error))?;
    Ok(())
}

/// Reads a file written by [`write_multimnist`]. The whole file is validated
/// before any example is returned.
pub fn read_multimnist(path: &Path) -> Result<Vec<MultiExample>> {
    let bytes = std::fs::read(path).map_err(|e| CapsError::io(path, e))?;
    if bytes.len() < HEADER {
        return Err(CapsError::format(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CapsError::format(path, "not a MultiMNIST file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CapsError::format(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if (bytes[16], bytes[17]) != (MULTI_SIDE as u8, MULTI_SIDE as u8) {
        return Err(CapsError::format(path, format!("image size {}x{}, expected 36x36", bytes[16], bytes[17])));
    }
    let body = (bytes.len() - HEADER) as u64;
    if count.checked_mul(RECORD as u64) != Some(body) {
        return Err(CapsError::format(
            path,
            format!("count field says {count} records but the body holds {body} bytes ({RECORD} per record)"),
        ));
    }
    Ok(bytes[HEADER..]
        .chunks_exact(RECORD)
        .map(|r| {
            let u32_at = |i: usize| u32::from_le_bytes(r[i..i + 4].try_into().expect("4 bytes"));
            MultiExample {
                labels: (r[0], r[1]),
                sources: (u32_at(2), u32_at(6)),
                shifts: [(r[10] as i8, r[11] as i8), (r[12] as i8, r[13] as i8)],
                pixels: r[14..].to_vec(),
            }
        })
        .collect())
}
