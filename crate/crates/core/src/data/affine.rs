use rand::Rng;

use super::augment::{place, TRANSLATE_CANVAS};
use crate::{CapsError, Result};

/// Resampling attempts before giving up on a transform that leaves the canvas.
pub const AFFINE_MAX_ATTEMPTS: usize = 10;

/// `p = A (q - c) + c + t` on canvas pixel coordinates, where `c` is the canvas
/// centre and `q` is a position in the digit centred on the canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    /// Row-major 2×2 map acting on `(x, y)`.
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineParams {
    pub const IDENTITY: Self = Self { linear: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { translation: [dx, dy], ..Self::IDENTITY }
    }

    /// Positive angles turn +x towards +y (down the rows).
    pub fn rotation(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self { linear: [[c, -s], [s, c]], translation: [0.0, 0.0] }
    }

    pub fn determinant(&self) -> f64 {
        let a = self.linear;
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
    }

    fn inverse_linear(&self) -> Result<[[f64; 2]; 2]> {
        let d = self.determinant();
        if !(d > 0.0) {
            return Err(CapsError::InvalidArgument(format!(
                "affine map must preserve orientation, determinant is {d}"
            )));
        }
        let a = self.linear;
        Ok([[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]])
    }

    fn map_point(&self, centre: f64, x: f64, y: f64) -> (f64, f64) {
        let a = self.linear;
        let (qx, qy) = (x - centre, y - centre);
        (
            a[0][0] * qx + a[0][1] * qy + centre + self.translation[0],
            a[1][0] * qx + a[1][1] * qy + centre + self.translation[1],
        )
    }

    /// Places a 28×28 digit at the centre of the 40×40 canvas and warps it.
    /// Errors if any on-pixel would land outside the canvas.
    pub fn apply(&self, pixels: &[u8]) -> Result<Vec<u8>> {
        let offset = ((TRANSLATE_CANVAS - 28) / 2) as i32;
        let canvas = place(pixels, 28, TRANSLATE_CANVAS, offset, offset);
        if !self.contains(&canvas, TRANSLATE_CANVAS) {
            return Err(CapsError::InvalidArgument("affine transform moves the digit outside the canvas".into()));
        }
        warp_canvas(&canvas, TRANSLATE_CANVAS, self)
    }

    fn contains(&self, canvas: &[u8], side: usize) -> bool {
        let Some((x0, y0, x1, y1)) = bounding_box(canvas, side) else {
            return true;
        };
        let c = (side as f64 - 1.0) / 2.0;
        let hi = side as f64 - 0.5;
        [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].iter().all(|&(x, y)| {
            let (px, py) = self.map_point(c, x, y);
            (-0.5..=hi).contains(&px) && (-0.5..=hi).contains(&py)
        })
    }
}

/// Pixel-edge bounding box of the non-zero pixels.
fn bounding_box(canvas: &[u8], side: usize) -> Option<(f64, f64, f64, f64)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in canvas.iter().enumerate().filter(|(_, &p)| p != 0) {
        let (x, y) = (i % side, i / side);
        b = Some(match b {
            None => (x, y, x, y),
            Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)),
        });
    }
    b.map(|(x0, y0, x1, y1)| (x0 as f64 - 0.5, y0 as f64 - 0.5, x1 as f64 + 0.5, y1 as f64 + 0.5))
}

/// Inverse-mapped bilinear resampling of a square canvas. Samples outside the
/// source read as zero; output bytes are rounded and clamped.
pub fn warp_canvas(canvas: &[u8], side: usize, params: &AffineParams) -> Result<Vec<u8>> {
    let inv = params.inverse_linear()?;
    let c = (side as f64 - 1.0) / 2.0;
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= side as i64 || y >= side as i64 {
            0.0
        } else {
            f64::from(canvas[y as usize * side + x as usize])
        }
    };
    let mut out = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            let px = x as f64 - c - params.translation[0];
            let py = y as f64 - c - params.translation[1];
            let sx = inv[0][0] * px + inv[0][1] * py + c;
            let sy = inv[1][0] * px + inv[1][1] * py + c;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (wx, wy) = (sx - fx, sy - fy);
            let (ix, iy) = (fx as i64, fy as i64);
            let v = (1.0 - wy) * ((1.0 - wx) * at(ix, iy) + wx * at(ix + 1, iy))
                + wy * ((1.0 - wx) * at(ix, iy + 1) + wx * at(ix + 1, iy + 1));
            out[y * side + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Sampling ranges for small random affine transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineBounds {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_shear: f64,
}

impl Default for AffineBounds {
    fn default() -> Self {
        Self { max_rotation_deg: 20.0, scale: (0.8, 1.2), max_shear: 0.2 }
    }
}

/// Draws rotation, scale and shear from `bounds`, then a translation uniform
/// over the range that keeps the digit on the 40×40 canvas.
pub fn affine_sample(pixels: &[u8], bounds: &AffineBounds, rng: &mut impl Rng) -> Result<(Vec<u8>, AffineParams)> {
    let offset = ((TRANSLATE_CANVAS - 28) / 2) as i32;
    let canvas = place(pixels, 28, TRANSLATE_CANVAS, offset, offset);
    let side = TRANSLATE_CANVAS as f64;
    let c = (side - 1.0) / 2.0;
    let sym = |r: &mut dyn rand::RngCore, m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
    for _ in 0..AFFINE_MAX_ATTEMPTS {
        let theta = sym(rng, bounds.max_rotation_deg).to_radians();
        let s = if bounds.scale.0 < bounds.scale.1 {
            rng.random_range(bounds.scale.0..=bounds.scale.1)
        } else {
            bounds.scale.0
        };
        let k = sym(rng, bounds.max_shear);
        let (sn, cs) = theta.sin_cos();
        // R(theta) * s * [[1, k], [0, 1]]
        let linear = [[cs * s, (cs * k - sn) * s], [sn * s, (sn * k + cs) * s]];
        let mut params = AffineParams { linear, translation: [0.0, 0.0] };
        let Some((x0, y0, x1, y1)) = bounding_box(&canvas, TRANSLATE_CANVAS) else {
            return Ok((canvas, AffineParams::IDENTITY));
        };
        let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].map(|(x, y)| params.map_point(c, x, y));
        let min = |f: fn(&(f64, f64)) -> f64| corners.iter().map(f).fold(f64::INFINITY, f64::min);
        let max = |f: fn(&(f64, f64)) -> f64| corners.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let tx = (-0.5 - min(|p| p.0), side - 0.5 - max(|p| p.0));
        let ty = (-0.5 - min(|p| p.1), side - 0.5 - max(|p| p.1));
        if tx.0 > tx.1 || ty.0 > ty.1 {
            continue;
        }
        params.translation = [
            if tx.0 < tx.1 { rng.random_range(tx.0..=tx.1) } else { tx.0 },
            if ty.0 < ty.1 { rng.random_range(ty.0..=ty.1) } else { ty.0 },
        ];
        return Ok((warp_canvas(&canvas, TRANSLATE_CANVAS, &params)?, params));
    }
    Err(CapsError::InvalidArgument(format!(
        "no affine sample kept the digit on the canvas in {AFFINE_MAX_ATTEMPTS} attempts"
    )))
}
