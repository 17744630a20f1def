use rand::Rng;

/// Side of the padded translation canvas.
pub const TRANSLATE_CANVAS: usize = 40;

/// Moves a square image by `(dx, dy)` pixels (x = column, y = row). Vacated
/// cells become zero and pixels shifted past the border are dropped.
pub fn shift_image(pixels: &[u8], side: usize, dx: i32, dy: i32) -> Vec<u8> {
    let mut out = vec![0u8; pixels.len()];
    let s = side as i32;
    for y in 0..s {
        let sy = y - dy;
        if !(0..s).contains(&sy) {
            continue;
        }
        for x in 0..s {
            let sx = x - dx;
            if (0..s).contains(&sx) {
                out[(y * s + x) as usize] = pixels[(sy * s + sx) as usize];
            }
        }
    }
    out
}

/// Random shift with `(dx, dy)` uniform on `[-max_shift, max_shift]²`.
pub fn shift_augment(pixels: &[u8], side: usize, max_shift: usize, rng: &mut impl Rng) -> Vec<u8> {
    if max_shift == 0 {
        return pixels.to_vec();
    }
    let m = max_shift as i32;
    let dx = rng.random_range(-m..=m);
    let dy = rng.random_range(-m..=m);
    shift_image(pixels, side, dx, dy)
}

/// Copies a `src_side`-square image into a zero `canvas`-square image with its
/// top-left corner at `(ox, oy)`. Parts outside the canvas are dropped.
pub fn place(pixels: &[u8], src_side: usize, canvas: usize, ox: i32, oy: i32) -> Vec<u8> {
    let mut out = vec![0u8; canvas * canvas];
    let c = canvas as i32;
    for y in 0..src_side as i32 {
        let ty = y + oy;
        if !(0..c).contains(&ty) {
            continue;
        }
        for x in 0..src_side as i32 {
            let tx = x + ox;
            if (0..c).contains(&tx) {
                out[(ty * c + tx) as usize] = pixels[y as usize * src_side + x as usize];
            }
        }
    }
    out
}

/// Places a 28×28 digit at a uniform offset in `[0, 12]²` on a 40×40 canvas.
pub fn pad_translate_40(pixels: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    let span = (TRANSLATE_CANVAS - 28) as i32;
    let ox = rng.random_range(0..=span);
    let oy = rng.random_range(0..=span);
    place(pixels, 28, TRANSLATE_CANVAS, ox, oy)
}
