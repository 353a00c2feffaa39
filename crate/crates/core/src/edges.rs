//! Fixed image filters shared by the reference sketcher and the geometric encoder.

use crate::autodiff::Tensor;

/// Average over the colour axis of an `(H, W, 3)` image, giving an `H*W` row-major plane.
pub fn luminance(image: &Tensor) -> (usize, usize, Vec<f64>) {
    let s = image.shape();
    let (h, w, c) = match s {
        [h, w, c] => (*h, *w, *c),
        [h, w] => (*h, *w, 1),
        _ => panic!("luminance expects (H, W, C) or (H, W), got {s:?}"),
    };
    let d = image.data();
    let plane = (0..h * w)
        .map(|i| d[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
        .collect();
    (h, w, plane)
}

#[inline]
fn at(plane: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    let r = r.clamp(0, h as isize - 1) as usize;
    let c = c.clamp(0, w as isize - 1) as usize;
    plane[r * w + c]
}

/// The four 3×3 directional responses: horizontal, vertical, and both diagonals.
/// Borders replicate the nearest pixel.
pub fn directional_gradients(plane: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut gd = vec![0.0; h * w];
    let mut ga = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let p = |dr: isize, dc: isize| at(plane, h, w, r + dr, c + dc);
            let i = r as usize * w + c as usize;
            gx[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gy[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gd[i] = (p(0, 1) + 2.0 * p(1, 1) + p(1, 0)) - (p(-1, 0) + 2.0 * p(-1, -1) + p(0, -1));
            ga[i] = (p(0, -1) + 2.0 * p(1, -1) + p(1, 0)) - (p(-1, 0) + 2.0 * p(-1, 1) + p(0, 1));
        }
    }
    [gx, gy, gd, ga]
}

/// Sobel gradient magnitude.
pub fn gradient_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let [gx, gy, _, _] = directional_gradients(plane, h, w);
    gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect()
}

/// Box downsampling by an integer factor; `h` and `w` must be divisible by it.
pub fn downsample(plane: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow];
    let inv = 1.0 / (factor * factor) as f64;
    for r in 0..oh * factor {
        for c in 0..ow * factor {
            out[(r / factor) * ow + c / factor] += plane[r * w + c] * inv;
        }
    }
    out
}
