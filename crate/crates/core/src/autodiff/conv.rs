//! Convolution kernels on `(channels, height, width)` tensors. Forward and
//! backward convolutions go through a patch matrix so the inner loops run over
//! whole output planes.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Output column range `[lo, hi)` whose input column `ox*stride + kx - padding` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.padding as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= in_w - 1
        let last = self.in_w as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(self.out_w as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }
}

/// Patch matrix `(in_channels * kh * kw, out_h * out_w)`; out-of-bounds taps stay zero.
fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let mut cols = vec![0.0; g.in_channels * g.kh * g.kw * oh * ow];
    for ci in 0..g.in_channels {
        let x_c = &x[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                let (lo, hi) = g.col_range(kx);
                let base = kx as isize - g.padding as isize;
                for oy in 0..oh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let src = &x_c[iy * iw..(iy + 1) * iw];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        dst[ox] = src[((ox * g.stride) as isize + base) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatters patch-matrix gradients back onto the input.
fn col2im(g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let mut gx = vec![0.0; g.in_channels * ih * iw];
    for ci in 0..g.in_channels {
        let gx_c = &mut gx[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                let (lo, hi) = g.col_range(kx);
                let base = kx as isize - g.padding as isize;
                for oy in 0..oh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let dst = &mut gx_c[iy * iw..(iy + 1) * iw];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        dst[((ox * g.stride) as isize + base) as usize] += src[ox];
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let cols = im2col(g, x);
    let (taps, n) = (g.in_channels * g.kh * g.kw, g.out_h * g.out_w);
    let mut out = vec![0.0; g.out_channels * n];
    for (co, out_c) in out.chunks_exact_mut(n).enumerate() {
        for (r, col) in cols.chunks_exact(n).enumerate() {
            let w = k[co * taps + r];
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out_c.iter_mut().zip(col) {
                *o += w * v;
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(g, x);
    let (taps, n) = (g.in_channels * g.kh * g.kw, g.out_h * g.out_w);
    let mut gk = vec![0.0; k.len()];
    let mut gcols = vec![0.0; cols.len()];
    for (co, go_c) in grad_out.chunks_exact(n).enumerate() {
        for (r, (col, gcol)) in cols.chunks_exact(n).zip(gcols.chunks_exact_mut(n)).enumerate() {
            gk[co * taps + r] = go_c.iter().zip(col).map(|(a, b)| a * b).sum();
            let w = k[co * taps + r];
            for (gc, &go) in gcol.iter_mut().zip(go_c) {
                *gc += w * go;
            }
        }
    }
    (col2im(g, &gcols), gk)
}

/// Transposed convolution. Kernel layout is `(in_channels, out_channels, kh, kw)`;
/// `padding` is unused and `out_h = (in_h - 1) * stride + max(kh, stride)`.
pub(crate) fn deconv2d_forward(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.out_channels * g.out_h * g.out_w];
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    for ci in 0..g.in_channels {
        let x_c = &x[ci * ih * iw..(ci + 1) * ih * iw];
        for co in 0..g.out_channels {
            let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let w = k[((ci * g.out_channels + co) * g.kh + ky) * g.kw + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for iy in 0..ih {
                        let oy = iy * g.stride + ky;
                        let row_out = &mut out_c[oy * ow..(oy + 1) * ow];
                        let row_in = &x_c[iy * iw..(iy + 1) * iw];
                        for (ix, &v) in row_in.iter().enumerate() {
                            row_out[ix * g.stride + kx] += w * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn deconv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    for ci in 0..g.in_channels {
        let x_c = &x[ci * ih * iw..(ci + 1) * ih * iw];
        let gx_c = &mut gx[ci * ih * iw..(ci + 1) * ih * iw];
        for co in 0..g.out_channels {
            let go_c = &grad_out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kidx = ((ci * g.out_channels + co) * g.kh + ky) * g.kw + kx;
                    let w = k[kidx];
                    let mut acc = 0.0;
                    for iy in 0..ih {
                        let oy = iy * g.stride + ky;
                        let go_row = &go_c[oy * ow..(oy + 1) * ow];
                        let x_row = &x_c[iy * iw..(iy + 1) * iw];
                        let gx_row = &mut gx_c[iy * iw..(iy + 1) * iw];
                        for ix in 0..iw {
                            let go = go_row[ix * g.stride + kx];
                            acc += go * x_row[ix];
                            gx_row[ix] += w * go;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (gx, gk)
}
