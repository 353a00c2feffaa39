//! Sketch canvases and the sparse pixel wire format.
//!
//! Pixel convention: 0 is black (activated), 1 is white (blank).

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sketch {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Sketch {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "sketch {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("sketch values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Accepts a `(H, W)` or `(1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Dimension(format!("sketch tensor of shape {s:?}"))),
        };
        Self::new(h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width], self.data.clone())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Row-major indices of pixels darker than white.
    pub fn activated(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn activated_count(&self) -> usize {
        self.data.iter().filter(|&&v| v < 1.0).count()
    }

    pub fn to_sparse(&self) -> SparseSketch {
        SparseSketch::from_sketch(self)
    }
}

/// Accumulates per-round sketches by taking the darkest value at every pixel.
pub fn overlay_sketches(sketches: &[Sketch]) -> Result<Sketch> {
    let Some(first) = sketches.first() else {
        return Err(Error::Contract("overlay of zero sketches".into()));
    };
    let mut out = first.clone();
    for s in &sketches[1..] {
        if s.height != out.height || s.width != out.width {
            return Err(Error::Dimension(format!(
                "overlay of {}x{} onto {}x{}",
                s.height, s.width, out.height, out.width
            )));
        }
        for (o, &v) in out.data.iter_mut().zip(&s.data) {
            *o = o.min(v);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsePixel {
    pub row: u16,
    pub col: u16,
    pub intensity: f32,
}

/// Transmitted form of a sketch: canvas dims plus the activated pixels.
///
/// Binary layout (little-endian): `u16` height, `u16` width, `u32` count,
/// then `count` records of `u16` row, `u16` col, `f32` intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSketch {
    pub height: u16,
    pub width: u16,
    pub pixels: Vec<SparsePixel>,
}

impl SparseSketch {
    pub fn from_sketch(s: &Sketch) -> Self {
        let pixels = s
            .activated()
            .into_iter()
            .map(|i| SparsePixel {
                row: (i / s.width) as u16,
                col: (i % s.width) as u16,
                intensity: s.data[i] as f32,
            })
            .collect();
        Self {
            height: s.height as u16,
            width: s.width as u16,
            pixels,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_sketch(&self) -> Result<Sketch> {
        let (h, w) = (self.height as usize, self.width as usize);
        let mut s = Sketch::blank(h, w);
        for p in &self.pixels {
            let (r, c) = (p.row as usize, p.col as usize);
            if r >= h || c >= w {
                return Err(Error::Format(format!("pixel ({r}, {c}) outside {h}x{w} canvas")));
            }
            if !(0.0..=1.0).contains(&p.intensity) {
                return Err(Error::Format(format!("intensity {} outside [0, 1]", p.intensity)));
            }
            s.data[r * w + c] = p.intensity as f64;
        }
        Ok(s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.pixels.len());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&(self.pixels.len() as u32).to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.row.to_le_bytes());
            out.extend_from_slice(&p.col.to_le_bytes());
            out.extend_from_slice(&p.intensity.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("sketch payload shorter than header".into()));
        }
        let height = u16::from_le_bytes([bytes[0], bytes[1]]);
        let width = u16::from_le_bytes([bytes[2], bytes[3]]);
        let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() != count * 8 {
            return Err(Error::Format(format!(
                "sketch payload declares {count} pixels but carries {} bytes",
                body.len()
            )));
        }
        let pixels = body
            .chunks_exact(8)
            .map(|c| SparsePixel {
                row: u16::from_le_bytes([c[0], c[1]]),
                col: u16::from_le_bytes([c[2], c[3]]),
                intensity: f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            })
            .collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sketch_with(h: usize, w: usize, dark: &[(usize, f64)]) -> Sketch {
        let mut s = Sketch::blank(h, w);
        for &(i, v) in dark {
            s.data[i] = v;
        }
        s
    }

    #[test]
    fn overlay_identity_blank_and_union() {
        let s = sketch_with(4, 4, &[(1, 0.2), (5, 0.0)]);
        assert_eq!(overlay_sketches(std::slice::from_ref(&s)).unwrap(), s);
        let blank = Sketch::blank(4, 4);
        assert_eq!(overlay_sketches(&[blank, s.clone()]).unwrap(), s);

        let a = sketch_with(4, 4, &[(0, 0.1), (3, 0.5)]);
        let b = sketch_with(4, 4, &[(7, 0.3), (15, 0.9)]);
        let o = overlay_sketches(&[a.clone(), b.clone()]).unwrap();
        let mut union: Vec<usize> = a.activated().into_iter().chain(b.activated()).collect();
        union.sort_unstable();
        assert_eq!(o.activated(), union);

        assert!(overlay_sketches(&[a, Sketch::blank(2, 2)]).is_err());
        assert!(overlay_sketches(&[]).is_err());
    }

    #[test]
    fn wire_format_layout() {
        let s = sketch_with(3, 5, &[(7, 0.25)]);
        let sparse = s.to_sparse();
        let bytes = sparse.to_bytes();
        assert_eq!(bytes.len(), 8 + 8);
        assert_eq!(&bytes[0..2], &3u16.to_le_bytes());
        assert_eq!(&bytes[2..4], &5u16.to_le_bytes());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..10], &1u16.to_le_bytes());
        assert_eq!(&bytes[10..12], &2u16.to_le_bytes());
        assert_eq!(SparseSketch::from_bytes(&bytes).unwrap(), sparse);
        assert_eq!(sparse.to_sketch().unwrap(), s);
        assert!(SparseSketch::from_bytes(&bytes[..12]).is_err());
    }
}
