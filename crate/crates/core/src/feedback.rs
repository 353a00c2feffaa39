//! Gradient-attribution feedback: channel weights from the top answer scores,
//! per-proposal relevance, the dense relevance canvas, and its box encoding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::receiver::Proposal;

/// Numbers charged per transmitted box: two corners and a weight.
pub const BOX_COST: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    /// How many of the highest answer scores form the attribution target.
    pub l: usize,
    /// Most boxes sent back per round.
    pub h_max: usize,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self { l: 1, h_max: 5 }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.h_max == 0 {
            return Err(Error::Config(format!(
                "feedback needs l >= 1 and h_max >= 1, got l={} h_max={}",
                self.l, self.h_max
            )));
        }
        if self.l > crate::shapeworld::ANSWERS.len() {
            return Err(Error::Config(format!("l={} exceeds the answer vocabulary", self.l)));
        }
        Ok(())
    }
}

/// Inclusive pixel box: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBox {
    pub x1: u16,
    pub y1: u16,
    pub x2: u16,
    pub y2: u16,
    pub weight: f32,
}

impl FeedbackBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.x1 as usize..=self.x2 as usize).contains(&col)
            && (self.y1 as usize..=self.y2 as usize).contains(&row)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::Contract(format!("box {self:?} has inverted corners")));
        }
        if self.x2 as usize >= width || self.y2 as usize >= height {
            return Err(Error::Contract(format!("box {self:?} leaves the {height}x{width} canvas")));
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::Contract(format!("box weight {} must be finite and >= 0", self.weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSketch {
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<FeedbackBox>,
}

impl FeedbackSketch {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            boxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Ledger charge for this message.
    pub fn cost(&self) -> usize {
        BOX_COST * self.boxes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.boxes.iter().try_for_each(|b| b.validate(self.height, self.width))
    }

    /// Sum of the weights of every box covering the pixel.
    pub fn weight_at(&self, row: usize, col: usize) -> Result<f64> {
        if row >= self.height || col >= self.width {
            return Err(Error::Contract(format!(
                "pixel ({row}, {col}) outside the {}x{} canvas",
                self.height, self.width
            )));
        }
        Ok(self
            .boxes
            .iter()
            .filter(|b| b.contains(row, col))
            .map(|b| b.weight as f64)
            .sum())
    }

    /// Dense row-major canvas of [`FeedbackSketch::weight_at`].
    pub fn weight_map(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        if (height, width) != (self.height, self.width) {
            return Err(Error::Dimension(format!(
                "feedback for {}x{} applied to a {height}x{width} canvas",
                self.height, self.width
            )));
        }
        self.validate()?;
        let mut map = vec![0.0; height * width];
        for b in &self.boxes {
            for r in b.y1 as usize..=b.y2 as usize {
                for c in b.x1 as usize..=b.x2 as usize {
                    map[r * width + c] += b.weight as f64;
                }
            }
        }
        Ok(map)
    }

    /// Wire format: `u16` count, then per box four `u16` corners and an `f32` weight,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 12 * self.boxes.len());
        out.extend((self.boxes.len() as u16).to_le_bytes());
        for b in &self.boxes {
            for v in [b.x1, b.y1, b.x2, b.y2] {
                out.extend(v.to_le_bytes());
            }
            out.extend(b.weight.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        let bad = || Error::Format("truncated feedback message".into());
        let n = u16::from_le_bytes(bytes.get(..2).ok_or_else(bad)?.try_into().expect("2 bytes")) as usize;
        if bytes.len() != 2 + 12 * n {
            return Err(Error::Format(format!(
                "feedback message of {} bytes does not hold {n} boxes",
                bytes.len()
            )));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let boxes = (0..n)
            .map(|i| {
                let o = 2 + 12 * i;
                FeedbackBox {
                    x1: u16_at(o),
                    y1: u16_at(o + 2),
                    x2: u16_at(o + 4),
                    y2: u16_at(o + 6),
                    weight: f32::from_le_bytes(bytes[o + 8..o + 12].try_into().expect("4 bytes")),
                }
            })
            .collect();
        let fb = Self { height, width, boxes };
        fb.validate()?;
        Ok(fb)
    }
}

/// Indices of the `l` largest scores; ties go to the lower index.
pub fn top_answers(scores: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(l);
    idx
}

/// Per-channel weights: the gradient of the summed top-`l` scores with respect to
/// `F_vision` (shape `(C, J)`), summed over proposals. Records the target on `g`.
pub fn channel_weights(g: &mut Graph, scores: Var, f_vision: Var, l: usize) -> Result<Vec<f64>> {
    if !g.contains(scores) || !g.contains(f_vision) {
        return Err(Error::Contract("scores or features are not recorded on this graph".into()));
    }
    if l == 0 {
        return Err(Error::Contract("l must be at least 1".into()));
    }
    let shape = g.shape(f_vision).to_vec();
    let [c, j] = shape[..] else {
        return Err(Error::Dimension(format!("F_vision of shape {shape:?}")));
    };
    let top = top_answers(g.value(scores).data(), l);
    let picked = g.select(scores, &top)?;
    let target = g.sum(picked);
    let grads = g.backward(target)?;
    let d = grads.get(f_vision);
    Ok((0..c).map(|k| d.data()[k * j..(k + 1) * j].iter().sum()).collect())
}

/// `w_j = ReLU(Σ_k β_k F[k, j])`.
pub fn proposal_weights(beta: &[f64], f_vision: &Tensor) -> Result<Vec<f64>> {
    let [c, j] = f_vision.shape()[..] else {
        return Err(Error::Dimension(format!("F_vision of shape {:?}", f_vision.shape())));
    };
    if beta.len() != c {
        return Err(Error::Dimension(format!("{} channel weights for {c} channels", beta.len())));
    }
    let f = f_vision.data();
    Ok((0..j)
        .map(|jj| {
            let s: f64 = (0..c).map(|k| beta[k] * f[k * j + jj]).sum();
            s.max(0.0)
        })
        .collect())
}

/// Dense relevance canvas `H = Σ_j (w_j / E_j) P_j`.
pub fn feedback_masks(w: &[f64], proposals: &[Proposal], height: usize, width: usize) -> Result<Vec<f64>> {
    if w.len() != proposals.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} proposals",
            w.len(),
            proposals.len()
        )));
    }
    let mut h = vec![0.0; height * width];
    for (wj, p) in w.iter().zip(proposals) {
        if p.area == 0 {
            return Err(Error::Contract("zero-area proposal".into()));
        }
        if p.mask.len() != h.len() {
            return Err(Error::Dimension("proposal mask does not match canvas".into()));
        }
        let v = wj / p.area as f64;
        for (hv, &m) in h.iter_mut().zip(&p.mask) {
            if m {
                *hv += v;
            }
        }
    }
    Ok(h)
}

/// Keeps the (at most `h_max`) proposals whose peak relevance inside their mask is
/// largest and positive, as weighted boxes ordered by weight then proposal index.
pub fn encode_feedback(
    dense: &[f64],
    proposals: &[Proposal],
    h_max: usize,
    height: usize,
    width: usize,
) -> Result<FeedbackSketch> {
    if h_max == 0 {
        return Err(Error::Contract("h_max must be at least 1".into()));
    }
    if dense.len() != height * width {
        return Err(Error::Dimension("relevance canvas does not match dims".into()));
    }
    let peak: Vec<f64> = proposals
        .iter()
        .map(|p| {
            dense
                .iter()
                .zip(&p.mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(0.0, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..proposals.len())
        .filter(|&j| (peak[j] as f32) > 0.0)
        .collect();
    order.sort_by(|&i, &j| peak[j].total_cmp(&peak[i]).then(i.cmp(&j)));
    order.truncate(h_max);
    let boxes = order
        .into_iter()
        .map(|j| {
            let p = &proposals[j];
            FeedbackBox {
                x1: p.x1 as u16,
                y1: p.y1 as u16,
                x2: p.x2 as u16,
                y2: p.y2 as u16,
                weight: peak[j] as f32,
            }
        })
        .collect();
    Ok(FeedbackSketch { height, width, boxes })
}
