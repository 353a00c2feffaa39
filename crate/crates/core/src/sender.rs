//! The sketching agent: dual image encoding, weighted fusion, budget-conditioned
//! decoding, and hard budgeted pixel selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::edges;
use crate::error::{Error, Result};
use crate::feedback::FeedbackSketch;
use crate::nn;
use crate::params::{he_normal, BoundParams, ParamSet};
use crate::sketch::Sketch;

/// Indication-vector grid for the cumulative budget fraction.
pub const BUDGET_LEVELS: [f64; 8] = [0.01, 0.03, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0];

/// Channels of the geometric and pragmatic feature maps.
pub const FEATURE_CHANNELS: usize = 8;
/// Canvas pixels per feature cell along each axis.
pub const FEATURE_STRIDE: usize = 4;
const HIDDEN: usize = 32;
const DECODER_CHANNELS: usize = 8;

/// Index of the level in `levels` nearest to `fraction`; ties go to the lower level.
pub fn quantize_budget(fraction: f64, levels: &[f64]) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!("budget fraction {fraction} outside (0, 1]")));
    }
    let mut best = 0;
    for (i, &l) in levels.iter().enumerate() {
        // differences within rounding noise count as ties, which keep the lower level
        if (l - fraction).abs() < (levels[best] - fraction).abs() - 1e-12 {
            best = i;
        }
    }
    Ok(best)
}

fn check_canvas(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % FEATURE_STRIDE != 0 || width % FEATURE_STRIDE != 0 {
        return Err(Error::Config(format!(
            "canvas {height}x{width} must be a positive multiple of {FEATURE_STRIDE}"
        )));
    }
    Ok(())
}

/// Fixed multi-scale edge features: absolute responses of four directional
/// filters at full and half resolution, average-pooled to `(8, H/4, W/4)`.
pub fn encode_geometric(image: &Tensor) -> Result<Tensor> {
    let (h, w, lum) = edges::luminance(image);
    check_canvas(h, w)?;
    let (oh, ow) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    let mut out = Vec::with_capacity(FEATURE_CHANNELS * oh * ow);
    for dir in edges::directional_gradients(&lum, h, w) {
        let mag: Vec<f64> = dir.iter().map(|v| v.abs() / 4.0).collect();
        out.extend(edges::downsample(&mag, h, w, FEATURE_STRIDE));
    }
    let half = edges::downsample(&lum, h, w, 2);
    for dir in edges::directional_gradients(&half, h / 2, w / 2) {
        let mag: Vec<f64> = dir.iter().map(|v| v.abs() / 4.0).collect();
        out.extend(edges::downsample(&mag, h / 2, w / 2, FEATURE_STRIDE / 2));
    }
    Tensor::new(vec![FEATURE_CHANNELS, oh, ow], out)
}

/// Sender parameters for one canvas size.
#[derive(Clone, Debug, PartialEq)]
pub struct Sender {
    pub params: ParamSet,
    height: usize,
    width: usize,
}

impl Sender {
    pub fn new(seed: u64, height: usize, width: usize) -> Result<Self> {
        check_canvas(height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = FEATURE_CHANNELS;
        let d = DECODER_CHANNELS;
        nn::init_conv(&mut p, &mut rng, "prag.stem", 1, c, FEATURE_STRIDE);
        nn::init_residual(&mut p, &mut rng, "prag.res", c);
        nn::init_deconv(&mut p, &mut rng, "fuse", c, c, 2);
        let cells = (height / 2) * (width / 2);
        nn::init_linear(&mut p, &mut rng, "cplx.l1", BUDGET_LEVELS.len(), HIDDEN);
        p.insert("cplx.l2.w", he_normal(&mut rng, &[HIDDEN, cells], HIDDEN).map(|v| 0.5 * v));
        p.insert("cplx.l2.b", Tensor::zeros(&[1, cells]));
        nn::init_conv(&mut p, &mut rng, "dec.e1", c + 1, d, 1);
        nn::init_conv(&mut p, &mut rng, "dec.e2", d, d, 2);
        nn::init_residual(&mut p, &mut rng, "dec.res", d);
        nn::init_deconv(&mut p, &mut rng, "dec.d1", d, d, 2);
        nn::init_deconv(&mut p, &mut rng, "dec.out", d, 1, 2);
        // bias the untrained decoder toward a light canvas
        p.insert("dec.out.b", Tensor::full(&[1, 1, 1], 1.0));
        Ok(Self { params: p, height, width })
    }

    pub fn with_params(params: ParamSet, height: usize, width: usize) -> Result<Self> {
        check_canvas(height, width)?;
        let template = Self::new(0, height, width)?;
        params.check_shapes(&template.params, "sender")?;
        Ok(Self { params, height, width })
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        match image.shape() {
            [h, w, _] if *h == self.height && *w == self.width => Ok(()),
            s => Err(Error::Config(format!(
                "image shape {s:?} does not match sender canvas {}x{}",
                self.height, self.width
            ))),
        }
    }

    /// Full forward pass to the pre-selection sketch Ŝ, shape `(H, W)`.
    /// The pragmatic branch is skipped when `a == 1` and the geometric one when `a == 0`.
    pub fn forward(&self, g: &mut Graph, bp: &BoundParams, image: &Tensor, a: f64, fraction: f64) -> Result<Var> {
        self.check_image(image)?;
        check_blend(a)?;
        let geo = if a > 0.0 { Some(g.constant(encode_geometric(image)?)) } else { None };
        let prag = if a < 1.0 { Some(encode_pragmatic(g, bp, image)?) } else { None };
        let (geo, prag) = match (geo, prag) {
            (Some(x), Some(y)) => (x, y),
            (Some(x), None) => (x, x),
            (None, Some(y)) => (y, y),
            (None, None) => unreachable!("a lies in [0, 1]"),
        };
        let fused = fuse(g, bp, geo, prag, a)?;
        generate_sketch(g, bp, fused, fraction)
    }

    /// Inference-only Ŝ for an image.
    pub fn draft(&self, image: &Tensor, a: f64, fraction: f64) -> Result<Sketch> {
        let mut g = Graph::new();
        let bp = self.params.bind_frozen(&mut g);
        let s = self.forward(&mut g, &bp, image, a, fraction)?;
        Sketch::from_tensor(g.value(s))
    }
}

fn check_blend(a: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Contract(format!("interpretability level {a} outside [0, 1]")));
    }
    Ok(())
}

/// Trainable features of the luminance plane: a strided stem then one residual block.
pub fn encode_pragmatic(g: &mut Graph, bp: &BoundParams, image: &Tensor) -> Result<Var> {
    let (h, w, lum) = edges::luminance(image);
    check_canvas(h, w)?;
    let x = g.constant(Tensor::new(vec![1, h, w], lum)?);
    let stem = nn::conv(g, bp, "prag.stem", x, FEATURE_STRIDE, 0)?;
    let stem = g.relu(stem);
    nn::residual(g, bp, "prag.res", stem)
}

/// Convex blend of the two feature maps followed by a stride-2 deconvolution.
/// The endpoints pass one input through untouched so the other cannot leak in.
pub fn fuse(g: &mut Graph, bp: &BoundParams, geo: Var, prag: Var, a: f64) -> Result<Var> {
    check_blend(a)?;
    let blend = fusion_blend(g, geo, prag, a)?;
    nn::deconv(g, bp, "fuse", blend, 2)
}

/// The pre-deconvolution blend `a·geo + (1-a)·prag`.
pub fn fusion_blend(g: &mut Graph, geo: Var, prag: Var, a: f64) -> Result<Var> {
    check_blend(a)?;
    if g.shape(geo) != g.shape(prag) {
        return Err(Error::Dimension(format!(
            "geometric features {:?} vs pragmatic features {:?}",
            g.shape(geo),
            g.shape(prag)
        )));
    }
    if a == 1.0 {
        return Ok(geo);
    }
    if a == 0.0 {
        return Ok(prag);
    }
    let x = g.scale(geo, a);
    let y = g.scale(prag, 1.0 - a);
    g.add(x, y)
}

/// Decodes the fused features, conditioned on the quantised cumulative budget, into Ŝ.
pub fn generate_sketch(g: &mut Graph, bp: &BoundParams, fused: Var, fraction: f64) -> Result<Var> {
    let level = quantize_budget(fraction, &BUDGET_LEVELS)?;
    let s = g.shape(fused).to_vec();
    let [c, fh, fw] = s[..] else {
        return Err(Error::Dimension(format!("fused features of shape {s:?}")));
    };
    if c != FEATURE_CHANNELS {
        return Err(Error::Dimension(format!("fused features have {c} channels")));
    }
    let mut onehot = vec![0.0; BUDGET_LEVELS.len()];
    onehot[level] = 1.0;
    let ind = g.constant(Tensor::new(vec![1, BUDGET_LEVELS.len()], onehot)?);
    let h = nn::linear(g, bp, "cplx.l1", ind)?;
    let h = g.relu(h);
    let m = nn::linear(g, bp, "cplx.l2", h)?;
    let m = g.reshape(m, &[1, fh, fw])?;
    let x = g.concat(&[fused, m])?;

    let e1 = nn::conv(g, bp, "dec.e1", x, 1, 0)?;
    let e1 = g.relu(e1);
    let e2 = nn::conv(g, bp, "dec.e2", e1, 2, 0)?;
    let e2 = g.relu(e2);
    let r = nn::residual(g, bp, "dec.res", e2)?;
    let d1 = nn::deconv(g, bp, "dec.d1", r, 2)?;
    let d1 = g.add(d1, e1)?;
    let d1 = g.relu(d1);
    let out = nn::deconv(g, bp, "dec.out", d1, 2)?;
    let out = g.sigmoid(out);
    g.reshape(out, &[2 * fh, 2 * fw])
}

/// Pixels already sent and the running overlay across rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchState {
    pub sent_mask: Vec<bool>,
    pub accumulated: Sketch,
    pub round_counts: Vec<usize>,
}

impl SketchState {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            sent_mask: vec![false; height * width],
            accumulated: Sketch::blank(height, width),
            round_counts: Vec::new(),
        }
    }

    pub fn sent_count(&self) -> usize {
        self.sent_mask.iter().filter(|&&s| s).count()
    }
}

/// `⌊b·N⌋`, guarding against fractions like `0.3·N` landing a hair under an integer.
pub fn pixel_cap(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor().max(0.0) as usize
}

/// Top-`k` indices by importance, excluding already-sent pixels and pixels of zero
/// importance. Ties go to the lower index.
pub fn select_indices(importance: &[f64], sent: &[bool], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len())
        .filter(|&i| !sent[i] && importance[i] > 0.0)
        .collect();
    order.sort_by(|&i, &j| importance[j].total_cmp(&importance[i]).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Ranks pixels of Ŝ by darkness (times the feedback weight when given), keeps the
/// top `⌊b·N⌋` not yet sent, and records them in `state`. Returns the round's
/// sketch, with intensities rounded to `f32` as on the wire, and the number of
/// transmitted pixels.
pub fn select_pixels(
    s_hat: &Sketch,
    feedback: Option<&FeedbackSketch>,
    budget: f64,
    state: &mut SketchState,
) -> Result<(Sketch, usize)> {
    let (h, w) = (s_hat.height(), s_hat.width());
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Contract(format!("round budget {budget} outside [0, 1]")));
    }
    if state.sent_mask.len() != h * w || state.accumulated.height() != h {
        return Err(Error::Dimension("sketch state does not match canvas".into()));
    }
    let mut importance: Vec<f64> = s_hat.data().iter().map(|v| 1.0 - v).collect();
    if let Some(fb) = feedback {
        let weights = fb.weight_map(h, w)?;
        for (imp, wt) in importance.iter_mut().zip(weights) {
            *imp *= wt;
        }
    }
    let chosen = select_indices(&importance, &state.sent_mask, pixel_cap(budget, h * w));
    let mut data = vec![1.0; h * w];
    for &i in &chosen {
        // transmitted at wire precision; stay strictly below white so the pixel counts
        data[i] = (s_hat.data()[i] as f32).min(1.0 - f32::EPSILON / 2.0) as f64;
        state.sent_mask[i] = true;
    }
    let round = Sketch::new(h, w, data)?;
    state.accumulated = crate::sketch::overlay_sketches(&[state.accumulated.clone(), round.clone()])?;
    state.round_counts.push(chosen.len());
    Ok((round, chosen.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::FeedbackBox;

    #[test]
    fn quantisation_is_nearest_with_ties_low() {
        let levels = [0.05, 0.1, 0.3, 0.5];
        assert_eq!(quantize_budget(0.29, &levels).unwrap(), 2);
        assert_eq!(quantize_budget(0.2, &levels).unwrap(), 1);
        assert_eq!(quantize_budget(1.0, &BUDGET_LEVELS).unwrap(), 7);
        assert!(quantize_budget(0.0, &levels).is_err());
        assert!(quantize_budget(1.5, &levels).is_err());
    }

    #[test]
    fn four_pixel_selection_by_darkness_then_feedback() {
        let s = Sketch::new(2, 2, vec![0.1, 0.9, 0.5, 0.6]).unwrap();
        let mut st = SketchState::new(2, 2);
        let (out, p) = select_pixels(&s, None, 0.5, &mut st).unwrap();
        assert_eq!(p, 2);
        assert_eq!(out.activated(), vec![0, 2]);
        assert_eq!(out.data(), &[0.1f32 as f64, 1.0, 0.5, 1.0]);

        let fb = FeedbackSketch {
            height: 2,
            width: 2,
            boxes: vec![
                FeedbackBox { x1: 1, y1: 0, x2: 1, y2: 0, weight: 1.0 },
                FeedbackBox { x1: 0, y1: 1, x2: 0, y2: 1, weight: 1.0 },
            ],
        };
        let mut st = SketchState::new(2, 2);
        let (out, _) = select_pixels(&s, Some(&fb), 0.5, &mut st).unwrap();
        assert_eq!(out.activated(), vec![1, 2]);
    }

    #[test]
    fn zero_budget_gives_blank_and_sent_pixels_are_skipped() {
        let s = Sketch::new(1, 3, vec![0.0, 0.2, 0.4]).unwrap();
        let mut st = SketchState::new(1, 3);
        let (out, p) = select_pixels(&s, None, 0.0, &mut st).unwrap();
        assert_eq!((p, out.activated_count()), (0, 0));
        select_pixels(&s, None, 0.34, &mut st).unwrap();
        let (out, _) = select_pixels(&s, None, 0.34, &mut st).unwrap();
        assert_eq!(out.activated(), vec![1]);
        assert_eq!(st.round_counts, vec![0, 1, 1]);
        assert_eq!(st.sent_count(), 2);
    }

    #[test]
    fn geometric_features_vanish_on_constant_image() {
        let f = encode_geometric(&Tensor::full(&[64, 64, 3], 0.7)).unwrap();
        assert_eq!(f.shape(), &[8, 16, 16]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sketch_shape_and_range() {
        let sender = Sender::new(3, 64, 64).unwrap();
        let img = crate::shapeworld::generate_scene(1, &Default::default()).unwrap().0;
        for a in [0.0, 0.5, 1.0] {
            let s = sender.draft(&img, a, 0.3).unwrap();
            assert_eq!((s.height(), s.width()), (64, 64));
        }
        assert!(sender.draft(&img, 1.2, 0.3).is_err());
        assert!(sender.draft(&img, 0.5, 0.0).is_err());
    }
}
