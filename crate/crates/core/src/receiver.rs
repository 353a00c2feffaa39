//! The answering agent: question encoder, grid-proposal vision encoder over the
//! accumulated sketch, and a cross-attention answer head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::feedback::{self, FeedbackConfig, FeedbackSketch};
use crate::nn;
use crate::params::{normal, BoundParams, ParamSet};
use crate::shapeworld::{token_ids, ANSWERS, TOKENS};
use crate::sketch::Sketch;

const EMBED: usize = 16;
const VISION_STEM: usize = 16;
const VISION_MID: usize = 32;
const VISION_CHANNELS: usize = 32;
const ATTN: usize = 32;
const HEAD_HIDDEN: usize = 64;
/// Canvas pixels per cell of the vision stem output.
const STEM_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverConfig {
    pub height: usize,
    pub width: usize,
    /// Side of one square grid proposal, in pixels.
    pub grid: usize,
    pub max_question_len: usize,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            grid: 8,
            max_question_len: 10,
        }
    }
}

impl ReceiverConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.grid;
        if g == 0 || g % STEM_STRIDE != 0 || self.height % g != 0 || self.width % g != 0 {
            return Err(Error::Config(format!(
                "grid {g} must be a multiple of {STEM_STRIDE} dividing the {}x{} canvas",
                self.height, self.width
            )));
        }
        if self.max_question_len == 0 {
            return Err(Error::Config("max_question_len must be positive".into()));
        }
        Ok(())
    }

    pub fn proposal_count(&self) -> usize {
        (self.height / self.grid) * (self.width / self.grid)
    }
}

/// One region the receiver attends over. Corners are inclusive pixel coordinates
/// with `x` the column and `y` the row.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    /// Row-major canvas mask.
    pub mask: Vec<bool>,
    pub area: usize,
    pub feature: Vec<f64>,
}

impl Proposal {
    /// Box proposal with its mask filled in.
    pub fn from_box(x1: usize, y1: usize, x2: usize, y2: usize, height: usize, width: usize) -> Self {
        let mut mask = vec![false; height * width];
        for r in y1..=y2 {
            for c in x1..=x2 {
                mask[r * width + c] = true;
            }
        }
        Self {
            x1,
            y1,
            x2,
            y2,
            mask,
            area: (x2 - x1 + 1) * (y2 - y1 + 1),
            feature: Vec::new(),
        }
    }
}

/// Row-major `g × g` cells covering the canvas.
pub fn grid_proposals(height: usize, width: usize, grid: usize) -> Result<Vec<Proposal>> {
    if grid == 0 || height % grid != 0 || width % grid != 0 {
        return Err(Error::Config(format!(
            "grid {grid} does not divide the {height}x{width} canvas"
        )));
    }
    let mut out = Vec::new();
    for r in 0..height / grid {
        for c in 0..width / grid {
            let (x1, y1) = (c * grid, r * grid);
            out.push(Proposal::from_box(x1, y1, x1 + grid - 1, y1 + grid - 1, height, width));
        }
    }
    Ok(out)
}

/// Index of the largest score; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// What one receiver turn produces for the protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub scores: Vec<f64>,
    pub prediction: usize,
    pub feedback: Option<FeedbackSketch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Receiver {
    pub params: ParamSet,
    pub config: ReceiverConfig,
}

impl Receiver {
    pub fn new(seed: u64, config: ReceiverConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("q.embed", normal(&mut rng, &[TOKENS.len(), EMBED], 1.0));
        p.insert("q.pos", normal(&mut rng, &[config.max_question_len, EMBED], 0.5));
        nn::init_linear(&mut p, &mut rng, "q.tok", EMBED, EMBED);
        nn::init_linear(&mut p, &mut rng, "q.ctx", EMBED, EMBED);
        let k = STEM_STRIDE + 2;
        nn::init_conv(&mut p, &mut rng, "v.c1", 3, VISION_STEM, k);
        nn::init_conv(&mut p, &mut rng, "v.c1b", VISION_STEM, VISION_STEM, 3);
        nn::init_conv(&mut p, &mut rng, "v.c2", VISION_STEM, VISION_MID, 1);
        nn::init_conv(&mut p, &mut rng, "v.c3", VISION_MID, VISION_CHANNELS, 3);
        nn::init_linear(&mut p, &mut rng, "a.q", EMBED, ATTN);
        nn::init_linear(&mut p, &mut rng, "a.k", VISION_CHANNELS, ATTN);
        nn::init_linear(&mut p, &mut rng, "a.v", VISION_CHANNELS, ATTN);
        nn::init_linear(&mut p, &mut rng, "a.o", EMBED, ATTN);
        nn::init_linear(&mut p, &mut rng, "c.f", VISION_CHANNELS, ATTN);
        nn::init_linear(&mut p, &mut rng, "c.q", EMBED, ATTN);
        nn::init_linear(&mut p, &mut rng, "h.z", ATTN, HEAD_HIDDEN);
        nn::init_linear(&mut p, &mut rng, "h.c", ATTN, HEAD_HIDDEN);
        nn::init_linear(&mut p, &mut rng, "h.q", EMBED, HEAD_HIDDEN);
        nn::init_linear(&mut p, &mut rng, "h.out", HEAD_HIDDEN, ANSWERS.len());
        // start the scores unsaturated whatever the hidden activations' scale
        p.insert("h.out.w", normal(&mut rng, &[HEAD_HIDDEN, ANSWERS.len()], 0.01));
        p.insert("h.out.b", Tensor::full(&[1, ANSWERS.len()], -2.0));
        Ok(Self { params: p, config })
    }

    pub fn with_params(params: ParamSet, config: ReceiverConfig) -> Result<Self> {
        let template = Self::new(0, config)?;
        params.check_shapes(&template.params, "receiver")?;
        Ok(Self { params, config })
    }

    /// Token-feature matrix `(T, D)`: embeddings mixed with the question mean and a
    /// learned position table, so word order changes the encoding.
    pub fn encode_question(&self, g: &mut Graph, bp: &BoundParams, question: &[String]) -> Result<Var> {
        let t = question.len();
        if t == 0 {
            return Err(Error::Contract("empty question".into()));
        }
        if t > self.config.max_question_len {
            return Err(Error::Contract(format!(
                "question of {t} tokens exceeds the limit of {}",
                self.config.max_question_len
            )));
        }
        let e = g.gather_rows(bp.get("q.embed"), &token_ids(question))?;
        let avg = g.constant(Tensor::full(&[1, t], 1.0 / t as f64));
        let mean = g.matmul(avg, e)?;
        let tok = nn::linear(g, bp, "q.tok", e)?;
        let ctx = nn::linear(g, bp, "q.ctx", mean)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(bp.get("q.pos"), &positions)?;
        let h = g.add(tok, ctx)?;
        let h = g.add(h, pos)?;
        Ok(g.relu(h))
    }

    /// Vision features `(C, J)` of a sketch held on the graph as an `(H, W)` tensor,
    /// one column per grid proposal in row-major cell order.
    pub fn vision_features(&self, g: &mut Graph, bp: &BoundParams, sketch: Var) -> Result<Var> {
        let (h, w) = (self.config.height, self.config.width);
        if g.shape(sketch) != [h, w] {
            return Err(Error::Config(format!(
                "sketch of shape {:?} on a {h}x{w} receiver",
                g.shape(sketch)
            )));
        }
        let dark = g.one_minus(sketch);
        let dark = g.reshape(dark, &[1, h, w])?;
        let (xs, ys) = coordinate_planes(h, w);
        let xs = g.constant(xs);
        let ys = g.constant(ys);
        let dx = g.mul(dark, xs)?;
        let dy = g.mul(dark, ys)?;
        let x = g.concat(&[dark, dx, dy])?;
        let f = nn::conv(g, bp, "v.c1", x, STEM_STRIDE, 1)?;
        let f = g.relu(f);
        let f = nn::conv(g, bp, "v.c1b", f, 1, 1)?;
        let f = g.relu(f);
        let f = nn::conv(g, bp, "v.c2", f, 1, 0)?;
        let f = g.relu(f);
        let f = g.avg_pool2d(f, self.config.grid / STEM_STRIDE)?;
        let f = nn::conv(g, bp, "v.c3", f, 1, 1)?;
        let f = g.relu(f);
        g.reshape(f, &[VISION_CHANNELS, self.config.proposal_count()])
    }

    /// Grid proposals with their pooled features, plus the `(C, J)` feature matrix.
    pub fn encode_vision(&self, g: &mut Graph, bp: &BoundParams, sketch: &Sketch) -> Result<(Vec<Proposal>, Var)> {
        let s = g.constant(sketch.to_tensor());
        let f = self.vision_features(g, bp, s)?;
        let mut proposals = grid_proposals(self.config.height, self.config.width, self.config.grid)?;
        let fv = g.value(f);
        let j = proposals.len();
        for (jj, p) in proposals.iter_mut().enumerate() {
            p.feature = (0..VISION_CHANNELS).map(|k| fv.data()[k * j + jj]).collect();
        }
        Ok((proposals, f))
    }

    /// Per-answer sigmoid scores `(|answers|,)` from question and vision features.
    pub fn answer(&self, g: &mut Graph, bp: &BoundParams, f_lang: Var, f_vision: Var) -> Result<Var> {
        let t = g.shape(f_lang)[0];
        let j = g.shape(f_vision)[1];
        let v = g.transpose(f_vision)?;
        let q = nn::linear(g, bp, "a.q", f_lang)?;
        let k = nn::linear(g, bp, "a.k", v)?;
        let vals = nn::linear(g, bp, "a.v", v)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (ATTN as f64).sqrt());
        // attention picks out where; the sigmoid gate accumulates how much
        let attn = g.softmax_rows(logits)?;
        let gate = g.sigmoid(logits);
        let looked = g.matmul(attn, vals)?;
        let counted = g.matmul(gate, vals)?;
        let counted = g.scale(counted, 8.0 / j as f64);
        let mix = g.add(looked, counted)?;
        let out_gate = nn::linear(g, bp, "a.o", f_lang)?;
        let z = g.mul(mix, out_gate)?;
        let avg = g.constant(Tensor::full(&[1, t], 1.0 / t as f64));
        let z = g.matmul(avg, z)?;
        let qsum = g.matmul(avg, f_lang)?;
        // question-conditioned cell codes, summed so that object counts add up
        let cf = nn::linear(g, bp, "c.f", v)?;
        let cq = nn::linear(g, bp, "c.q", qsum)?;
        let cells = g.add(cf, cq)?;
        let cells = g.relu(cells);
        let ones = g.constant(Tensor::full(&[1, j], 1.0 / j as f64));
        let tally = g.matmul(ones, cells)?;
        let hz = nn::linear(g, bp, "h.z", z)?;
        let hq = nn::linear(g, bp, "h.q", qsum)?;
        let hc = nn::linear(g, bp, "h.c", tally)?;
        let h = g.add(hz, hq)?;
        let h = g.add(h, hc)?;
        let h = g.relu(h);
        let s = nn::linear(g, bp, "h.out", h)?;
        let s = g.sigmoid(s);
        g.reshape(s, &[ANSWERS.len()])
    }

    /// Differentiable scores for a sketch already on the graph.
    pub fn forward(&self, g: &mut Graph, bp: &BoundParams, sketch: Var, question: &[String]) -> Result<Var> {
        let lang = self.encode_question(g, bp, question)?;
        let vis = self.vision_features(g, bp, sketch)?;
        self.answer(g, bp, lang, vis)
    }

    /// Inference-only scores for a sketch.
    pub fn scores(&self, sketch: &Sketch, question: &[String]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bp = self.params.bind_frozen(&mut g);
        let s = g.constant(sketch.to_tensor());
        let out = self.forward(&mut g, &bp, s, question)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Answers from the accumulated sketch and, when `feedback` is given, derives the
    /// box feedback by differentiating the top scores against the proposal features.
    pub fn respond(&self, sketch: &Sketch, question: &[String], feedback: Option<&FeedbackConfig>) -> Result<Reply> {
        let mut g = Graph::new();
        let bp = self.params.bind_frozen(&mut g);
        let (proposals, f) = self.encode_vision(&mut g, &bp, sketch)?;
        // re-enter the features as a leaf so the head can be differentiated against them
        let f_leaf = g.input(g.value(f).clone());
        let lang = self.encode_question(&mut g, &bp, question)?;
        let out = self.answer(&mut g, &bp, lang, f_leaf)?;
        let scores = g.value(out).data().to_vec();
        let prediction = predict(&scores);
        let feedback = match feedback {
            None => None,
            Some(cfg) => {
                cfg.validate()?;
                let beta = feedback::channel_weights(&mut g, out, f_leaf, cfg.l)?;
                let w = feedback::proposal_weights(&beta, g.value(f_leaf))?;
                let (h, wd) = (self.config.height, self.config.width);
                let dense = feedback::feedback_masks(&w, &proposals, h, wd)?;
                Some(feedback::encode_feedback(&dense, &proposals, cfg.h_max, h, wd)?)
            }
        };
        Ok(Reply {
            scores,
            prediction,
            feedback,
        })
    }
}

/// Column and row coordinates scaled to `[-1, 1]`, each shaped `(1, H, W)`.
fn coordinate_planes(h: usize, w: usize) -> (Tensor, Tensor) {
    let scale = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let mut xs = Vec::with_capacity(h * w);
    let mut ys = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            xs.push(scale(c, w));
            ys.push(scale(r, h));
        }
    }
    (
        Tensor::new(vec![1, h, w], xs).expect("finite"),
        Tensor::new(vec![1, h, w], ys).expect("finite"),
    )
}
