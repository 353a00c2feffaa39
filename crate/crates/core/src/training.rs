//! Losses, the frozen perceptual encoder, joint sender/receiver training through
//! hard pixel selection, receiver pretraining, and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{he_normal, normal, BoundParams, Optimizer, OptimizerKind, ParamSet};
use crate::receiver::{predict, Receiver, ReceiverConfig};
use crate::sender::{pixel_cap, select_indices, Sender, BUDGET_LEVELS};
use crate::shapeworld::{derive_seed, reference_sketch, Dataset, Record};
use crate::sketch::Sketch;

/// Weight of the perceptual term: `f_balance(a) = 10a`.
pub fn balance(a: f64) -> f64 {
    10.0 * a
}

/// `L = L1 + 10a·L2`.
pub fn total_loss(l1: f64, l2: f64, a: f64) -> f64 {
    l1 + balance(a) * l2
}

/// Mean binary cross-entropy of the answer scores against a 0/1 target.
pub fn loss_answer(g: &mut Graph, scores: Var, target: &[f64]) -> Result<Var> {
    g.bce(scores, target)
}

const PERCEPTUAL_CHANNELS: [usize; 3] = [6, 8, 8];
const PERCEPTUAL_POOLED: usize = 16;

/// Frozen random conv stack over sketch darkness. Its layer activations and pooled
/// projection define the perceptual distance between two sketches.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualEncoder {
    pub params: ParamSet,
    pub seed: u64,
    height: usize,
    width: usize,
}

/// Activations of one sketch: per-layer maps (already scaled by `1/sqrt(numel)`)
/// and the pooled vector.
pub struct PerceptualFeatures {
    pub layers: Vec<Var>,
    pub pooled: Var,
}

impl PerceptualEncoder {
    pub fn new(seed: u64, height: usize, width: usize) -> Result<Self> {
        if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "perceptual encoder needs a canvas divisible by 8, got {height}x{width}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut c_in = 1;
        for (i, &c) in PERCEPTUAL_CHANNELS.iter().enumerate() {
            p.insert(format!("l{i}.w"), he_normal(&mut rng, &[c, c_in, 3, 3], c_in * 9));
            p.insert(format!("l{i}.b"), normal(&mut rng, &[c, 1, 1], 0.05));
            c_in = c;
        }
        let flat = c_in * (height / 8) * (width / 8);
        p.insert("proj", normal(&mut rng, &[flat, PERCEPTUAL_POOLED], (1.0 / flat as f64).sqrt()));
        Ok(Self {
            params: p,
            seed,
            height,
            width,
        })
    }

    pub fn with_params(params: ParamSet, seed: u64, height: usize, width: usize) -> Result<Self> {
        let template = Self::new(seed, height, width)?;
        params.check_shapes(&template.params, "perceptual")?;
        Ok(Self { params, ..template })
    }

    /// Features of an `(H, W)` sketch on the graph. Weights are always bound as constants.
    pub fn features(&self, g: &mut Graph, bp: &BoundParams, sketch: Var) -> Result<PerceptualFeatures> {
        if g.shape(sketch) != [self.height, self.width] {
            return Err(Error::Dimension(format!(
                "perceptual encoder for {}x{} given {:?}",
                self.height,
                self.width,
                g.shape(sketch)
            )));
        }
        let d = g.one_minus(sketch);
        let mut x = g.reshape(d, &[1, self.height, self.width])?;
        let mut layers = Vec::new();
        for i in 0..PERCEPTUAL_CHANNELS.len() {
            let y = g.conv2d(x, bp.get(&format!("l{i}.w")), 2, 1)?;
            let y = g.add(y, bp.get(&format!("l{i}.b")))?;
            x = g.relu(y);
            let n = g.value(x).numel() as f64;
            layers.push(g.scale(x, 1.0 / n.sqrt()));
        }
        let n = g.value(x).numel();
        let flat = g.reshape(x, &[1, n])?;
        let pooled = g.matmul(flat, bp.get("proj"))?;
        Ok(PerceptualFeatures { layers, pooled })
    }

    /// `Σ_ℓ ||φ_ℓ(ref) − φ_ℓ(S)||² − cos(ψ(ref), ψ(S))` with the reference held constant.
    pub fn loss(&self, g: &mut Graph, sketch: Var, reference: &Sketch) -> Result<Var> {
        let bp = self.params.bind_frozen(g);
        let r = g.constant(reference.to_tensor());
        let fr = self.features(g, &bp, r)?;
        let fs = self.features(g, &bp, sketch)?;
        let mut acc: Option<Var> = None;
        for (a, b) in fr.layers.iter().zip(&fs.layers) {
            let d = g.squared_distance(*a, *b)?;
            acc = Some(match acc {
                None => d,
                Some(s) => g.add(s, d)?,
            });
        }
        let cos = g.cosine(fr.pooled, fs.pooled)?;
        g.sub(acc.expect("at least one layer"), cos)
    }

    pub fn distance(&self, sketch: &Sketch, reference: &Sketch) -> Result<f64> {
        let mut g = Graph::new();
        let s = g.constant(sketch.to_tensor());
        let l = self.loss(&mut g, s, reference)?;
        Ok(g.value(l).item())
    }
}

/// Perceptual loss of a sketch against the reference sketch of `image`.
pub fn loss_perceptual(g: &mut Graph, sketch: Var, image: &Tensor, encoder: &PerceptualEncoder) -> Result<Var> {
    let reference = reference_sketch(image);
    encoder.loss(g, sketch, &reference)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub a: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Budget fractions sampled uniformly, one per batch.
    pub budget_levels: Vec<f64>,
    pub clip_norm: f64,
    /// Seed of the frozen perceptual encoder; shared across variants so their
    /// distances are comparable.
    pub perceptual_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            a: 0.5,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            budget_levels: BUDGET_LEVELS.to_vec(),
            clip_norm: 5.0,
            perceptual_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.a) {
            problems.push(format!("a={} outside [0, 1]", self.a));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate={} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.budget_levels.is_empty() || self.budget_levels.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
            problems.push("budget_levels must be non-empty fractions in (0, 1]".to_string());
        }
        if !(self.clip_norm > 0.0) {
            problems.push(format!("clip_norm={} must be positive", self.clip_norm));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    /// Training accuracy in percent.
    pub accuracy: f64,
}

/// Which part of the objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Total,
    Answer,
    Perceptual,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub correct: usize,
    pub count: usize,
}

impl BatchStats {
    fn absorb(&mut self, other: &BatchStats) {
        self.loss += other.loss;
        self.l1 += other.l1;
        self.l2 += other.l2;
        self.correct += other.correct;
        self.count += other.count;
    }
}

/// Mask of the pixels hard selection would transmit from Ŝ in a single round.
pub fn selection_mask(s_hat: &[f64], fraction: f64) -> Vec<f64> {
    let importance: Vec<f64> = s_hat.iter().map(|v| 1.0 - v).collect();
    let sent = vec![false; s_hat.len()];
    let mut mask = vec![0.0; s_hat.len()];
    for i in select_indices(&importance, &sent, pixel_cap(fraction, s_hat.len())) {
        mask[i] = 1.0;
    }
    mask
}

/// Selected sketch `M ⊙ Ŝ + (1 − M)`: forward equals hard selection, and the
/// gradient reaches Ŝ only at selected pixels.
pub fn straight_through(g: &mut Graph, s_hat: Var, fraction: f64) -> Result<Var> {
    let shape = g.shape(s_hat).to_vec();
    let mask = selection_mask(g.value(s_hat).data(), fraction);
    let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let m = g.constant(Tensor::new(shape.clone(), mask)?);
    let inv = g.constant(Tensor::new(shape, inv)?);
    let kept = g.mul(s_hat, m)?;
    g.add(kept, inv)
}

/// Forward and backward over a batch of one-round episodes. Returns summed
/// gradients (scaled by `1/len`) for sender and receiver plus loss statistics.
pub fn batch_gradients(
    sender: &Sender,
    receiver: &Receiver,
    encoder: &PerceptualEncoder,
    batch: &[&Record],
    a: f64,
    fraction: f64,
    objective: Objective,
) -> Result<(ParamSet, ParamSet, BatchStats)> {
    let mut gs = sender.params.zeros_like();
    let mut gr = receiver.params.zeros_like();
    let mut stats = BatchStats::default();
    let scale = 1.0 / batch.len().max(1) as f64;
    for rec in batch {
        let image = rec.image();
        let mut g = Graph::new();
        let sbp = sender.params.bind(&mut g);
        let rbp = receiver.params.bind(&mut g);
        let s_hat = sender.forward(&mut g, &sbp, &image, a, fraction)?;
        let s = straight_through(&mut g, s_hat, fraction)?;
        let scores = receiver.forward(&mut g, &rbp, s, &rec.qa.question)?;
        let l1 = loss_answer(&mut g, scores, &rec.qa.target())?;
        let need_l2 = a > 0.0 || objective == Objective::Perceptual;
        let l2 = if need_l2 { Some(loss_perceptual(&mut g, s, &image, encoder)?) } else { None };
        let root = match (objective, l2) {
            (Objective::Answer, _) | (Objective::Total, None) => l1,
            (Objective::Perceptual, Some(l2)) => l2,
            (Objective::Total, Some(l2)) => {
                let w = g.scale(l2, balance(a));
                g.add(l1, w)?
            }
            (Objective::Perceptual, None) => unreachable!("perceptual term always recorded"),
        };
        let grads = g.backward(root)?;
        gs.accumulate(&grads, &sbp, scale);
        gr.accumulate(&grads, &rbp, scale);
        let l1v = g.value(l1).item();
        let l2v = l2.map_or(0.0, |v| g.value(v).item());
        stats.absorb(&BatchStats {
            loss: total_loss(l1v, l2v, a),
            l1: l1v,
            l2: l2v,
            correct: (predict(g.value(scores).data()) == rec.qa.answer) as usize,
            count: 1,
        });
    }
    Ok((gs, gr, stats))
}

pub struct TrainOutcome {
    pub sender: Sender,
    pub receiver: Receiver,
    pub history: Vec<EpochMetrics>,
}

fn summarize(epoch: usize, s: &BatchStats) -> EpochMetrics {
    let n = s.count.max(1) as f64;
    EpochMetrics {
        epoch,
        loss: s.loss / n,
        l1: s.l1 / n,
        l2: s.l2 / n,
        accuracy: 100.0 * s.correct as f64 / n,
    }
}

fn check_finite(stats: &BatchStats, epoch: usize, batch: usize) -> Result<()> {
    if !(stats.loss.is_finite() && stats.l1.is_finite() && stats.l2.is_finite()) {
        return Err(Error::Divergence {
            epoch,
            batch,
            detail: format!("loss={} l1={} l2={}", stats.loss, stats.l1, stats.l2),
        });
    }
    Ok(())
}

/// Trains sender and receiver jointly with one optimizer on one-round episodes,
/// sampling a budget level per batch. `receiver` may be a pretrained warm start.
pub fn train_variant(
    config: &TrainConfig,
    dataset: &Dataset,
    mut sender: Sender,
    mut receiver: Receiver,
    encoder: &PerceptualEncoder,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7472_6169_6e));
    let clip = Some(config.clip_norm);
    let mut opt_s = Optimizer::new(config.optimizer, config.learning_rate, clip, &sender.params);
    let mut opt_r = Optimizer::new(config.optimizer, config.learning_rate, clip, &receiver.params);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut totals = BatchStats::default();
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let fraction = config.budget_levels[rng.random_range(0..config.budget_levels.len())];
            let batch: Vec<&Record> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (gs, gr, stats) = batch_gradients(&sender, &receiver, encoder, &batch, config.a, fraction, Objective::Total)?;
            check_finite(&stats, epoch, bi)?;
            // one optimiser over both agents: clip by the joint gradient norm
            let joint = (gs.global_norm().powi(2) + gr.global_norm().powi(2)).sqrt();
            let f = if joint > config.clip_norm { config.clip_norm / joint } else { 1.0 };
            opt_s.step(&mut sender.params, &gs.map(|v| v * f));
            opt_r.step(&mut receiver.params, &gr.map(|v| v * f));
            if !(sender.params.is_finite() && receiver.params.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: "parameters became non-finite".into(),
                });
            }
            totals.absorb(&stats);
        }
        let m = summarize(epoch, &totals);
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome {
        sender,
        receiver,
        history,
    })
}

/// Trains the receiver alone on reference sketches of the training images with the
/// answer loss only.
pub fn pretrain_receiver(
    config: &TrainConfig,
    dataset: &Dataset,
    mut receiver: Receiver,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Receiver, Vec<EpochMetrics>)> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let references: Vec<Sketch> = dataset.train.iter().map(|r| reference_sketch(&r.image())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7072_6574));
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, Some(config.clip_norm), &receiver.params);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut totals = BatchStats::default();
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads = receiver.params.zeros_like();
            let mut stats = BatchStats::default();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let rec = &dataset.train[i];
                let mut g = Graph::new();
                let bp = receiver.params.bind(&mut g);
                let s = g.constant(references[i].to_tensor());
                let scores = receiver.forward(&mut g, &bp, s, &rec.qa.question)?;
                let l1 = loss_answer(&mut g, scores, &rec.qa.target())?;
                let gr = g.backward(l1)?;
                grads.accumulate(&gr, &bp, scale);
                let v = g.value(l1).item();
                stats.absorb(&BatchStats {
                    loss: v,
                    l1: v,
                    l2: 0.0,
                    correct: (predict(g.value(scores).data()) == rec.qa.answer) as usize,
                    count: 1,
                });
            }
            check_finite(&stats, epoch, bi)?;
            opt.step(&mut receiver.params, &grads);
            totals.absorb(&stats);
        }
        let m = summarize(epoch, &totals);
        on_epoch(&m);
        history.push(m);
    }
    Ok((receiver, history))
}

/// Fits the sender's draft Ŝ to the reference sketch pixelwise (mean squared
/// error over the whole canvas, no selection) along the feature path of blend
/// `config.a`, sampling a budget level per batch. Reported `loss` is the MSE;
/// accuracy is not measured.
pub fn pretrain_sender(
    config: &TrainConfig,
    dataset: &Dataset,
    mut sender: Sender,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Sender, Vec<EpochMetrics>)> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x736b_6574));
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, Some(config.clip_norm), &sender.params);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut totals = BatchStats::default();
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let fraction = config.budget_levels[rng.random_range(0..config.budget_levels.len())];
            let mut grads = sender.params.zeros_like();
            let mut stats = BatchStats::default();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let image = dataset.train[i].image();
                let reference = reference_sketch(&image);
                let mut g = Graph::new();
                let bp = sender.params.bind(&mut g);
                let s_hat = sender.forward(&mut g, &bp, &image, config.a, fraction)?;
                let target = g.constant(reference.to_tensor());
                let d = g.squared_distance(s_hat, target)?;
                let mse = g.scale(d, 1.0 / reference.data().len() as f64);
                let gr = g.backward(mse)?;
                grads.accumulate(&gr, &bp, scale);
                let v = g.value(mse).item();
                stats.absorb(&BatchStats {
                    loss: v,
                    l1: 0.0,
                    l2: 0.0,
                    correct: 0,
                    count: 1,
                });
            }
            check_finite(&stats, epoch, bi)?;
            opt.step(&mut sender.params, &grads);
            totals.absorb(&stats);
        }
        let m = summarize(epoch, &totals);
        on_epoch(&m);
        history.push(m);
    }
    Ok((sender, history))
}

/// A trained variant as persisted on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub a: f64,
    pub seed: u64,
    pub epoch: usize,
    pub sender: Sender,
    pub receiver: Receiver,
    pub perceptual: PerceptualEncoder,
    pub history: Vec<EpochMetrics>,
}

const MANIFEST: &str = "manifest.txt";
const HISTORY_HEADER: &str = "epoch,loss,l1,l2,accuracy";

impl Checkpoint {
    /// Writes `sender/`, `receiver/`, `perceptual/` tensor blobs and `manifest.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.sender.params.save(&dir.join("sender"))?;
        self.receiver.params.save(&dir.join("receiver"))?;
        self.perceptual.params.save(&dir.join("perceptual"))?;
        let (h, w) = self.sender.canvas();
        let rc = &self.receiver.config;
        let mut m = String::new();
        let _ = writeln!(m, "a={}", self.a);
        let _ = writeln!(m, "seed={}", self.seed);
        let _ = writeln!(m, "epoch={}", self.epoch);
        let _ = writeln!(m, "height={h}");
        let _ = writeln!(m, "width={w}");
        let _ = writeln!(m, "grid={}", rc.grid);
        let _ = writeln!(m, "max_question_len={}", rc.max_question_len);
        let _ = writeln!(m, "perceptual_seed={}", self.perceptual.seed);
        let _ = writeln!(m, "sender_digest={}", self.sender.params.digest());
        let _ = writeln!(m, "receiver_digest={}", self.receiver.params.digest());
        let _ = writeln!(m, "[history]");
        let _ = writeln!(m, "{HISTORY_HEADER}");
        for e in &self.history {
            let _ = writeln!(m, "{},{},{},{},{}", e.epoch, e.loss, e.l1, e.l2, e.accuracy);
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, m).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (head, hist) = text
            .split_once("[history]\n")
            .ok_or_else(|| Error::Format(format!("{}: missing [history] section", path.display())))?;
        let mut kv = std::collections::BTreeMap::new();
        for line in head.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("{}: bad line {line:?}", path.display())))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn field<T: std::str::FromStr>(kv: &std::collections::BTreeMap<String, String>, k: &str, path: &Path) -> Result<T> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: missing or bad {k}", path.display())))
        }
        let a: f64 = field(&kv, "a", &path)?;
        let seed: u64 = field(&kv, "seed", &path)?;
        let epoch: usize = field(&kv, "epoch", &path)?;
        let height: usize = field(&kv, "height", &path)?;
        let width: usize = field(&kv, "width", &path)?;
        let rc = ReceiverConfig {
            height,
            width,
            grid: field(&kv, "grid", &path)?,
            max_question_len: field(&kv, "max_question_len", &path)?,
        };
        let pseed: u64 = field(&kv, "perceptual_seed", &path)?;
        let sender_t = Sender::new(0, height, width)?;
        let sender = Sender::with_params(ParamSet::load_like(&sender_t.params, &dir.join("sender"))?, height, width)?;
        let receiver_t = Receiver::new(0, rc)?;
        let receiver = Receiver::with_params(ParamSet::load_like(&receiver_t.params, &dir.join("receiver"))?, rc)?;
        let perc_t = PerceptualEncoder::new(pseed, height, width)?;
        let perceptual = PerceptualEncoder::with_params(
            ParamSet::load_like(&perc_t.params, &dir.join("perceptual"))?,
            pseed,
            height,
            width,
        )?;
        let mut rdr = csv::Reader::from_reader(hist.as_bytes());
        let mut history = Vec::new();
        for row in rdr.deserialize() {
            let e: EpochMetrics = row.map_err(|e| Error::Format(format!("{}: history: {e}", path.display())))?;
            history.push(e);
        }
        Ok(Self {
            a,
            seed,
            epoch,
            sender,
            receiver,
            perceptual,
            history,
        })
    }

    /// Parameters as they will read back from disk.
    pub fn rounded(mut self) -> Self {
        self.sender.params = self.sender.params.round_to_f32();
        self.receiver.params = self.receiver.params.round_to_f32();
        self.perceptual.params = self.perceptual.params.round_to_f32();
        self
    }
}
