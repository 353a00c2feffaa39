//! Acceptance criteria P1–P10, one line each. `ISQA_ACCEPTANCE=P1,P4` runs a subset.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isqa_core::autodiff::{Graph, Tensor, Var};
use isqa_core::evaluation::{interpretability_samples, Interpretability, REFERENCE_BUDGET};
use isqa_core::feedback::{channel_weights, feedback_masks, proposal_weights, FeedbackBox, FeedbackSketch};
use isqa_core::params::ParamSet;
use isqa_core::protocol::{budget_schedule, run_episode, EpisodeConfig, SchedulePolicy};
use isqa_core::receiver::{Proposal, Receiver, ReceiverConfig};
use isqa_core::sender::{fuse, select_pixels, Sender, SketchState, FEATURE_CHANNELS};
use isqa_core::shapeworld::{Category, Dataset, Record, SceneConfig};
use isqa_core::sketch::{Sketch, SparseSketch};
use isqa_core::training::{
    loss_answer, pretrain_receiver, pretrain_sender, total_loss, train_variant, Checkpoint, PerceptualEncoder,
    TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn small_receiver(seed: u64) -> Receiver {
    let cfg = ReceiverConfig {
        height: 16,
        width: 16,
        grid: 8,
        ..ReceiverConfig::default()
    };
    Receiver::new(seed, cfg).unwrap()
}

fn decode_sketch(hex_payload: &str) -> SparseSketch {
    SparseSketch::from_bytes(&hex::decode(hex_payload).unwrap()).unwrap()
}

fn floor_cap(b: f64, n: usize) -> usize {
    // integer pixels under b·N, guarding values that sit a hair below an integer
    let exact = b * n as f64;
    let r = exact.round();
    if (exact - r).abs() < 1e-9 { r as usize } else { exact.floor() as usize }
}

// P1 ---------------------------------------------------------------------------

fn p1() -> Outcome {
    const EPISODES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let senders: Vec<Sender> = (0..4).map(|s| Sender::new(500 + s, 16, 16).unwrap()).collect();
    let receivers: Vec<Receiver> = (0..4).map(|s| small_receiver(600 + s)).collect();
    let questions = Dataset::generate(7, 0, 64, &SceneConfig::default()).unwrap().eval;
    let n = 16 * 16;
    let mut violations = Vec::new();
    for e in 0..EPISODES {
        let rounds = rng.random_range(1..=3);
        let budgets: Vec<f64> = if rng.random_bool(0.5) {
            let total = rng.random_range(0.001..=1.0);
            let policy = if rng.random_bool(0.5) { SchedulePolicy::Even } else { SchedulePolicy::Front };
            budget_schedule(total, rounds, policy).unwrap()
        } else {
            let mut left = 1.0;
            (0..rounds)
                .map(|_| {
                    let b = rng.random_range(0.0..=left * 0.9);
                    left -= b;
                    b
                })
                .collect()
        };
        let mut cfg = EpisodeConfig::new(budgets.clone(), rng.random_range(0.0..=1.0));
        cfg.feedback.h_max = rng.random_range(1..=5);
        cfg.feedback.l = rng.random_range(1..=3);
        if cfg.validate().is_err() {
            continue;
        }
        let image = rand_tensor(&mut rng, &[16, 16, 3], 0.0, 1.0);
        let qa = &questions[rng.random_range(0..questions.len())].qa;
        let s = &senders[rng.random_range(0..senders.len())];
        let r = &receivers[rng.random_range(0..receivers.len())];
        let t = run_episode(&image, qa, s, r, &cfg).unwrap();
        let mut recomputed = 0usize;
        for (i, round) in t.rounds.iter().enumerate() {
            let pixels = decode_sketch(&round.sketch).len();
            let boxes = round
                .feedback
                .as_ref()
                .map_or(0, |f| FeedbackSketch::from_bytes(&hex::decode(f).unwrap(), 16, 16).unwrap().len());
            if pixels != round.pixels || boxes != round.boxes {
                violations.push(format!("episode {e} round {i}: trace disagrees with payload"));
            }
            if pixels > floor_cap(budgets[i], n) {
                violations.push(format!("episode {e} round {i}: {pixels} pixels over cap"));
            }
            recomputed += pixels + 5 * boxes;
        }
        if recomputed != t.ledger.total {
            violations.push(format!("episode {e}: ledger {} vs recomputed {recomputed}", t.ledger.total));
        }
    }
    outcome(
        violations.is_empty(),
        format!("{EPISODES} episodes, {} violations {}", violations.len(), violations.first().cloned().unwrap_or_default()),
    )
}

// P2 ---------------------------------------------------------------------------

fn p2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let n = h * w;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..=5) as f64 / 5.0).collect();
        let s_hat = Sketch::new(h, w, s.clone()).unwrap();
        let sent: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let boxes: Vec<FeedbackBox> = (0..rng.random_range(0..4))
            .map(|_| {
                let (x1, y1) = (rng.random_range(0..w), rng.random_range(0..h));
                FeedbackBox {
                    x1: x1 as u16,
                    y1: y1 as u16,
                    x2: rng.random_range(x1..w) as u16,
                    y2: rng.random_range(y1..h) as u16,
                    weight: rng.random_range(0..=4) as f32 / 4.0,
                }
            })
            .collect();
        let feedback = (!boxes.is_empty() && rng.random_bool(0.7)).then(|| FeedbackSketch {
            height: h,
            width: w,
            boxes: boxes.clone(),
        });
        let budget = rng.random_range(0..=n) as f64 / n as f64;

        // oracle: explicit per-pixel weight, full sort, take the cap
        let mut ranked: Vec<(f64, usize)> = (0..n)
            .filter(|&i| !sent[i])
            .map(|i| {
                let weight = match &feedback {
                    None => 1.0,
                    Some(fb) => fb
                        .boxes
                        .iter()
                        .filter(|b| {
                            let (r, c) = (i / w, i % w);
                            (b.y1 as usize..=b.y2 as usize).contains(&r) && (b.x1 as usize..=b.x2 as usize).contains(&c)
                        })
                        .map(|b| b.weight as f64)
                        .sum(),
                };
                ((1.0 - s[i]) * weight, i)
            })
            .filter(|&(v, _)| v > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = ranked.into_iter().take(floor_cap(budget, n)).map(|(_, i)| i).collect();
        expect.sort();

        let mut state = SketchState::new(h, w);
        state.sent_mask = sent.clone();
        let (round, p) = select_pixels(&s_hat, feedback.as_ref(), budget, &mut state).unwrap();
        let got = round.activated();
        if got != expect || p != expect.len() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 canvases, {mismatches} mismatches"))
}

// P3 ---------------------------------------------------------------------------

const EPS: f64 = 1e-6;

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= 1e-3 * n.abs().max(a.abs()) + 1e-7
}

/// Worst violation of taped vs central-difference gradients of `f` at `x`, if any.
fn fd_check(x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) -> Option<String> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let root = f(&mut g, v);
    let analytic = g.backward(root).unwrap().get(v);
    let eval = |p: Tensor| {
        let mut g = Graph::new();
        let v = g.input(p);
        let r = f(&mut g, v);
        g.value(r).item()
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += EPS;
        let mut minus = x.clone();
        minus.data_mut()[i] -= EPS;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * EPS);
        if !close(analytic.data()[i], numeric) {
            return Some(format!("entry {i}: {} vs {numeric}", analytic.data()[i]));
        }
    }
    None
}

fn weighted(g: &mut Graph, y: Var, r: &Tensor) -> Var {
    let r = g.constant(r.reshape(g.shape(y)).unwrap());
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 };
        }
    }
    t
}

/// Every differentiable op once, each at a fresh random point.
fn op_suite(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Option<String>)> {
    let mut out = Vec::new();
    let a34 = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let b34 = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let b42 = rand_tensor(rng, &[4, 2], -1.0, 1.0);
    let r32 = rand_tensor(rng, &[3, 2], -1.0, 1.0);
    let r34 = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let r43 = rand_tensor(rng, &[4, 3], -1.0, 1.0);
    out.push(("matmul", fd_check(&a34, &|g, x| {
        let b = g.constant(b42.clone());
        let y = g.matmul(x, b).unwrap();
        weighted(g, y, &r32)
    })));
    let img = rand_tensor(rng, &[2, 6, 6], -1.0, 1.0);
    let k = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let co = (6 + 2 * pad - 3) / stride + 1;
    let rc = rand_tensor(rng, &[3, co, co], -1.0, 1.0);
    out.push(("conv2d", fd_check(&img, &|g, x| {
        let kk = g.constant(k.clone());
        let y = g.conv2d(x, kk, stride, pad).unwrap();
        weighted(g, y, &rc)
    })));
    out.push(("conv2d/kernel", fd_check(&k, &|g, kk| {
        let x = g.constant(img.clone());
        let y = g.conv2d(x, kk, stride, pad).unwrap();
        weighted(g, y, &rc)
    })));
    let small = rand_tensor(rng, &[2, 3, 3], -1.0, 1.0);
    let dk = rand_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0);
    let rd = rand_tensor(rng, &[3, 6, 6], -1.0, 1.0);
    out.push(("deconv2d", fd_check(&small, &|g, x| {
        let kk = g.constant(dk.clone());
        let y = g.deconv2d(x, kk, 2).unwrap();
        weighted(g, y, &rd)
    })));
    out.push(("deconv2d/kernel", fd_check(&dk, &|g, kk| {
        let x = g.constant(small.clone());
        let y = g.deconv2d(x, kk, 2).unwrap();
        weighted(g, y, &rd)
    })));
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        out.push((name, fd_check(&a34, &|g, x| {
            let b = g.constant(b34.clone());
            let y = match op {
                0 => g.add(x, b),
                1 => g.sub(b, x),
                _ => g.mul(x, b),
            }
            .unwrap();
            weighted(g, y, &r34)
        })));
    }
    let kinked = away_from_zero(a34.clone());
    for (name, op) in [("relu", 0), ("sigmoid", 1), ("tanh", 2), ("scale", 3), ("add_scalar", 4), ("one_minus", 5)] {
        out.push((name, fd_check(&kinked, &|g, x| {
            let y = match op {
                0 => g.relu(x),
                1 => g.sigmoid(x),
                2 => g.tanh(x),
                3 => g.scale(x, -1.7),
                4 => g.add_scalar(x, 0.3),
                _ => g.one_minus(x),
            };
            weighted(g, y, &r34)
        })));
    }
    out.push(("mean", fd_check(&a34, &|g, x| {
        let y = g.mul(x, x).unwrap();
        g.mean(y)
    })));
    out.push(("squared_distance", fd_check(&a34, &|g, x| {
        let b = g.constant(b34.clone());
        g.squared_distance(x, b).unwrap()
    })));
    out.push(("reshape+transpose", fd_check(&a34, &|g, x| {
        let y = g.reshape(x, &[4, 3]).unwrap();
        let y = g.transpose(y).unwrap();
        let y = g.transpose(y).unwrap();
        weighted(g, y, &r43)
    })));
    let rcat = rand_tensor(rng, &[6, 4], -1.0, 1.0);
    out.push(("concat", fd_check(&a34, &|g, x| {
        let b = g.constant(b34.clone());
        let y = g.concat(&[x, b]).unwrap();
        weighted(g, y, &rcat)
    })));
    out.push(("softmax_rows", fd_check(&a34, &|g, x| {
        let y = g.softmax_rows(x).unwrap();
        weighted(g, y, &r34)
    })));
    let rows = [2usize, 0, 2, 1];
    let r44 = rand_tensor(rng, &[4, 4], -1.0, 1.0);
    out.push(("gather_rows", fd_check(&a34, &|g, x| {
        let y = g.gather_rows(x, &rows).unwrap();
        weighted(g, y, &r44)
    })));
    let vec5 = rand_tensor(rng, &[5], -1.0, 1.0);
    out.push(("select", fd_check(&vec5, &|g, x| {
        let y = g.select(x, &[4, 1, 1]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.sum(y)
    })));
    let pool_in = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
    let rp = rand_tensor(rng, &[2, 2, 2], -1.0, 1.0);
    out.push(("avg_pool2d", fd_check(&pool_in, &|g, x| {
        let y = g.avg_pool2d(x, 2).unwrap();
        weighted(g, y, &rp)
    })));
    let probs = rand_tensor(rng, &[5], 0.05, 0.95);
    let target: Vec<f64> = (0..5).map(|i| (i % 2) as f64).collect();
    out.push(("bce", fd_check(&probs, &|g, x| g.bce(x, &target).unwrap())));
    let other = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    out.push(("cosine", fd_check(&a34, &|g, x| {
        let b = g.constant(other.clone());
        g.cosine(x, b).unwrap()
    })));
    out
}


fn words(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_string).collect()
}

/// β from the receiver against central differences that shift a whole channel row of F.
fn beta_check(rng: &mut ChaCha8Rng, seed: u64) -> Option<String> {
    let r = small_receiver(seed);
    let sketch = Sketch::new(16, 16, (0..256).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
    let q = words(["how many circle", "is there a square", "what shape is the largest object"][rng.random_range(0..3)]);
    let l = rng.random_range(1..=3);
    let mut g = Graph::new();
    let bp = r.params.bind_frozen(&mut g);
    let (_, f) = r.encode_vision(&mut g, &bp, &sketch).unwrap();
    let f0 = g.value(f).clone();
    let leaf = g.input(f0.clone());
    let lang = r.encode_question(&mut g, &bp, &q).unwrap();
    let out = r.answer(&mut g, &bp, lang, leaf).unwrap();
    let scores = g.value(out).data().to_vec();
    let beta = channel_weights(&mut g, out, leaf, l).unwrap();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let top = &order[..l];
    let [c, j] = f0.shape()[..] else { unreachable!() };
    let target = |f: Tensor| {
        let mut g = Graph::new();
        let bp = r.params.bind_frozen(&mut g);
        let fv = g.constant(f);
        let lang = r.encode_question(&mut g, &bp, &q).unwrap();
        let out = r.answer(&mut g, &bp, lang, fv).unwrap();
        top.iter().map(|&t| g.value(out).data()[t]).sum::<f64>()
    };
    for k in 0..c {
        let shift = |d: f64| {
            let mut t = f0.clone();
            for v in &mut t.data_mut()[k * j..(k + 1) * j] {
                *v += d;
            }
            t
        };
        let numeric = (target(shift(EPS)) - target(shift(-EPS))) / (2.0 * EPS);
        if !close(beta[k], numeric) {
            return Some(format!("beta[{k}] {} vs {numeric}", beta[k]));
        }
    }
    None
}

/// Parameter gradients of the receiver's answer loss and of a weighted sum of the
/// sender's draft, at a few random entries.
fn model_check(rng: &mut ChaCha8Rng, seed: u64) -> Option<String> {
    let receiver = small_receiver(seed);
    let sender = Sender::new(seed + 1, 16, 16).unwrap();
    let sketch = Sketch::new(16, 16, (0..256).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
    let image = rand_tensor(rng, &[16, 16, 3], 0.0, 1.0);
    let q = words("is there a circle");
    let mut target = vec![0.0; isqa_core::shapeworld::ANSWERS.len()];
    let hot = rng.random_range(0..target.len());
    target[hot] = 1.0;
    let a = rng.random_range(0.0..=1.0);
    let fraction = [0.05, 0.1, 0.3, 1.0][rng.random_range(0..4)];
    let weights = rand_tensor(rng, &[16, 16], -1.0, 1.0);

    let recv_loss = |p: &ParamSet, analytic: bool| -> (f64, Option<ParamSet>) {
        let r = Receiver::with_params(p.clone(), receiver.config).unwrap();
        let mut g = Graph::new();
        let bp = r.params.bind(&mut g);
        let s = g.constant(sketch.to_tensor());
        let scores = r.forward(&mut g, &bp, s, &q).unwrap();
        let l = loss_answer(&mut g, scores, &target).unwrap();
        let grads = analytic.then(|| {
            let gr = g.backward(l).unwrap();
            let mut out = p.zeros_like();
            out.accumulate(&gr, &bp, 1.0);
            out
        });
        (g.value(l).item(), grads)
    };
    let send_out = |p: &ParamSet, analytic: bool| -> (f64, Option<ParamSet>) {
        let s = Sender::with_params(p.clone(), 16, 16).unwrap();
        let mut g = Graph::new();
        let bp = s.params.bind(&mut g);
        let y = s.forward(&mut g, &bp, &image, a, fraction).unwrap();
        let root = weighted(&mut g, y, &weights);
        let grads = analytic.then(|| {
            let gr = g.backward(root).unwrap();
            let mut out = p.zeros_like();
            out.accumulate(&gr, &bp, 1.0);
            out
        });
        (g.value(root).item(), grads)
    };
    let cases: [(&ParamSet, &dyn Fn(&ParamSet, bool) -> (f64, Option<ParamSet>)); 2] =
        [(&receiver.params, &recv_loss), (&sender.params, &send_out)];
    for (params, f) in cases {
        let grads = f(params, true).1.unwrap();
        let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
        for _ in 0..6 {
            let name = &names[rng.random_range(0..names.len())];
            let i = rng.random_range(0..params.get(name).unwrap().numel());
            let at = |d: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += d;
                f(&p, false).0
            };
            let numeric = (at(EPS) - at(-EPS)) / (2.0 * EPS);
            let analytic = grads.get(name).unwrap().data()[i];
            if !close(analytic, numeric) {
                return Some(format!("{name}[{i}]: {analytic} vs {numeric}"));
            }
        }
    }
    None
}

fn p3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    let mut checks = 0;
    for m in 0..50u64 {
        if let Some(e) = beta_check(&mut rng, 700 + m) {
            failures.push(format!("instance {m} channel weights: {e}"));
        }
        if let Some(e) = model_check(&mut rng, 800 + 2 * m) {
            failures.push(format!("instance {m} parameters: {e}"));
        }
        for (op, r) in op_suite(&mut rng) {
            checks += 1;
            if let Some(e) = r {
                failures.push(format!("instance {m} {op}: {e}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "50 instances: channel weights, 12 parameter entries and {} op checks each; {} failures {}",
            checks / 50,
            failures.len(),
            failures.first().cloned().unwrap_or_default()
        ),
    )
}

// P4 ---------------------------------------------------------------------------

fn p4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut problems = Vec::new();
    for t in 0..200 {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(2..12), rng.random_range(2..12));
        let proposals: Vec<Proposal> = (0..rng.random_range(1..6))
            .map(|_| {
                let (x1, y1) = (rng.random_range(0..w), rng.random_range(0..h));
                Proposal::from_box(x1, y1, rng.random_range(x1..w), rng.random_range(y1..h), h, w)
            })
            .collect();
        let j = proposals.len();
        let beta: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = rand_tensor(&mut rng, &[c, j], -1.0, 1.0);
        let wts = proposal_weights(&beta, &f).unwrap();
        for (jj, &wv) in wts.iter().enumerate() {
            let dot: f64 = (0..c).map(|k| beta[k] * f.data()[k * j + jj]).sum();
            if wv < 0.0 || (wv - dot.max(0.0)).abs() > 1e-12 {
                problems.push(format!("trial {t}: w[{jj}] = {wv}, expected ReLU({dot})"));
            }
        }
        let dense = feedback_masks(&wts, &proposals, h, w).unwrap();
        for r in 0..h {
            for col in 0..w {
                let mut v = 0.0;
                for (p, wv) in proposals.iter().zip(&wts) {
                    let inside = (p.x1..=p.x2).contains(&col) && (p.y1..=p.y2).contains(&r);
                    if inside {
                        v += wv / (((p.x2 - p.x1 + 1) * (p.y2 - p.y1 + 1)) as f64);
                    }
                }
                if dense[r * w + col] != v {
                    problems.push(format!("trial {t}: H({r},{col}) = {} vs {v}", dense[r * w + col]));
                }
            }
        }
        let boxes = rng.random_range(0..=5);
        let fb = FeedbackSketch {
            height: h,
            width: w,
            boxes: (0..boxes)
                .map(|_| FeedbackBox {
                    x1: 0,
                    y1: 0,
                    x2: (w - 1) as u16,
                    y2: (h - 1) as u16,
                    weight: 0.5,
                })
                .collect(),
        };
        if fb.cost() != 5 * boxes {
            problems.push(format!("trial {t}: {boxes} boxes cost {}", fb.cost()));
        }
    }
    // doubling a proposal's area halves its per-pixel contribution
    for w in [0.3, 1.0, 7.5] {
        let small = Proposal::from_box(0, 0, 3, 3, 8, 8);
        let large = Proposal::from_box(0, 0, 7, 3, 8, 8);
        let hs = feedback_masks(&[w], &[small], 8, 8).unwrap();
        let hl = feedback_masks(&[w], &[large], 8, 8).unwrap();
        if hl[0] != hs[0] / 2.0 {
            problems.push(format!("weight {w}: {} is not half of {}", hl[0], hs[0]));
        }
    }
    // the ledger charges 5 per box received
    let receiver = small_receiver(9);
    let sender = Sender::new(9, 16, 16).unwrap();
    let qa = Dataset::generate(3, 0, 1, &SceneConfig::default()).unwrap().eval[0].qa.clone();
    for h_max in 1..=5 {
        let mut cfg = EpisodeConfig::new(vec![0.1, 0.1], 0.5);
        cfg.feedback.h_max = h_max;
        let t = run_episode(&rand_tensor(&mut rng, &[16, 16, 3], 0.0, 1.0), &qa, &sender, &receiver, &cfg).unwrap();
        let boxes: usize = t.rounds.iter().map(|r| r.boxes).sum();
        if t.ledger.total != t.ledger.pixel_total() + 5 * boxes || t.ledger.box_total() != boxes {
            problems.push(format!("h_max {h_max}: ledger {:?}", t.ledger));
        }
    }
    outcome(
        problems.is_empty(),
        format!("200 random proposal sets, {} problems {}", problems.len(), problems.first().cloned().unwrap_or_default()),
    )
}

// P5 ---------------------------------------------------------------------------

fn p5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (l1, l2, a) = (rng.random_range(0.0..20.0), rng.random_range(-1.0..20.0), rng.random_range(0.0..=1.0));
        worst = worst.max((total_loss(l1, l2, a) - (l1 + 10.0 * a * l2)).abs());
    }
    let enc = PerceptualEncoder::new(7, 64, 64).unwrap();
    let mut self_dist: f64 = 0.0;
    for _ in 0..10 {
        let s = Sketch::new(64, 64, (0..4096).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        self_dist = self_dist.max((enc.distance(&s, &s).unwrap() + 1.0).abs());
    }
    let mut bce: f64 = 0.0;
    for k in 0..isqa_core::shapeworld::ANSWERS.len() {
        let mut t = vec![0.0; isqa_core::shapeworld::ANSWERS.len()];
        t[k] = 1.0;
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_vec(t.clone()));
        let l = loss_answer(&mut g, s, &t).unwrap();
        bce = bce.max(g.value(l).item());
    }
    let pass = worst <= 1e-9 && self_dist <= 1e-9 && bce < 1e-5;
    outcome(
        pass,
        format!("max |L - (L1 + 10a L2)| = {worst:.1e}; max |L2(S,S) + 1| = {self_dist:.1e}; max perfect BCE = {bce:.1e}"),
    )
}

// P6 ---------------------------------------------------------------------------

fn p6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut broken = 0;
    let trials = 100;
    for t in 0..trials {
        let sender = Sender::new(t, 16, 16).unwrap();
        let shape = [FEATURE_CHANNELS, 4, 4];
        let geo = rand_tensor(&mut rng, &shape, 0.0, 1.0);
        let prag_a = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let prag_b = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let geo_b = rand_tensor(&mut rng, &shape, 0.0, 1.0);
        let run = |geo: &Tensor, prag: &Tensor, a: f64| {
            let mut g = Graph::new();
            let bp = sender.params.bind_frozen(&mut g);
            let x = g.constant(geo.clone());
            let y = g.constant(prag.clone());
            let out = fuse(&mut g, &bp, x, y, a).unwrap();
            g.value(out).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        if run(&geo, &prag_a, 1.0) != run(&geo, &prag_b, 1.0) {
            broken += 1;
        }
        if run(&geo, &prag_a, 0.0) != run(&geo_b, &prag_a, 0.0) {
            broken += 1;
        }
    }
    outcome(broken == 0, format!("{trials} senders x 2 endpoints, {broken} leaks"))
}

// P7–P9 ------------------------------------------------------------------------

const DATA_SEED: u64 = 1;

struct Trained {
    dataset: Dataset,
    encoder: PerceptualEncoder,
    receiver: Receiver,
}

fn majority_baseline(ds: &Dataset) -> f64 {
    let mut counts: HashMap<(Category, usize), usize> = HashMap::new();
    for r in &ds.train {
        *counts.entry((r.qa.category, r.qa.answer)).or_default() += 1;
    }
    let mut best: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for ((c, ans), n) in counts {
        let e = best.entry(c as u8).or_insert((usize::MAX, 0));
        if n > e.1 || (n == e.1 && ans < e.0) {
            *e = (ans, n);
        }
    }
    let hits = ds.eval.iter().filter(|r| best.get(&(r.qa.category as u8)).map(|b| b.0) == Some(r.qa.answer)).count();
    100.0 * hits as f64 / ds.eval.len() as f64
}

fn accuracy(ck: &Checkpoint, records: &[Record], budget: f64, rounds: usize) -> f64 {
    let cfg = EpisodeConfig::new(budget_schedule(budget, rounds, SchedulePolicy::Even).unwrap(), ck.a);
    let correct = records
        .iter()
        .filter(|r| run_episode(&r.image(), &r.qa, &ck.sender, &ck.receiver, &cfg).unwrap().correct)
        .count();
    100.0 * correct as f64 / records.len() as f64
}

fn pretrain_config(seed: u64, a: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        a,
        learning_rate: 3e-3,
        batch_size: 8,
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

/// Sender warm-up then joint training from the shared pretrained receiver.
fn train_one(t: &Trained, train: &Dataset, seed: u64, a: f64, warm_epochs: usize, epochs: usize) -> Checkpoint {
    let sender = Sender::new(1000 + seed, 64, 64).unwrap();
    let (sender, _) = pretrain_sender(&pretrain_config(seed, a, warm_epochs), train, sender, |_| {}).unwrap();
    let cfg = TrainConfig {
        a,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let out = train_variant(&cfg, train, sender, t.receiver.clone(), &t.encoder, |m| {
        eprintln!("  seed {seed} a {a} epoch {} loss {:.4} accuracy {:.1}", m.epoch, m.loss, m.accuracy)
    })
    .unwrap();
    Checkpoint {
        a,
        seed,
        epoch: epochs,
        sender: out.sender,
        receiver: out.receiver,
        perceptual: t.encoder.clone(),
        history: out.history,
    }
}

fn prepare() -> Trained {
    let dataset = Dataset::generate(DATA_SEED, 5000, 1000, &SceneConfig::default()).unwrap();
    let encoder = PerceptualEncoder::new(7, 64, 64).unwrap();
    let receiver = Receiver::new(2, ReceiverConfig::default()).unwrap();
    let (receiver, _) = pretrain_receiver(&pretrain_config(DATA_SEED, 0.0, 20), &dataset, receiver, |m| {
        eprintln!("  receiver pretraining epoch {} loss {:.4} accuracy {:.1}", m.epoch, m.loss, m.accuracy)
    })
    .unwrap();
    Trained {
        dataset,
        encoder,
        receiver,
    }
}

fn p7(t: &Trained) -> Outcome {
    let ck = train_one(t, &t.dataset, 1, 0.0, 5, 20);
    let baseline = majority_baseline(&t.dataset);
    let acc = accuracy(&ck, &t.dataset.eval, REFERENCE_BUDGET, 1);
    outcome(
        acc >= baseline + 15.0,
        format!(
            "pragmatic, 20 epochs on 5000: eval accuracy {acc:.1}% at budget {REFERENCE_BUDGET}N vs baseline {baseline:.1}% + 15"
        ),
    )
}

const VARIANTS: [f64; 3] = [1.0, 0.5, 0.0];
const SEEDS: [u64; 3] = [11, 12, 13];

fn small_train(t: &Trained) -> Dataset {
    Dataset {
        train: t.dataset.train[..2000].to_vec(),
        eval: Vec::new(),
    }
}

fn p8(t: &Trained, models: &BTreeMap<(u64, u64), Checkpoint>) -> Outcome {
    let records = &t.dataset.eval[..300];
    let mut per_variant = Vec::new();
    for a in VARIANTS {
        let stats: Vec<Interpretability> = SEEDS
            .iter()
            .map(|&s| {
                let ck = &models[&(s, a.to_bits())];
                Interpretability::from_samples(&interpretability_samples(ck, records, &t.encoder, REFERENCE_BUDGET).unwrap())
                    .unwrap()
            })
            .collect();
        let k = stats.len() as f64;
        let mean = stats.iter().map(|s| s.mean).sum::<f64>() / k;
        let se = stats.iter().map(|s| s.std_error.powi(2)).sum::<f64>().sqrt() / k;
        per_variant.push((a, mean, se));
    }
    let gap_ok = |x: (f64, f64, f64), y: (f64, f64, f64)| y.1 - x.1 > (x.2.powi(2) + y.2.powi(2)).sqrt();
    let pass = gap_ok(per_variant[0], per_variant[1]) && gap_ok(per_variant[1], per_variant[2]);
    let text: Vec<String> = per_variant
        .iter()
        .map(|(a, m, se)| format!("{} {m:.4}±{se:.4}", isqa_core::evaluation::variant_name(*a)))
        .collect();
    outcome(pass, format!("perceptual distance over 3 seeds: {}", text.join(" < ")))
}

fn p9(t: &Trained, models: &BTreeMap<(u64, u64), Checkpoint>) -> Outcome {
    const BAND: [f64; 2] = [0.1, 0.2];
    const HIGH: f64 = 0.5;
    let records = &t.dataset.eval[..1000];
    let mut holds = 0;
    let mut gaps: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &s in &SEEDS {
        let ck = &models[&(s, 0.5f64.to_bits())];
        let gap = |b: f64| accuracy(ck, records, b, 2) - accuracy(ck, records, b, 1);
        let band: Vec<f64> = BAND.iter().map(|&b| gap(b)).collect();
        let high = gap(HIGH);
        let band_mean = band.iter().sum::<f64>() / band.len() as f64;
        if band.iter().all(|&g| g >= 0.0) && band_mean > high {
            holds += 1;
        }
        for (b, g) in BAND.iter().chain([HIGH].iter()).zip(band.iter().chain([high].iter())) {
            gaps.entry(b.to_bits()).or_default().push(*g);
        }
    }
    let mean_gap = |b: f64| gaps[&b.to_bits()].iter().sum::<f64>() / SEEDS.len() as f64;
    outcome(
        holds >= 2,
        format!(
            "prageo two-round minus one-round accuracy, mean of 3 seeds: {:+.1} at 0.1N, {:+.1} at 0.2N, {:+.1} at 0.5N; holds in {holds}/3 seeds",
            mean_gap(0.1),
            mean_gap(0.2),
            mean_gap(HIGH)
        ),
    )
}

// P10 --------------------------------------------------------------------------

const TINY: &str = "seed = 5\n[data]\nn_train = 8\nn_eval = 6\n[pretrain]\nsender_epochs = 1\nbatch_size = 4\n[train]\nepochs = 1\nbatch_size = 4\n[eval]\nbudgets = [0.05, 0.3]\nrounds = [1, 2]\nepisodes = 6\n";

fn isqa(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_isqa")).args(args).env_remove("ISQA_OUT_DIR").output().unwrap();
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).trim().to_string());
    }
    let out = String::from_utf8(o.stdout).unwrap();
    out.lines()
        .find_map(|l| l.strip_prefix("digest ").map(str::to_string))
        .ok_or_else(|| "no digest line".to_string())
}

fn p10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    std::fs::write(p("tiny.toml"), TINY).unwrap();
    let cfg = p("tiny.toml");
    let run = || -> Result<Vec<(String, String, String)>, String> {
        let ck = p("ck");
        if !Path::new(&ck).exists() {
            isqa(&["train", "--config", &cfg, "--out", &ck])?;
        }
        let mut rows = Vec::new();
        for (name, extra) in [
            ("gen-data", vec![]),
            ("run-episode", vec!["--checkpoint", ck.as_str(), "--rounds", "2", "--budget", "0.1"]),
            ("eval", vec!["--checkpoint", ck.as_str()]),
        ] {
            let mut args = vec![name, "--config", &cfg];
            args.extend(extra);
            let first = isqa(&[&args[..], &["--out", &p(&format!("{name}-1"))]].concat())?;
            let second = isqa(&[&args[..], &["--out", &p(&format!("{name}-2"))]].concat())?;
            rows.push((name.to_string(), first, second));
        }
        Ok(rows)
    };
    match run() {
        Err(e) => outcome(false, format!("command failed: {e}")),
        Ok(rows) => {
            let same = rows.iter().all(|(_, a, b)| a == b);
            let text: Vec<String> =
                rows.iter().map(|(n, a, b)| format!("{n} {}", if a == b { &a[..12] } else { "differs" })).collect();
            outcome(same, format!("two runs each: {}", text.join(", ")))
        }
    }
}

// ------------------------------------------------------------------------------

fn main() {
    let selected: Option<Vec<String>> =
        std::env::var("ISQA_ACCEPTANCE").ok().map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    let wanted = |id: &str| selected.as_ref().is_none_or(|s| s.iter().any(|x| x == id));
    let mut failed = 0;
    let mut report = |id: &str, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{id} {verdict} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    };
    if wanted("P1") {
        report("P1", "budget ledger exactness", &mut p1);
    }
    if wanted("P2") {
        report("P2", "selection oracle", &mut p2);
    }
    if wanted("P3") {
        report("P3", "gradient fidelity", &mut p3);
    }
    if wanted("P4") {
        report("P4", "feedback algebra", &mut p4);
    }
    if wanted("P5") {
        report("P5", "loss identities", &mut p5);
    }
    if wanted("P6") {
        report("P6", "fusion endpoints", &mut p6);
    }
    if ["P7", "P8", "P9"].iter().any(|id| wanted(id)) {
        let start = Instant::now();
        let t = prepare();
        eprintln!("receiver pretraining took {:.0}s", start.elapsed().as_secs_f64());
        if wanted("P7") {
            report("P7", "learning signal", &mut || p7(&t));
        }
        if wanted("P8") || wanted("P9") {
            let train = small_train(&t);
            let mut models = BTreeMap::new();
            for &s in &SEEDS {
                for a in VARIANTS {
                    models.insert((s, a.to_bits()), train_one(&t, &train, s, a, 2, 3));
                }
            }
            if wanted("P8") {
                report("P8", "interpretability ordering", &mut || p8(&t, &models));
            }
            if wanted("P9") {
                report("P9", "interaction benefit", &mut || p9(&t, &models));
            }
        }
    }
    if wanted("P10") {
        report("P10", "determinism", &mut p10);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
