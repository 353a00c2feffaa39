use isqa_core::autodiff::{Graph, Tensor};
use isqa_core::feedback::{
    channel_weights, encode_feedback, feedback_masks, proposal_weights, top_answers, FeedbackBox, FeedbackConfig,
    FeedbackSketch, BOX_COST,
};
use isqa_core::receiver::{grid_proposals, Proposal, Receiver, ReceiverConfig};
use isqa_core::shapeworld::{generate_scene, reference_sketch, SceneConfig};
use isqa_core::sketch::Sketch;
use isqa_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(q: &str) -> Vec<String> {
    q.split(' ').map(str::to_string).collect()
}

fn sample_sketch(seed: u64) -> Sketch {
    let (img, _) = generate_scene(seed, &SceneConfig::default()).unwrap();
    reference_sketch(&img)
}

#[test]
fn channel_weights_match_finite_differences() {
    let recv = Receiver::new(4, ReceiverConfig::default()).unwrap();
    let q = words("how many circle");
    for l in [1, 3] {
        let mut g = Graph::new();
        let bp = recv.params.bind_frozen(&mut g);
        let (_, f) = recv.encode_vision(&mut g, &bp, &sample_sketch(1)).unwrap();
        let fv = g.value(f).clone();
        let leaf = g.input(fv.clone());
        let lang = recv.encode_question(&mut g, &bp, &q).unwrap();
        let out = recv.answer(&mut g, &bp, lang, leaf).unwrap();
        let top = top_answers(g.value(out).data(), l);
        let beta = channel_weights(&mut g, out, leaf, l).unwrap();

        // shifting a whole channel row by eps moves the target by beta_k * eps
        let target = |f: Tensor| {
            let mut g = Graph::new();
            let bp = recv.params.bind_frozen(&mut g);
            let fv = g.constant(f);
            let lang = recv.encode_question(&mut g, &bp, &q).unwrap();
            let out = recv.answer(&mut g, &bp, lang, fv).unwrap();
            top.iter().map(|&i| g.value(out).data()[i]).sum::<f64>()
        };
        let (c, j) = (fv.shape()[0], fv.shape()[1]);
        let eps = 1e-5;
        for k in 0..c {
            let shift = |s: f64| {
                let mut t = fv.clone();
                for x in &mut t.data_mut()[k * j..(k + 1) * j] {
                    *x += s;
                }
                t
            };
            let fd = (target(shift(eps)) - target(shift(-eps))) / (2.0 * eps);
            assert!((beta[k] - fd).abs() <= 1e-4 * fd.abs() + 1e-8, "l={l} k={k}: {} vs {fd}", beta[k]);
        }
    }
}

#[test]
fn linear_head_gives_proposal_count_times_row() {
    // scores = W F 1: every proposal contributes W[a, k] to the gradient
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, c, j) = (5, 4, 6);
    let w: Vec<f64> = (0..a * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f: Vec<f64> = (0..c * j).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let wv = g.constant(Tensor::new(vec![a, c], w.clone()).unwrap());
    let fv = g.input(Tensor::new(vec![c, j], f).unwrap());
    let ones = g.constant(Tensor::ones(&[j, 1]));
    let wf = g.matmul(wv, fv).unwrap();
    let s = g.matmul(wf, ones).unwrap();
    let s = g.reshape(s, &[a]).unwrap();
    let top = top_answers(g.value(s).data(), 2);
    let beta = channel_weights(&mut g, s, fv, 2).unwrap();
    for k in 0..c {
        let expect = j as f64 * top.iter().map(|&t| w[t * c + k]).sum::<f64>();
        assert!((beta[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn scores_independent_of_features_give_zero_weights() {
    let mut g = Graph::new();
    let fv = g.input(Tensor::ones(&[3, 4]));
    let s = g.constant(Tensor::from_vec(vec![0.2, 0.9, 0.4]));
    let beta = channel_weights(&mut g, s, fv, 1).unwrap();
    assert_eq!(beta, vec![0.0; 3]);
}

#[test]
fn channel_weights_reject_foreign_vars() {
    let mut g = Graph::new();
    let fv = g.input(Tensor::ones(&[3, 4]));
    let mut other = Graph::new();
    let a = other.input(Tensor::ones(&[3, 4]));
    let _ = other.input(Tensor::ones(&[3, 4]));
    let s = other.sum(a);
    let _ = g.add(fv, fv).unwrap();
    assert!(matches!(channel_weights(&mut g, s, fv, 1), Err(Error::Contract(_))));
    let s = g.sum(fv);
    assert!(matches!(channel_weights(&mut g, s, fv, 0), Err(Error::Contract(_))));
}

#[test]
fn proposal_weights_hand_examples() {
    // F columns: (1,0), (0,1), (-1,-1)
    let f = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.0, 1.0, -1.0]).unwrap();
    assert_eq!(proposal_weights(&[2.0, -1.0], &f).unwrap(), vec![2.0, 0.0, 0.0]);
    assert_eq!(proposal_weights(&[-1.0, -1.0], &f).unwrap(), vec![0.0, 0.0, 2.0]);
    assert!(matches!(proposal_weights(&[1.0], &f), Err(Error::Dimension(_))));
}

proptest! {
    #[test]
    fn perturbations_orthogonal_to_beta_leave_weights(
        seed in 0u64..1000,
        scale in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, j) = (4, 5);
        let beta: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..c * j).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bb: f64 = beta.iter().map(|b| b * b).sum();
        let rb: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
        let u: Vec<f64> = r.iter().zip(&beta).map(|(x, b)| x - rb / bb * b).collect();
        let mut g = f.clone();
        for k in 0..c {
            for jj in 0..j {
                g[k * j + jj] += scale * u[k];
            }
        }
        let w0 = proposal_weights(&beta, &Tensor::new(vec![c, j], f).unwrap()).unwrap();
        let w1 = proposal_weights(&beta, &Tensor::new(vec![c, j], g).unwrap()).unwrap();
        for (a, b) in w0.iter().zip(&w1) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relevance_canvas_matches_pixelwise_sum(
        boxes in prop::collection::vec((0usize..8, 0usize..8, 0usize..8, 0usize..8, 0.0f64..3.0), 1..6),
    ) {
        let props: Vec<Proposal> = boxes
            .iter()
            .map(|&(a, b, c, d, _)| Proposal::from_box(a.min(c), b.min(d), a.max(c), b.max(d), 8, 8))
            .collect();
        let w: Vec<f64> = boxes.iter().map(|b| b.4).collect();
        let h = feedback_masks(&w, &props, 8, 8).unwrap();
        for r in 0..8 {
            for col in 0..8 {
                let expect: f64 = props
                    .iter()
                    .zip(&w)
                    .filter(|(p, _)| (p.x1..=p.x2).contains(&col) && (p.y1..=p.y2).contains(&r))
                    .map(|(p, wj)| wj / ((p.x2 - p.x1 + 1) * (p.y2 - p.y1 + 1)) as f64)
                    .sum();
                prop_assert!((h[r * 8 + col] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wire_round_trip(
        boxes in prop::collection::vec((0u16..64, 0u16..64, 0u16..64, 0u16..64, 0.0f32..10.0), 0..8),
    ) {
        let fb = FeedbackSketch {
            height: 64,
            width: 64,
            boxes: boxes
                .into_iter()
                .map(|(a, b, c, d, w)| FeedbackBox { x1: a.min(c), y1: b.min(d), x2: a.max(c), y2: b.max(d), weight: w })
                .collect(),
        };
        let bytes = fb.to_bytes();
        prop_assert_eq!(bytes.len(), 2 + 12 * fb.len());
        prop_assert_eq!(FeedbackSketch::from_bytes(&bytes, 64, 64).unwrap(), fb);
    }
}

#[test]
fn overlapping_masks_add_up() {
    let props = vec![Proposal::from_box(0, 0, 1, 1, 4, 4), Proposal::from_box(1, 1, 3, 3, 4, 4)];
    let h = feedback_masks(&[4.0, 9.0], &props, 4, 4).unwrap();
    assert_eq!(h[0], 1.0);
    assert_eq!(h[4 + 1], 2.0);
    assert_eq!(h[3 * 4 + 3], 1.0);
    assert_eq!(h[3 * 4], 0.0);
}

#[test]
fn doubling_area_halves_density() {
    let small = feedback_masks(&[1.0], &[Proposal::from_box(0, 0, 1, 1, 4, 4)], 4, 4).unwrap();
    let big = feedback_masks(&[1.0], &[Proposal::from_box(0, 0, 3, 1, 4, 4)], 4, 4).unwrap();
    assert_eq!(big[0] * 2.0, small[0]);
}

#[test]
fn encoding_keeps_strongest_proposals() {
    let props = grid_proposals(4, 4, 2).unwrap();
    let h = feedback_masks(&[0.0, 3.0, 1.0, 3.0], &props, 4, 4).unwrap();
    let fb = encode_feedback(&h, &props, 2, 4, 4).unwrap();
    assert_eq!(fb.len(), 2);
    // equal weights keep proposal order
    assert_eq!((fb.boxes[0].x1, fb.boxes[0].y1), (2, 0));
    assert_eq!((fb.boxes[1].x1, fb.boxes[1].y1), (2, 2));
    assert_eq!(fb.boxes[0].weight, 0.75);
    assert_eq!(fb.cost(), 2 * BOX_COST);

    let all = encode_feedback(&h, &props, 5, 4, 4).unwrap();
    assert_eq!(all.len(), 3, "the zero-weight cell is dropped");
    let none = encode_feedback(&[0.0; 16], &props, 5, 4, 4).unwrap();
    assert!(none.is_empty());
    assert_eq!(none.cost(), 0);
}

#[test]
fn encoded_boxes_rasterise_to_their_weights() {
    let props = grid_proposals(4, 4, 2).unwrap();
    let h = feedback_masks(&[2.0, 0.0, 0.0, 4.0], &props, 4, 4).unwrap();
    let fb = encode_feedback(&h, &props, 5, 4, 4).unwrap();
    let map = fb.weight_map(4, 4).unwrap();
    assert_eq!(map, h);
    assert_eq!(fb.weight_at(3, 3).unwrap(), 1.0);
    assert_eq!(fb.weight_at(0, 3).unwrap(), 0.0);
    assert!(fb.weight_at(4, 0).is_err());
    assert!(matches!(fb.weight_map(8, 8), Err(Error::Dimension(_))));
}

#[test]
fn receiver_feedback_respects_h_max() {
    let recv = Receiver::new(8, ReceiverConfig::default()).unwrap();
    let cfg = FeedbackConfig { l: 2, h_max: 3 };
    let reply = recv.respond(&sample_sketch(2), &words("is there a star"), Some(&cfg)).unwrap();
    let fb = reply.feedback.unwrap();
    assert!(fb.len() <= 3);
    fb.validate().unwrap();
    let mut ws: Vec<f32> = fb.boxes.iter().map(|b| b.weight).collect();
    assert!(ws.iter().all(|&w| w > 0.0));
    let sorted = {
        ws.sort_by(|a, b| b.total_cmp(a));
        ws
    };
    assert_eq!(sorted, fb.boxes.iter().map(|b| b.weight).collect::<Vec<_>>());
    assert!(FeedbackConfig { l: 0, h_max: 1 }.validate().is_err());
    assert!(FeedbackConfig { l: 1, h_max: 0 }.validate().is_err());
}

#[test]
fn malformed_messages_are_rejected() {
    assert!(FeedbackSketch::from_bytes(&[1], 4, 4).is_err());
    assert!(FeedbackSketch::from_bytes(&[1, 0, 0], 4, 4).is_err());
    let bad = FeedbackSketch {
        height: 4,
        width: 4,
        boxes: vec![FeedbackBox { x1: 0, y1: 0, x2: 4, y2: 0, weight: 1.0 }],
    };
    assert!(FeedbackSketch::from_bytes(&bad.to_bytes(), 4, 4).is_err());
    let inverted = FeedbackBox { x1: 2, y1: 0, x2: 1, y2: 0, weight: 1.0 };
    assert!(inverted.validate(4, 4).is_err());
    let negative = FeedbackBox { x1: 0, y1: 0, x2: 1, y2: 0, weight: -1.0 };
    assert!(negative.validate(4, 4).is_err());
}
