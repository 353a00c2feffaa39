//! Synthetic shape scenes with templated questions.

mod dataset;
mod question;
mod scene;

pub use dataset::{dataset_build, Dataset, Record, Split};
pub use question::{
    answer_index, answer_word, generate_question, token_ids, Category, QAPair, ANSWERS, TOKENS,
};
pub use scene::{
    derive_seed, generate_scene, render, Fill, SceneConfig, SceneObject, SceneSpec, Shape, Size,
};

use crate::autodiff::Tensor;
use crate::edges;
use crate::sketch::Sketch;

/// Gradient magnitude at which a reference-sketch pixel saturates to black.
pub const EDGE_SATURATION: f64 = 2.0;

/// Edge-map sketch of an image: `1 - min(1, |∇I| / EDGE_SATURATION)`, so edges
/// are dark and flat regions white.
pub fn reference_sketch(image: &Tensor) -> Sketch {
    let (h, w, plane) = edges::luminance(image);
    let mag = edges::gradient_magnitude(&plane, h, w);
    let data = mag
        .iter()
        .map(|m| 1.0 - (m / EDGE_SATURATION).min(1.0))
        .collect();
    Sketch::new(h, w, data).expect("edge map lies in [0, 1]")
}
