use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{SceneSpec, Shape};
use crate::error::{Error, Result};

/// Closed answer vocabulary; indices are stable across train and eval.
pub const ANSWERS: [&str; 18] = [
    "yes", "no", "0", "1", "2", "3", "4", "5", "6", "circle", "square", "triangle", "star",
    "small", "large", "solid", "hollow", "striped",
];

/// Question token vocabulary. Index 0 is the unknown-word token.
pub const TOKENS: [&str; 18] = [
    "<unk>", "how", "many", "is", "there", "a", "the", "left", "of", "what", "shape", "largest",
    "object", "fill", "circle", "square", "triangle", "star",
];

pub fn answer_index(word: &str) -> Option<usize> {
    ANSWERS.iter().position(|&a| a == word)
}

pub fn answer_word(index: usize) -> Option<&'static str> {
    ANSWERS.get(index).copied()
}

/// Token ids for a question; words outside the vocabulary map to `<unk>`.
pub fn token_ids(question: &[String]) -> Vec<usize> {
    question
        .iter()
        .map(|w| TOKENS.iter().position(|t| t == w).unwrap_or(0))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    YesNo,
    Number,
    Other,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::YesNo, Category::Number, Category::Other];

    pub fn name(self) -> &'static str {
        match self {
            Category::YesNo => "yesno",
            Category::Number => "number",
            Category::Other => "other",
        }
    }

    pub fn from_name(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: Vec<String>,
    pub category: Category,
    pub answer: usize,
}

impl QAPair {
    pub fn text(&self) -> String {
        self.question.join(" ")
    }

    /// One-hot target over [`ANSWERS`].
    pub fn target(&self) -> Vec<f64> {
        let mut t = vec![0.0; ANSWERS.len()];
        t[self.answer] = 1.0;
        t
    }
}

#[derive(Clone, Copy, Debug)]
enum Template {
    HowMany(Shape),
    IsThere(Shape),
    LeftOf(Shape, Shape),
    Largest,
    FillOf(Shape),
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

fn count(scene: &SceneSpec, shape: Shape) -> usize {
    scene.objects.iter().filter(|o| o.shape == shape).count()
}

impl Template {
    fn category(self) -> Category {
        match self {
            Template::HowMany(_) => Category::Number,
            Template::IsThere(_) | Template::LeftOf(..) => Category::YesNo,
            Template::Largest | Template::FillOf(_) => Category::Other,
        }
    }

    fn tokens(self) -> Vec<String> {
        match self {
            Template::HowMany(s) => words(&["how", "many", s.word()]),
            Template::IsThere(s) => words(&["is", "there", "a", s.word()]),
            Template::LeftOf(a, b) => words(&["is", "the", a.word(), "left", "of", "the", b.word()]),
            Template::Largest => words(&["what", "shape", "is", "the", "largest", "object"]),
            Template::FillOf(s) => words(&["what", "is", "the", "fill", "of", "the", s.word()]),
        }
    }

    /// Answer word, or `None` when the template does not apply to the scene.
    fn answer(self, scene: &SceneSpec) -> Option<&'static str> {
        let yes_no = |b: bool| if b { "yes" } else { "no" };
        match self {
            Template::HowMany(s) => ANSWERS.get(2 + count(scene, s)).copied(),
            Template::IsThere(s) => Some(yes_no(count(scene, s) > 0)),
            Template::LeftOf(a, b) => {
                if a == b || count(scene, a) != 1 || count(scene, b) != 1 {
                    return None;
                }
                let xa = scene.objects.iter().find(|o| o.shape == a)?.x;
                let xb = scene.objects.iter().find(|o| o.shape == b)?.x;
                (xa != xb).then(|| yes_no(xa < xb))
            }
            Template::Largest => {
                let max = scene.objects.iter().map(|o| o.size).max()?;
                let mut top = scene.objects.iter().filter(|o| o.size == max);
                let first = top.next()?;
                top.next().is_none().then(|| first.shape.word())
            }
            Template::FillOf(s) => {
                if count(scene, s) != 1 {
                    return None;
                }
                scene.objects.iter().find(|o| o.shape == s).map(|o| o.fill.word())
            }
        }
    }
}

const MAX_TEMPLATE_DRAWS: usize = 64;

/// Picks a shape argument: half the time from shapes in the scene (when any), else uniformly.
fn pick_shape(rng: &mut ChaCha8Rng, scene: &SceneSpec, only_unique: bool) -> Shape {
    let present: Vec<Shape> = Shape::ALL
        .into_iter()
        .filter(|&s| {
            let c = count(scene, s);
            if only_unique {
                c == 1
            } else {
                c > 0
            }
        })
        .collect();
    if !present.is_empty() && rng.random_bool(0.5) {
        *present.choose(rng).expect("non-empty")
    } else {
        Shape::ALL[rng.random_range(0..4)]
    }
}

/// Draws a templated question whose answer is computed from the scene.
/// Templates that do not apply to the scene are redrawn.
pub fn generate_question(scene: &SceneSpec, seed: u64) -> Result<QAPair> {
    if scene.objects.len() > 6 {
        return Err(Error::Contract(format!(
            "{} objects exceed the largest count answer",
            scene.objects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_TEMPLATE_DRAWS {
        let template = match Category::ALL[rng.random_range(0..3)] {
            Category::Number => Template::HowMany(pick_shape(&mut rng, scene, false)),
            Category::YesNo => {
                if rng.random_bool(0.5) {
                    Template::IsThere(pick_shape(&mut rng, scene, false))
                } else {
                    let a = pick_shape(&mut rng, scene, true);
                    let b = pick_shape(&mut rng, scene, true);
                    Template::LeftOf(a, b)
                }
            }
            Category::Other => {
                if rng.random_bool(0.5) {
                    Template::Largest
                } else {
                    Template::FillOf(pick_shape(&mut rng, scene, true))
                }
            }
        };
        if let Some(word) = template.answer(scene) {
            return Ok(QAPair {
                question: template.tokens(),
                category: template.category(),
                answer: answer_index(word).expect("template answers are in the vocabulary"),
            });
        }
    }
    // counting always applies
    let t = Template::HowMany(pick_shape(&mut rng, scene, false));
    let word = t.answer(scene).expect("count template applies to every scene");
    Ok(QAPair {
        question: t.tokens(),
        category: t.category(),
        answer: answer_index(word).expect("count answers are in the vocabulary"),
    })
}
