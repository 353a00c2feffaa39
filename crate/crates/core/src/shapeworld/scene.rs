use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn from_word(w: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Bounding radius in pixels.
    pub fn radius(self) -> u32 {
        match self {
            Size::Small => 5,
            Size::Large => 9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Solid,
    Hollow,
    Striped,
}

impl Fill {
    pub const ALL: [Fill; 3] = [Fill::Solid, Fill::Hollow, Fill::Striped];

    pub fn word(self) -> &'static str {
        match self {
            Fill::Solid => "solid",
            Fill::Hollow => "hollow",
            Fill::Striped => "striped",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub size: Size,
    /// Centre column.
    pub x: u32,
    /// Centre row.
    pub y: u32,
    pub fill: Fill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Extra clearance between the bounding circles of two objects.
    pub min_gap: u32,
    /// Placement attempts per object before the whole scene is restarted.
    pub placement_attempts: usize,
    pub scene_restarts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 5,
            min_gap: 2,
            placement_attempts: 200,
            scene_restarts: 50,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        let need = 2 * Size::Large.radius() as usize + 3;
        if self.height < need || self.width < need {
            return Err(Error::Config(format!(
                "canvas {}x{} smaller than one large object",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

const SOLID_LEVEL: f64 = 0.4;
const STRIPE_PERIOD: i64 = 4;

impl SceneObject {
    fn vertices(&self) -> Vec<(f64, f64)> {
        let r = self.size.radius() as f64;
        match self.shape {
            Shape::Triangle => vec![(0.0, -r), (r, 0.75 * r), (-r, 0.75 * r)],
            Shape::Star => (0..10)
                .map(|k| {
                    let rad = if k % 2 == 0 { r } else { 0.45 * r };
                    let ang = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
                    (rad * ang.cos(), rad * ang.sin())
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Whether the pixel centred at `(row, col)` lies inside the object.
    pub fn contains(&self, row: i64, col: i64) -> bool {
        let dx = (col - self.x as i64) as f64;
        let dy = (row - self.y as i64) as f64;
        let r = self.size.radius() as f64;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                let half = (0.85 * r).round();
                dx.abs() <= half && dy.abs() <= half
            }
            Shape::Triangle | Shape::Star => point_in_polygon(dx, dy, &self.vertices()),
        }
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

/// Rasterises a scene onto a white `(H, W, 3)` canvas. Objects get a 1-pixel black
/// outline; interiors are mid-grey (solid), white (hollow), or black/white bands (striped).
pub fn render(scene: &SceneSpec) -> Tensor {
    let (h, w) = (scene.height, scene.width);
    let mut plane = vec![1.0; h * w];
    for obj in &scene.objects {
        let r = obj.size.radius() as i64 + 1;
        let (cy, cx) = (obj.y as i64, obj.x as i64);
        for row in (cy - r).max(0)..(cy + r + 1).min(h as i64) {
            for col in (cx - r).max(0)..(cx + r + 1).min(w as i64) {
                if !obj.contains(row, col) {
                    continue;
                }
                let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
                    let (nr, nc) = (row + dr, col + dc);
                    nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 || !obj.contains(nr, nc)
                });
                let v = if edge {
                    0.0
                } else {
                    match obj.fill {
                        Fill::Solid => SOLID_LEVEL,
                        Fill::Hollow => 1.0,
                        Fill::Striped => {
                            if (row - cy).rem_euclid(STRIPE_PERIOD) < STRIPE_PERIOD / 2 {
                                0.0
                            } else {
                                1.0
                            }
                        }
                    }
                };
                plane[row as usize * w + col as usize] = v;
            }
        }
    }
    let data = plane.iter().flat_map(|&v| [v, v, v]).collect();
    Tensor::from_parts(vec![h, w, 3], data)
}

/// Splits a base seed into an independent per-record stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a combined word
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples a scene and renders it. Deterministic in `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<(Tensor, SceneSpec)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(config.min_objects..=config.max_objects);
    for _ in 0..config.scene_restarts.max(1) {
        if let Some(objects) = place_objects(&mut rng, count, config) {
            let scene = SceneSpec {
                height: config.height,
                width: config.width,
                objects,
            };
            return Ok((render(&scene), scene));
        }
    }
    Err(Error::Generation(format!(
        "could not place {count} objects on a {}x{} canvas after {} restarts",
        config.height, config.width, config.scene_restarts
    )))
}

fn place_objects(rng: &mut ChaCha8Rng, count: usize, config: &SceneConfig) -> Option<Vec<SceneObject>> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = Shape::ALL[rng.random_range(0..4)];
        let size = if rng.random_bool(0.5) { Size::Small } else { Size::Large };
        let fill = Fill::ALL[rng.random_range(0..3)];
        let r = size.radius();
        let mut placed = false;
        for _ in 0..config.placement_attempts {
            let x = rng.random_range(r + 1..config.width as u32 - r - 1);
            let y = rng.random_range(r + 1..config.height as u32 - r - 1);
            let clear = objects.iter().all(|o| {
                let dx = o.x as f64 - x as f64;
                let dy = o.y as f64 - y as f64;
                let need = (o.size.radius() + r + config.min_gap) as f64;
                dx * dx + dy * dy >= need * need
            });
            if clear {
                objects.push(SceneObject { shape, size, x, y, fill });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}
