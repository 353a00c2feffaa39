use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::question::{generate_question, Category, QAPair, ANSWERS};
use super::scene::{derive_seed, generate_scene, render, SceneConfig, SceneSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: usize,
    pub split: Split,
    pub scene_seed: u64,
    pub scene: SceneSpec,
    pub qa: QAPair,
}

impl Record {
    pub fn image(&self) -> Tensor {
        render(&self.scene)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Record>,
    pub eval: Vec<Record>,
}

const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tsplit\tscene_seed\tscene_file\timage_file\tquestion\tcategory\tanswer";

impl Dataset {
    /// Builds `n_train + n_eval` records; record `i` draws its scene from
    /// `derive_seed(seed, i)`, so the two splits never share a scene seed.
    pub fn generate(seed: u64, n_train: usize, n_eval: usize, config: &SceneConfig) -> Result<Self> {
        let make = |i: usize, split: Split| -> Result<Record> {
            let scene_seed = derive_seed(seed, i as u64);
            let (_, scene) = generate_scene(scene_seed, config)?;
            let qa = generate_question(&scene, derive_seed(scene_seed, u64::MAX))?;
            Ok(Record {
                id: i,
                split,
                scene_seed,
                scene,
                qa,
            })
        };
        let train = (0..n_train).map(|i| make(i, Split::Train)).collect::<Result<_>>()?;
        let eval = (n_train..n_train + n_eval)
            .map(|i| make(i, Split::Eval))
            .collect::<Result<_>>()?;
        Ok(Self { train, eval })
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.train.iter().chain(&self.eval)
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in self.records() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\tscenes/{:06}.json\timages/{:06}.bin\t{}\t{}\t{}",
                r.id,
                r.split.name(),
                r.scene_seed,
                r.id,
                r.id,
                r.qa.text(),
                r.qa.category.name(),
                r.qa.answer
            );
        }
        out
    }

    pub fn manifest_digest(&self) -> String {
        hex::encode(Sha256::digest(self.manifest().as_bytes()))
    }

    /// Writes the manifest, one JSON scene file and one image tensor blob per record.
    pub fn save(&self, dir: &Path) -> Result<String> {
        for sub in ["scenes", "images"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for r in self.records() {
            let scene_path = dir.join(format!("scenes/{:06}.json", r.id));
            let json = serde_json::to_string_pretty(&r.scene).expect("scene serialises");
            fs::write(&scene_path, json).map_err(|e| Error::io(&scene_path, e))?;
            let image_path = dir.join(format!("images/{:06}.bin", r.id));
            fs::write(&image_path, r.image().to_bytes()).map_err(|e| Error::io(&image_path, e))?;
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest_digest())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            let bad = |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), lineno + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 8 {
                return Err(bad("expected 8 tab-separated columns"));
            }
            let id = cols[0].parse().map_err(|_| bad("bad id"))?;
            let split = match cols[1] {
                "train" => Split::Train,
                "eval" => Split::Eval,
                _ => return Err(bad("bad split")),
            };
            let scene_seed = cols[2].parse().map_err(|_| bad("bad scene seed"))?;
            let scene_path = dir.join(cols[3]);
            let scene_text = fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
            let scene: SceneSpec =
                serde_json::from_str(&scene_text).map_err(|e| bad(&format!("scene file: {e}")))?;
            let category = Category::from_name(cols[6]).ok_or_else(|| bad("bad category"))?;
            let answer: usize = cols[7].parse().map_err(|_| bad("bad answer"))?;
            if answer >= ANSWERS.len() {
                return Err(bad("answer index out of range"));
            }
            let qa = QAPair {
                question: cols[5].split(' ').map(str::to_string).collect(),
                category,
                answer,
            };
            let rec = Record {
                id,
                split,
                scene_seed,
                scene,
                qa,
            };
            match split {
                Split::Train => train.push(rec),
                Split::Eval => eval.push(rec),
            }
        }
        Ok(Self { train, eval })
    }

    /// Reads a persisted image blob for a record.
    pub fn load_image(dir: &Path, id: usize) -> Result<Tensor> {
        let path = dir.join(format!("images/{id:06}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

/// Generates and persists a dataset, returning the manifest digest.
pub fn dataset_build(
    seed: u64,
    n_train: usize,
    n_eval: usize,
    config: &SceneConfig,
    dir: &Path,
) -> Result<(Dataset, String)> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config("dataset splits must be non-empty".into()));
    }
    let ds = Dataset::generate(seed, n_train, n_eval, config)?;
    let digest = ds.save(dir)?;
    Ok((ds, digest))
}
