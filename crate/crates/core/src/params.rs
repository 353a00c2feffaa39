//! Named parameter collections, initialisation, and optimisers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered map of parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph handles for every tensor of a [`ParamSet`], keyed by the same names.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor as a differentiable graph input.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.input(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Records every tensor as a graph constant (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        BoundParams { vars }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.map(&f))).collect(),
        }
    }

    /// Adds the gradients of `bound` parameters into `self` (used as a gradient buffer).
    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundParams, scale: f64) {
        for (name, var) in bound.iter() {
            if let (Some(acc), Some(g)) = (self.tensors.get_mut(name), grads.get_ref(*var)) {
                acc.add_scaled(g, scale);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and `f64` bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// One `<name>.bin` tensor blob per parameter under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, t) in &self.tensors {
            let path = dir.join(format!("{k}.bin"));
            fs::write(&path, t.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads blobs for exactly the names and shapes of `template`.
    pub fn load_like(template: &ParamSet, dir: &Path) -> Result<ParamSet> {
        if !dir.is_dir() {
            return Err(Error::MissingCheckpoint(dir.to_path_buf()));
        }
        let mut out = ParamSet::new();
        for (k, t) in &template.tensors {
            let path = dir.join(format!("{k}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let loaded = Tensor::from_bytes(&bytes)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{}: shape {:?}, expected {:?}",
                    path.display(),
                    loaded.shape(),
                    t.shape()
                )));
            }
            out.insert(k.clone(), loaded);
        }
        Ok(out)
    }

    /// Checks that every tensor of `template` is present here with the same shape.
    pub fn check_shapes(&self, template: &ParamSet, what: &str) -> Result<()> {
        for (name, t) in template.iter() {
            match self.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Dimension(format!(
                        "{what} parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("{what} parameter {name} missing"))),
            }
        }
        Ok(())
    }

    /// Rounds every value to `f32` precision, matching what [`ParamSet::save`] persists.
    pub fn round_to_f32(&self) -> ParamSet {
        self.map(|v| v as f32 as f64)
    }
}

/// He-style normal initialisation with the given fan-in.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(rng, shape, std)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], half_width: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-half_width..half_width)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// SGD or Adam over a [`ParamSet`], with optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip_norm: Option<f64>,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: Option<f64>, params: &ParamSet) -> Self {
        Self {
            kind,
            lr,
            clip_norm,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> f64 {
        let norm = grads.global_norm();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - Self::BETA1.powi(t);
        let bc2 = 1.0 - Self::BETA2.powi(t);
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv * clip;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.tensors.get_mut(name).expect("moment buffers mirror params");
                    let v = self.v.tensors.get_mut(name).expect("moment buffers mirror params");
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gc = gv * clip;
                        *mv = Self::BETA1 * *mv + (1.0 - Self::BETA1) * gc;
                        *vv = Self::BETA2 * *vv + (1.0 - Self::BETA2) * gc * gc;
                        let mh = *mv / bc1;
                        let vh = *vv / bc2;
                        *pv -= self.lr * mh / (vh.sqrt() + Self::EPS);
                    }
                }
            }
        }
        norm
    }
}
