//! Run configuration: built-in defaults, an optional TOML file, then `key=value`
//! overrides, in that order of precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use isqa_core::evaluation::SweepConfig;
use isqa_core::feedback::FeedbackConfig;
use isqa_core::params::OptimizerKind;
use isqa_core::protocol::{budget_schedule, EpisodeConfig, ReceiverMode, SchedulePolicy};
use isqa_core::sender::BUDGET_LEVELS;
use isqa_core::shapeworld::{derive_seed, SceneConfig};
use isqa_core::training::TrainConfig;
use isqa_core::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed: the dataset, model initialisation and data order all derive from it.
    pub seed: u64,
    pub data: DataSection,
    pub scene: SceneConfig,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub feedback: FeedbackConfig,
    pub eval: EvalSection,
    pub episode: EpisodeSection,
    pub serve: ServeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Receiver epochs on reference sketches.
    pub receiver_epochs: usize,
    /// Sender epochs fitting drafts to reference sketches before joint training.
    pub sender_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub a: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub budget_levels: Vec<f64>,
    pub clip_norm: f64,
    pub perceptual_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub budgets: Vec<f64>,
    pub rounds: Vec<usize>,
    pub episodes: usize,
    pub policy: SchedulePolicy,
    /// Write every episode trace under `traces/`.
    pub traces: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    pub budget: f64,
    pub rounds: usize,
    pub policy: SchedulePolicy,
    /// Index into the evaluation split.
    pub record: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    pub port: u16,
    pub mode: ReceiverMode,
    pub budget: f64,
    pub rounds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SweepConfig::default();
        Self {
            seed: 1,
            data: DataSection {
                n_train: 5000,
                n_eval: 1000,
            },
            scene: SceneConfig::default(),
            pretrain: PretrainSection {
                receiver_epochs: 20,
                sender_epochs: 5,
                learning_rate: 3e-3,
                batch_size: 8,
            },
            train: TrainSection {
                a: t.a,
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                epochs: t.epochs,
                optimizer: t.optimizer,
                budget_levels: BUDGET_LEVELS.to_vec(),
                clip_norm: t.clip_norm,
                perceptual_seed: t.perceptual_seed,
            },
            feedback: FeedbackConfig::default(),
            eval: EvalSection {
                budgets: s.budgets,
                rounds: s.rounds,
                episodes: s.episodes,
                policy: s.policy,
                traces: false,
            },
            episode: EpisodeSection {
                budget: 0.1,
                rounds: 2,
                policy: SchedulePolicy::Even,
                record: 0,
            },
            serve: ServeSection {
                port: 8080,
                mode: ReceiverMode::Human,
                budget: 0.1,
                rounds: 2,
            },
        }
    }
}

fn defaults_table() -> Table {
    match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// Dotted paths of every key in `given` that `known` lacks.
fn unknown_keys(known: &Table, given: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => out.push(path),
            (Some(Value::Table(kt)), Value::Table(gt)) => unknown_keys(kt, gt, &path, out),
            _ => {}
        }
    }
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// Resolves `key` (dotted, or bare when exactly one section has it) to a path.
fn resolve_key(defaults: &Table, key: &str) -> std::result::Result<Vec<String>, String> {
    if let Some((section, field)) = key.split_once('.') {
        return match defaults.get(section) {
            Some(Value::Table(t)) if t.contains_key(field) => Ok(vec![section.into(), field.into()]),
            _ => Err(format!("unknown key {key}")),
        };
    }
    if defaults.get(key).is_some_and(|v| !v.is_table()) {
        return Ok(vec![key.into()]);
    }
    let owners: Vec<&String> = defaults
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(k, _)| k)
        .collect();
    match owners[..] {
        [one] => Ok(vec![one.clone(), key.into()]),
        [] => Err(format!("unknown key {key}")),
        _ => Err(format!(
            "ambiguous key {key}; qualify it as one of {}",
            owners.iter().map(|o| format!("{o}.{key}")).collect::<Vec<_>>().join(", ")
        )),
    }
}

/// Builds the resolved configuration. Every problem found is reported in one error.
pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, Error> {
    let defaults = defaults_table();
    let mut merged = defaults.clone();
    let mut problems = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let given: Table = toml::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {}", path.display(), e.message()))
        })?;
        let mut unknown = Vec::new();
        unknown_keys(&defaults, &given, "", &mut unknown);
        problems.extend(unknown.into_iter().map(|k| format!("unknown key {k}")));
        merge(&mut merged, given);
    }
    for ov in overrides {
        let Some((key, value)) = ov.split_once('=') else {
            problems.push(format!("override {ov:?} is not key=value"));
            continue;
        };
        match resolve_key(&defaults, key.trim()) {
            Ok(path) => {
                let mut layer = Table::new();
                let v = parse_value(value.trim());
                match &path[..] {
                    [k] => {
                        layer.insert(k.clone(), v);
                    }
                    [s, k] => {
                        let mut inner = Table::new();
                        inner.insert(k.clone(), v);
                        layer.insert(s.clone(), Value::Table(inner));
                    }
                    _ => unreachable!("keys are at most two levels deep"),
                }
                merge(&mut merged, layer);
            }
            Err(e) => problems.push(e),
        }
    }
    if let Some(s) = seed {
        merged.insert("seed".into(), Value::Integer(s as i64));
    }
    // type errors, one section at a time so each bad section is named
    for (k, v) in &merged {
        let single: Table = [(k.clone(), v.clone())].into_iter().collect();
        let mut probe = defaults.clone();
        merge(&mut probe, single);
        if let Err(e) = probe.try_into::<RunConfig>() {
            problems.push(format!("{k}: {}", e.message().trim()));
        }
    }
    if !problems.is_empty() {
        problems.dedup();
        return Err(Error::Config(problems.join("; ")));
    }
    let config: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut problems = Vec::new();
        let mut check = |r: Result<(), Error>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            check(Err(Error::Config("data.n_train and data.n_eval must be positive".into())));
        }
        check(self.train_config().validate());
        check(self.pretrain_config(self.train.a).validate());
        check(self.sweep_config().validate());
        check(self.episode_config(self.train.a).map(|_| ()));
        check(budget_schedule(self.serve.budget, self.serve.rounds, SchedulePolicy::Even).map(|_| ()));
        if self.scene.min_objects > self.scene.max_objects {
            check(Err(Error::Config("scene.min_objects exceeds scene.max_objects".into())));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            a: t.a,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: derive_seed(self.seed, 3),
            optimizer: t.optimizer,
            budget_levels: t.budget_levels.clone(),
            clip_norm: t.clip_norm,
            perceptual_seed: t.perceptual_seed,
        }
    }

    /// Settings for either pretraining stage; `epochs` is set by the caller.
    pub fn pretrain_config(&self, a: f64) -> TrainConfig {
        TrainConfig {
            a,
            learning_rate: self.pretrain.learning_rate,
            batch_size: self.pretrain.batch_size,
            epochs: self.pretrain.receiver_epochs,
            seed: derive_seed(self.seed, 4),
            ..self.train_config()
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            budgets: self.eval.budgets.clone(),
            rounds: self.eval.rounds.clone(),
            episodes: self.eval.episodes,
            policy: self.eval.policy,
            feedback: self.feedback,
        }
    }

    pub fn episode_config(&self, a: f64) -> Result<EpisodeConfig, Error> {
        let e = &self.episode;
        let mut c = EpisodeConfig::new(budget_schedule(e.budget, e.rounds, e.policy)?, a);
        c.feedback = self.feedback;
        c.validate()?;
        Ok(c)
    }

    pub fn sender_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn receiver_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }
}
