//! Sweeps over variants, budgets and round counts, the interpretability score,
//! and the CSV/text report.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::FeedbackConfig;
use crate::protocol::{budget_schedule, run_episode, EpisodeConfig, EpisodeTrace, SchedulePolicy};
use crate::sender::{pixel_cap, select_pixels, SketchState};
use crate::shapeworld::{reference_sketch, Category, Record};
use crate::training::{Checkpoint, PerceptualEncoder};

/// Budget at which sketches are scored for interpretability.
pub const REFERENCE_BUDGET: f64 = 0.3;

/// Display name for an interpretability level.
pub fn variant_name(a: f64) -> String {
    match a {
        0.0 => "pragmatic".into(),
        0.5 => "prageo".into(),
        1.0 => "geometric".into(),
        _ => format!("a{a}"),
    }
}

/// Percent correct overall and per category. A category with no questions is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub overall: f64,
    pub yesno: Option<f64>,
    pub number: Option<f64>,
    pub other: Option<f64>,
    pub counts: [usize; 3],
}

impl CategoryAccuracy {
    pub fn get(&self, c: Category) -> Option<f64> {
        match c {
            Category::YesNo => self.yesno,
            Category::Number => self.number,
            Category::Other => self.other,
        }
    }
}

pub fn accuracy_by_category(
    predictions: &[Option<usize>],
    ground_truth: &[usize],
    categories: &[Category],
) -> Result<CategoryAccuracy> {
    if predictions.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    if predictions.len() != ground_truth.len() || predictions.len() != categories.len() {
        return Err(Error::Dimension(format!(
            "{} predictions, {} answers, {} categories",
            predictions.len(),
            ground_truth.len(),
            categories.len()
        )));
    }
    let mut hits = [0usize; 3];
    let mut counts = [0usize; 3];
    for ((p, &t), &c) in predictions.iter().zip(ground_truth).zip(categories) {
        let k = Category::ALL.iter().position(|&x| x == c).expect("known category");
        counts[k] += 1;
        hits[k] += (*p == Some(t)) as usize;
    }
    let pct = |k: usize| (counts[k] > 0).then(|| 100.0 * hits[k] as f64 / counts[k] as f64);
    Ok(CategoryAccuracy {
        overall: 100.0 * hits.iter().sum::<usize>() as f64 / predictions.len() as f64,
        yesno: pct(0),
        number: pct(1),
        other: pct(2),
        counts,
    })
}

/// A trained variant under evaluation.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub checkpoint: Checkpoint,
}

impl Variant {
    pub fn new(checkpoint: Checkpoint) -> Self {
        Self {
            name: variant_name(checkpoint.a),
            checkpoint,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self::new(Checkpoint::load(dir)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Total pixel budgets as canvas fractions.
    pub budgets: Vec<f64>,
    pub rounds: Vec<usize>,
    /// Eval records played per cell; the first `episodes` of the split.
    pub episodes: usize,
    pub policy: SchedulePolicy,
    pub feedback: FeedbackConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: vec![0.01, 0.03, 0.05, 0.1, 0.2, 0.3, 0.5],
            rounds: vec![1, 2],
            episodes: 1000,
            policy: SchedulePolicy::Even,
            feedback: FeedbackConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.rounds.is_empty() || self.episodes == 0 {
            return Err(Error::Config("sweep needs budgets, round counts and episodes".into()));
        }
        for &r in &self.rounds {
            for &b in &self.budgets {
                self.episode_config(b, r, 0.0)?.validate()?;
            }
        }
        Ok(())
    }

    pub fn episode_config(&self, budget: f64, rounds: usize, a: f64) -> Result<EpisodeConfig> {
        let mut c = EpisodeConfig::new(budget_schedule(budget, rounds, self.policy)?, a);
        c.feedback = self.feedback;
        Ok(c)
    }
}

/// Upper bound on `B` for a cell: the pixel budget plus full feedback in every
/// round that can receive it.
pub fn cost_cap(config: &EpisodeConfig, n: usize) -> usize {
    let pixels: usize = config.budgets.iter().map(|&b| pixel_cap(b, n)).sum();
    pixels + crate::feedback::BOX_COST * config.feedback.h_max * config.rounds.saturating_sub(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub variant: String,
    pub a: f64,
    pub budget: f64,
    pub rounds: usize,
    pub accuracy: CategoryAccuracy,
    pub mean_cost: f64,
    pub cost_cap: usize,
    /// Mean perceptual distance of the final accumulated sketch to the reference.
    pub mean_interpretability: f64,
    pub episodes: usize,
    pub seed: u64,
}

/// Builds a cell from its episode traces and the matching perceptual distances.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_cell(
    variant: &str,
    a: f64,
    budget: f64,
    rounds: usize,
    seed: u64,
    cap: usize,
    traces: &[EpisodeTrace],
    distances: &[f64],
) -> Result<EvalCell> {
    if traces.len() != distances.len() {
        return Err(Error::Dimension(format!(
            "{} traces with {} distances",
            traces.len(),
            distances.len()
        )));
    }
    let categories = traces
        .iter()
        .map(|t| {
            Category::from_name(&t.category)
                .ok_or_else(|| Error::Format(format!("unknown category {:?}", t.category)))
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<Option<usize>> = traces.iter().map(|t| t.final_prediction).collect();
    let truth: Vec<usize> = traces.iter().map(|t| t.ground_truth).collect();
    let accuracy = accuracy_by_category(&predictions, &truth, &categories)?;
    let n = traces.len() as f64;
    Ok(EvalCell {
        variant: variant.to_string(),
        a,
        budget,
        rounds,
        accuracy,
        mean_cost: traces.iter().map(|t| t.ledger.total as f64).sum::<f64>() / n,
        cost_cap: cap,
        mean_interpretability: distances.iter().sum::<f64>() / n,
        episodes: traces.len(),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interpretability {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl Interpretability {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Contract("no sketches to score".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Self {
            mean,
            std_error: (var / n).sqrt(),
            count: xs.len(),
        })
    }
}

/// Perceptual distance of each record's one-round sketch at `budget` to its reference.
pub fn interpretability_samples(
    checkpoint: &Checkpoint,
    records: &[Record],
    encoder: &PerceptualEncoder,
    budget: f64,
) -> Result<Vec<f64>> {
    let sender = &checkpoint.sender;
    let (h, w) = sender.canvas();
    records
        .iter()
        .map(|r| {
            let image = r.image();
            let s_hat = sender.draft(&image, checkpoint.a, budget)?;
            let mut state = SketchState::new(h, w);
            select_pixels(&s_hat, None, budget, &mut state)?;
            encoder.distance(&state.accumulated, &reference_sketch(&image))
        })
        .collect()
}

pub fn interpretability_score(
    checkpoint: &Checkpoint,
    records: &[Record],
    encoder: &PerceptualEncoder,
) -> Result<Interpretability> {
    Interpretability::from_samples(&interpretability_samples(checkpoint, records, encoder, REFERENCE_BUDGET)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretabilityRow {
    pub variant: String,
    pub a: f64,
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub cells: Vec<EvalCell>,
    pub interpretability: Vec<InterpretabilityRow>,
}

impl EvalReport {
    pub fn cell(&self, variant: &str, budget: f64, rounds: usize) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.budget == budget && c.rounds == rounds)
    }
}

/// Plays every eval record through every (variant, budget, rounds) cell.
/// `on_trace` sees each finished episode, e.g. to persist it.
pub fn sweep(
    variants: &[Variant],
    config: &SweepConfig,
    records: &[Record],
    encoder: &PerceptualEncoder,
    seed: u64,
    mut on_trace: impl FnMut(&EvalCell, &EpisodeTrace) -> Result<()>,
) -> Result<EvalReport> {
    config.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants to evaluate".into()));
    }
    let records = &records[..config.episodes.min(records.len())];
    if records.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let references: Vec<_> = records.iter().map(|r| reference_sketch(&r.image())).collect();
    let mut cells = Vec::new();
    let mut interpretability = Vec::new();
    for v in variants {
        let ck = &v.checkpoint;
        let (h, w) = ck.sender.canvas();
        for &rounds in &config.rounds {
            for &budget in &config.budgets {
                let ec = config.episode_config(budget, rounds, ck.a)?;
                let mut traces = Vec::with_capacity(records.len());
                let mut distances = Vec::with_capacity(records.len());
                for (r, reference) in records.iter().zip(&references) {
                    let trace = run_episode(&r.image(), &r.qa, &ck.sender, &ck.receiver, &ec)?;
                    let last = trace
                        .accumulated_sketches()?
                        .pop()
                        .ok_or_else(|| Error::Protocol("episode played no rounds".into()))?;
                    distances.push(encoder.distance(&last, reference)?);
                    traces.push(trace);
                }
                let cell = aggregate_cell(&v.name, ck.a, budget, rounds, seed, cost_cap(&ec, h * w), &traces, &distances)?;
                for t in &traces {
                    on_trace(&cell, t)?;
                }
                cells.push(cell);
            }
        }
        let score = interpretability_score(ck, records, encoder)?;
        interpretability.push(InterpretabilityRow {
            variant: v.name.clone(),
            a: ck.a,
            mean: score.mean,
            std_error: score.std_error,
            count: score.count,
        });
    }
    Ok(EvalReport {
        seed,
        cells,
        interpretability,
    })
}

/// One row of `cells.csv`; every field of [`EvalCell`] flattened.
#[derive(Debug, Serialize, Deserialize)]
struct CellRow {
    variant: String,
    a: f64,
    budget: f64,
    rounds: usize,
    overall: f64,
    yesno: Option<f64>,
    number: Option<f64>,
    other: Option<f64>,
    n_yesno: usize,
    n_number: usize,
    n_other: usize,
    mean_cost: f64,
    cost_cap: usize,
    mean_interpretability: f64,
    episodes: usize,
    seed: u64,
}

impl From<&EvalCell> for CellRow {
    fn from(c: &EvalCell) -> Self {
        Self {
            variant: c.variant.clone(),
            a: c.a,
            budget: c.budget,
            rounds: c.rounds,
            overall: c.accuracy.overall,
            yesno: c.accuracy.yesno,
            number: c.accuracy.number,
            other: c.accuracy.other,
            n_yesno: c.accuracy.counts[0],
            n_number: c.accuracy.counts[1],
            n_other: c.accuracy.counts[2],
            mean_cost: c.mean_cost,
            cost_cap: c.cost_cap,
            mean_interpretability: c.mean_interpretability,
            episodes: c.episodes,
            seed: c.seed,
        }
    }
}

impl From<CellRow> for EvalCell {
    fn from(r: CellRow) -> Self {
        Self {
            variant: r.variant,
            a: r.a,
            budget: r.budget,
            rounds: r.rounds,
            accuracy: CategoryAccuracy {
                overall: r.overall,
                yesno: r.yesno,
                number: r.number,
                other: r.other,
                counts: [r.n_yesno, r.n_number, r.n_other],
            },
            mean_cost: r.mean_cost,
            cost_cap: r.cost_cap,
            mean_interpretability: r.mean_interpretability,
            episodes: r.episodes,
            seed: r.seed,
        }
    }
}

#[derive(Serialize)]
struct CurveRow<'a> {
    variant: &'a str,
    a: f64,
    budget: f64,
    rounds: usize,
    accuracy: f64,
    mean_cost: f64,
    episodes: usize,
}

#[derive(Serialize)]
struct CategoryRow<'a> {
    variant: &'a str,
    budget: f64,
    rounds: usize,
    overall: f64,
    other: Option<f64>,
    yesno: Option<f64>,
    number: Option<f64>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn curve_row(c: &EvalCell) -> CurveRow<'_> {
    CurveRow {
        variant: &c.variant,
        a: c.a,
        budget: c.budget,
        rounds: c.rounds,
        accuracy: c.accuracy.overall,
        mean_cost: c.mean_cost,
        episodes: c.episodes,
    }
}

/// Writes `summary.txt`, the figure and table analogs, and `cells.csv` with every
/// cell field into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("cells.csv"), report.cells.iter().map(CellRow::from))?;
    write_csv(
        &dir.join("fig3_left.csv"),
        report.cells.iter().filter(|c| c.rounds == 1).map(curve_row),
    )?;
    write_csv(&dir.join("fig3_right.csv"), report.cells.iter().map(curve_row))?;
    write_csv(&dir.join("table1.csv"), &report.interpretability)?;
    write_csv(
        &dir.join("table4_categories.csv"),
        report.cells.iter().map(|c| CategoryRow {
            variant: &c.variant,
            budget: c.budget,
            rounds: c.rounds,
            overall: c.accuracy.overall,
            other: c.accuracy.other,
            yesno: c.accuracy.yesno,
            number: c.accuracy.number,
        }),
    )?;
    let path = dir.join("summary.txt");
    fs::write(&path, summary(report)).map_err(|e| Error::io(&path, e))
}

/// Reads `cells.csv` back into cells.
pub fn load_cells(path: &Path) -> Result<Vec<EvalCell>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<CellRow>()
        .map(|row| row.map(EvalCell::from).map_err(|e| csv_err(path, e)))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

pub fn summary(report: &EvalReport) -> String {
    let mut s = format!("seed {}\n\naccuracy by cell\n", report.seed);
    s += &format!(
        "{:<11} {:>6} {:>2} {:>7} {:>6} {:>6} {:>6} {:>8} {:>6} {:>8}\n",
        "variant", "budget", "R", "overall", "yesno", "number", "other", "mean_B", "cap", "interp"
    );
    for c in &report.cells {
        s += &format!(
            "{:<11} {:>6} {:>2} {:>7.1} {:>6} {:>6} {:>6} {:>8.1} {:>6} {:>8.4}\n",
            c.variant,
            c.budget,
            c.rounds,
            c.accuracy.overall,
            opt(c.accuracy.yesno),
            opt(c.accuracy.number),
            opt(c.accuracy.other),
            c.mean_cost,
            c.cost_cap,
            c.mean_interpretability
        );
    }
    s += &format!("\ninterpretability at budget {REFERENCE_BUDGET} (lower is closer to the reference)\n");
    for row in &report.interpretability {
        s += &format!(
            "{:<11} a={:<4} {:.4} +- {:.4} (n={})\n",
            row.variant, row.a, row.mean, row.std_error, row.count
        );
    }
    s
}
