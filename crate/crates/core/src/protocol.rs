//! Multi-round episodes: sender and receiver turns, the drawing-complexity ledger,
//! budget schedules, and replayable traces.

use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, FeedbackSketch, BOX_COST};
use crate::receiver::{Receiver, Reply};
use crate::sender::{pixel_cap, select_pixels, Sender, SketchState};
use crate::shapeworld::{answer_word, QAPair};
use crate::sketch::{Sketch, SparseSketch};

pub const MAX_ROUNDS: usize = 3;
const BUDGET_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub rounds: usize,
    /// Per-round pixel budget as a fraction of the canvas.
    pub budgets: Vec<f64>,
    /// Interpretability level blending geometric and pragmatic features.
    pub a: f64,
    pub feedback: FeedbackConfig,
}

impl EpisodeConfig {
    pub fn new(budgets: Vec<f64>, a: f64) -> Self {
        Self {
            rounds: budgets.len(),
            budgets,
            a,
            feedback: FeedbackConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(1..=MAX_ROUNDS).contains(&self.rounds) {
            problems.push(format!("rounds={} outside 1..={MAX_ROUNDS}", self.rounds));
        }
        if self.budgets.len() != self.rounds {
            problems.push(format!("{} budgets for {} rounds", self.budgets.len(), self.rounds));
        }
        if self.budgets.iter().any(|b| !b.is_finite() || *b < 0.0) {
            problems.push("budgets must be finite and >= 0".to_string());
        }
        let total: f64 = self.budgets.iter().sum();
        if total > 1.0 + BUDGET_SLACK {
            problems.push(format!("budgets sum to {total} > 1"));
        }
        if !(0.0..=1.0).contains(&self.a) {
            problems.push(format!("a={} outside [0, 1]", self.a));
        }
        if let Err(e) = self.feedback.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn total_budget(&self) -> f64 {
        self.budgets.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCost {
    pub pixels: usize,
    pub boxes: usize,
}

/// Per-round `(p_i, h_i)` with the running total `B = Σ (p_i + 5 h_i)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub rounds: Vec<RoundCost>,
    pub total: usize,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total recomputed from the per-round parts.
    pub fn recompute(&self) -> usize {
        self.rounds.iter().map(|r| r.pixels + BOX_COST * r.boxes).sum()
    }

    pub fn pixel_total(&self) -> usize {
        self.rounds.iter().map(|r| r.pixels).sum()
    }

    pub fn box_total(&self) -> usize {
        self.rounds.iter().map(|r| r.boxes).sum()
    }
}

/// Appends one round to the ledger.
pub fn ledger_update(mut ledger: BudgetLedger, pixels: i64, boxes: i64) -> Result<BudgetLedger> {
    if pixels < 0 || boxes < 0 {
        return Err(Error::Contract(format!(
            "ledger counts must be non-negative, got p={pixels} h={boxes}"
        )));
    }
    let (p, h) = (pixels as usize, boxes as usize);
    ledger.rounds.push(RoundCost { pixels: p, boxes: h });
    ledger.total += p + BOX_COST * h;
    Ok(ledger)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulePolicy {
    Even,
    Front,
}

impl FromStr for SchedulePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even" => Ok(Self::Even),
            "front" => Ok(Self::Front),
            other => Err(Error::Config(format!("unknown budget policy {other:?}"))),
        }
    }
}

/// Splits a total budget fraction across `rounds`; the last round absorbs rounding.
pub fn budget_schedule(total: f64, rounds: usize, policy: SchedulePolicy) -> Result<Vec<f64>> {
    if !(total > 0.0 && total <= 1.0) {
        return Err(Error::Config(format!("total budget {total} outside (0, 1]")));
    }
    if rounds == 0 {
        return Err(Error::Config("at least one round is required".into()));
    }
    let mut out = match (policy, rounds) {
        (_, 1) => vec![total],
        (SchedulePolicy::Even, r) => vec![total / r as f64; r],
        (SchedulePolicy::Front, r) => {
            let mut v = vec![total / 2.0];
            v.extend(std::iter::repeat_n(total / 2.0 / (r - 1) as f64, r - 1));
            v
        }
    };
    let head: f64 = out[..rounds - 1].iter().sum();
    out[rounds - 1] = total - head;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReceiverMode {
    Machine,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub budget: f64,
    pub cumulative_budget: f64,
    pub pixels: usize,
    /// Sparse wire encoding of this round's sketch, base-16.
    pub sketch: String,
    /// Sparse wire encoding of the overlay of rounds so far, base-16.
    pub accumulated: String,
    pub scores: Vec<f64>,
    pub prediction: Option<usize>,
    pub boxes: usize,
    /// Feedback wire encoding, base-16; absent when no feedback was requested.
    pub feedback: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub mode: ReceiverMode,
    pub config: EpisodeConfig,
    pub height: usize,
    pub width: usize,
    pub question: String,
    pub category: String,
    pub ground_truth: usize,
    pub rounds: Vec<RoundTrace>,
    pub ledger: BudgetLedger,
    pub final_prediction: Option<usize>,
    pub correct: bool,
    /// Wall-clock time per round; not serialised so traces stay byte-stable.
    #[serde(skip)]
    pub timing: Vec<Duration>,
}

impl EpisodeTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("trace: {e}")))
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Accumulated sketch after each round, decoded from the trace.
    pub fn accumulated_sketches(&self) -> Result<Vec<Sketch>> {
        self.rounds
            .iter()
            .map(|r| {
                let bytes = hex::decode(&r.accumulated).map_err(|e| Error::Format(e.to_string()))?;
                SparseSketch::from_bytes(&bytes)?.to_sketch()
            })
            .collect()
    }

    pub fn feedback_messages(&self) -> Result<Vec<Option<FeedbackSketch>>> {
        self.rounds
            .iter()
            .map(|r| match &r.feedback {
                None => Ok(None),
                Some(h) => {
                    let bytes = hex::decode(h).map_err(|e| Error::Format(e.to_string()))?;
                    FeedbackSketch::from_bytes(&bytes, self.height, self.width).map(Some)
                }
            })
            .collect()
    }
}

/// A single episode driven one turn at a time, so that either a model or a person
/// can play the receiver.
#[derive(Clone, Debug)]
pub struct Episode {
    config: EpisodeConfig,
    mode: ReceiverMode,
    state: SketchState,
    ledger: BudgetLedger,
    rounds: Vec<RoundTrace>,
    /// Pixels of the round awaiting the receiver's reply.
    pending: Option<usize>,
    last_feedback: Option<FeedbackSketch>,
    closed: bool,
    timing: Vec<Duration>,
}

impl Episode {
    pub fn new(config: EpisodeConfig, mode: ReceiverMode, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            mode,
            state: SketchState::new(height, width),
            ledger: BudgetLedger::new(),
            rounds: Vec::new(),
            pending: None,
            last_feedback: None,
            closed: false,
            timing: Vec::new(),
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn state(&self) -> &SketchState {
        &self.state
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    /// Ledger total including pixels of a round whose reply is still pending.
    pub fn spent(&self) -> usize {
        self.ledger.total + self.pending.unwrap_or(0)
    }

    pub fn rounds(&self) -> &[RoundTrace] {
        &self.rounds
    }

    pub fn mode(&self) -> ReceiverMode {
        self.mode
    }

    pub fn rounds_played(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn awaiting_reply(&self) -> bool {
        self.pending.is_some()
    }

    /// Whether another sender turn is allowed.
    pub fn can_continue(&self) -> bool {
        !self.closed && self.pending.is_none() && self.rounds.len() < self.config.rounds
    }

    /// Runs the sender for the next round against the most recent feedback.
    pub fn sender_turn(&mut self, sender: &Sender, image: &Tensor) -> Result<&RoundTrace> {
        if !self.can_continue() {
            return Err(Error::Protocol("no sender turn is available".into()));
        }
        let start = Instant::now();
        let (h, w) = (self.state.accumulated.height(), self.state.accumulated.width());
        if sender.canvas() != (h, w) {
            return Err(Error::Config(format!(
                "sender canvas {:?} does not match episode canvas {h}x{w}",
                sender.canvas()
            )));
        }
        let i = self.rounds.len();
        let budget = self.config.budgets[i];
        let cumulative: f64 = self.config.budgets[..=i].iter().sum();
        let (sketch, pixels) = if budget > 0.0 {
            let s_hat = sender.draft(image, self.config.a, cumulative.min(1.0))?;
            select_pixels(&s_hat, self.last_feedback.as_ref(), budget, &mut self.state)?
        } else {
            select_pixels(&Sketch::blank(h, w), None, 0.0, &mut self.state)?
        };
        if pixels > pixel_cap(budget, h * w) {
            return Err(Error::Protocol(format!(
                "round {} sent {pixels} pixels over its cap {}",
                i + 1,
                pixel_cap(budget, h * w)
            )));
        }
        self.pending = Some(pixels);
        self.timing.push(start.elapsed());
        self.rounds.push(RoundTrace {
            round: i + 1,
            budget,
            cumulative_budget: cumulative,
            pixels,
            sketch: hex::encode(sketch.to_sparse().to_bytes()),
            accumulated: hex::encode(self.state.accumulated.to_sparse().to_bytes()),
            scores: Vec::new(),
            prediction: None,
            boxes: 0,
            feedback: None,
        });
        Ok(self.rounds.last().expect("just pushed"))
    }

    /// Records the receiver's reply to the pending round and charges its feedback.
    /// Empty feedback, or running out of rounds, closes the sketching phase.
    pub fn receiver_turn(&mut self, reply: Reply) -> Result<()> {
        self.settle(reply.feedback, reply.scores, Some(reply.prediction))
    }

    /// A person's boxes in reply to the pending round; they carry no answer scores.
    pub fn human_turn(&mut self, feedback: FeedbackSketch) -> Result<()> {
        self.settle(Some(feedback), Vec::new(), None)
    }

    fn settle(&mut self, fb: Option<FeedbackSketch>, scores: Vec<f64>, prediction: Option<usize>) -> Result<()> {
        let Some(pixels) = self.pending else {
            return Err(Error::Protocol("no round is awaiting a reply".into()));
        };
        if let Some(f) = &fb {
            f.validate()?;
            if f.len() > self.config.feedback.h_max {
                return Err(Error::Protocol(format!(
                    "{} boxes exceed h_max={}",
                    f.len(),
                    self.config.feedback.h_max
                )));
            }
            if self.rounds.len() >= self.config.rounds {
                return Err(Error::Protocol("feedback after the final round".into()));
            }
        }
        self.pending = None;
        let boxes = fb.as_ref().map_or(0, FeedbackSketch::len);
        self.ledger = ledger_update(std::mem::take(&mut self.ledger), pixels as i64, boxes as i64)?;
        let round = self.rounds.last_mut().expect("a round is pending");
        round.scores = scores;
        round.prediction = prediction;
        round.boxes = boxes;
        round.feedback = fb.as_ref().map(|f| hex::encode(f.to_bytes()));
        if boxes == 0 || self.rounds.len() >= self.config.rounds {
            self.closed = true;
        }
        self.last_feedback = fb;
        Ok(())
    }

    /// Settles a pending round with no reply (the receiver answers instead of giving
    /// feedback) and closes the episode.
    pub fn close(&mut self) -> Result<()> {
        if let Some(pixels) = self.pending.take() {
            self.ledger = ledger_update(std::mem::take(&mut self.ledger), pixels as i64, 0)?;
        }
        self.closed = true;
        Ok(())
    }

    pub fn finish(mut self, qa: &QAPair, final_prediction: Option<usize>) -> Result<EpisodeTrace> {
        self.close()?;
        let final_prediction = final_prediction.or_else(|| self.rounds.last().and_then(|r| r.prediction));
        let (height, width) = (self.state.accumulated.height(), self.state.accumulated.width());
        Ok(EpisodeTrace {
            mode: self.mode,
            config: self.config,
            height,
            width,
            question: qa.text(),
            category: qa.category.name().to_string(),
            ground_truth: qa.answer,
            rounds: self.rounds,
            ledger: self.ledger,
            final_prediction,
            correct: final_prediction == Some(qa.answer),
            timing: self.timing,
        })
    }
}

/// Plays a full machine episode: up to `R` sender turns, each answered by the
/// receiver, which feeds back boxes while rounds remain.
pub fn run_episode(
    image: &Tensor,
    qa: &QAPair,
    sender: &Sender,
    receiver: &Receiver,
    config: &EpisodeConfig,
) -> Result<EpisodeTrace> {
    let (h, w) = sender.canvas();
    if (receiver.config.height, receiver.config.width) != (h, w) {
        return Err(Error::Config(format!(
            "receiver canvas {}x{} does not match sender canvas {h}x{w}",
            receiver.config.height, receiver.config.width
        )));
    }
    let mut ep = Episode::new(config.clone(), ReceiverMode::Machine, h, w)?;
    while ep.can_continue() {
        ep.sender_turn(sender, image)?;
        let more = ep.rounds_played() < config.rounds;
        let start = Instant::now();
        let reply = receiver.respond(&ep.state.accumulated, &qa.question, more.then_some(&config.feedback))?;
        ep.receiver_turn(reply)?;
        if let Some(t) = ep.timing.last_mut() {
            *t += start.elapsed();
        }
    }
    ep.finish(qa, None)
}

/// Recomputes each round's scores from the sketches stored in a trace.
pub fn replay_scores(trace: &EpisodeTrace, receiver: &Receiver) -> Result<Vec<Vec<f64>>> {
    let question: Vec<String> = trace.question.split(' ').map(str::to_string).collect();
    trace
        .accumulated_sketches()?
        .iter()
        .map(|s| receiver.scores(s, &question))
        .collect()
}

/// Answer word for a trace's final prediction.
pub fn predicted_word(trace: &EpisodeTrace) -> Option<&'static str> {
    trace.final_prediction.and_then(answer_word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_formula() {
        let l = ledger_update(BudgetLedger::new(), 100, 3).unwrap();
        let l = ledger_update(l, 50, 0).unwrap();
        assert_eq!(l.total, 165);
        assert_eq!(l.recompute(), 165);
        assert_eq!(BudgetLedger::new().total, 0);
        assert!(matches!(ledger_update(l, -1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn schedules() {
        assert_eq!(budget_schedule(0.3, 1, SchedulePolicy::Even).unwrap(), vec![0.3]);
        assert_eq!(budget_schedule(0.3, 2, SchedulePolicy::Even).unwrap(), vec![0.15, 0.15]);
        let f = budget_schedule(0.3, 3, SchedulePolicy::Front).unwrap();
        assert_eq!(f.iter().sum::<f64>(), 0.3);
        assert!((f[0] - 0.15).abs() < 1e-15 && (f[1] - 0.075).abs() < 1e-15 && (f[2] - 0.075).abs() < 1e-15);
        assert!("zigzag".parse::<SchedulePolicy>().is_err());
    }

    #[test]
    fn config_rejects_overspend() {
        let c = EpisodeConfig::new(vec![0.6, 0.5], 0.5);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(EpisodeConfig::new(vec![0.5, 0.5], 0.5).validate().is_ok());
    }
}
