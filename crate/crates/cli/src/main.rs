mod config;

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use isqa_core::evaluation::{cost_cap, emit_report, summary, sweep, Variant};
use isqa_core::params::ParamSet;
use isqa_core::protocol::{predicted_word, run_episode, ReceiverMode};
use isqa_core::receiver::{Receiver, ReceiverConfig};
use isqa_core::sender::Sender;
use isqa_core::shapeworld::{answer_word, dataset_build, Dataset};
use isqa_core::training::{
    pretrain_receiver, pretrain_sender, train_variant, Checkpoint, EpochMetrics, PerceptualEncoder,
};
use isqa_core::Error;
use isqa_server::{AppState, ServerOptions};

use config::RunConfig;

const SNAPSHOT: &str = "resolved_config.toml";
const DIGESTS: &str = "digests.txt";

#[derive(Parser, Debug)]
#[command(name = "isqa", version, about = "Sketch question answering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $ISQA_OUT_DIR/<subcommand>, else runs/<subcommand>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key=value` or `section.key=value`; repeatable, wins over the file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and persist a shape-world dataset.
    GenData,
    /// Train the receiver alone on reference sketches.
    Pretrain {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train one variant: sender warm-up, then joint sender/receiver training.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Pretrained receiver parameters, as written by `pretrain`.
        #[arg(long)]
        receiver: Option<PathBuf>,
    },
    /// Sweep budgets and round counts over one or more checkpoints.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Play one machine episode and write its trace.
    RunEpisode {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        record: Option<usize>,
    },
    /// Serve the session API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ReceiverMode>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::RunEpisode { .. } => "run-episode",
            Command::Serve { .. } => "serve",
        }
    }

    /// Flags that are shorthands for configuration keys.
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Command::RunEpisode {
                rounds, budget, record, ..
            } => {
                out.extend(rounds.map(|v| format!("episode.rounds={v}")));
                out.extend(budget.map(|v| format!("episode.budget={v}")));
                out.extend(record.map(|v| format!("episode.record={v}")));
            }
            Command::Serve { port, mode, .. } => {
                out.extend(port.map(|v| format!("serve.port={v}")));
                out.extend(mode.map(|m| format!("serve.mode=\"{}\"", mode_name(m))));
            }
            _ => {}
        }
        out
    }
}

fn parse_mode(s: &str) -> Result<ReceiverMode, String> {
    match s {
        "human" => Ok(ReceiverMode::Human),
        "machine" => Ok(ReceiverMode::Machine),
        other => Err(format!("unknown mode {other:?}; expected human or machine")),
    }
}

fn mode_name(m: ReceiverMode) -> &'static str {
    match m {
        ReceiverMode::Human => "human",
        ReceiverMode::Machine => "machine",
    }
}

/// Failure of a run, reported as one `isqa: error[kind]: message` line.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: format!("i/o error on {}: {e}", path.display()),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            "usage" | "config" => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return report(Failure {
                kind: "usage",
                message: first.trim_start_matches("error: ").to_string(),
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let line = f.message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("isqa: error[{}]: {line}", f.kind);
    ExitCode::from(f.exit_code())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(cli.command.overrides());
    let config = config::resolve(cli.config.as_deref(), &overrides, cli.seed)?;
    if cli.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let out = cli.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os("ISQA_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(cli.command.name())
    });
    std::fs::create_dir_all(&out).map_err(|e| Failure::io(&out, e))?;
    write(&out.join(SNAPSHOT), &config.to_toml())?;
    match &cli.command {
        Command::GenData => gen_data(&config, &out)?,
        Command::Pretrain { dataset } => pretrain(&config, dataset.as_deref(), &out)?,
        Command::Train { dataset, receiver } => train(&config, dataset.as_deref(), receiver.as_deref(), &out)?,
        Command::Eval { dataset, checkpoints } => eval(&config, dataset.as_deref(), checkpoints, &out)?,
        Command::RunEpisode { dataset, checkpoint, .. } => episode(&config, dataset.as_deref(), checkpoint, &out)?,
        Command::Serve { checkpoint, dataset, .. } => {
            return serve(&config, checkpoint.as_deref(), dataset.as_deref(), &out);
        }
    }
    let digest = write_digests(&out)?;
    println!("digest {digest}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn load_dataset(config: &RunConfig, dir: Option<&Path>) -> Result<Dataset, Failure> {
    Ok(match dir {
        Some(d) => Dataset::load(d)?,
        None => Dataset::generate(config.seed, config.data.n_train, config.data.n_eval, &config.scene)?,
    })
}

fn history_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,l1,l2,accuracy\n");
    for m in history {
        let _ = writeln!(s, "{},{},{},{},{}", m.epoch, m.loss, m.l1, m.l2, m.accuracy);
    }
    s
}

fn progress(stage: &'static str) -> impl FnMut(&EpochMetrics) {
    move |m| {
        eprintln!(
            "{stage} epoch {} loss {:.6} l1 {:.6} l2 {:.6} accuracy {:.2}",
            m.epoch, m.loss, m.l1, m.l2, m.accuracy
        )
    }
}

fn gen_data(config: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (ds, digest) = dataset_build(config.seed, config.data.n_train, config.data.n_eval, &config.scene, out)?;
    println!("records train={} eval={} manifest {digest}", ds.train.len(), ds.eval.len());
    Ok(())
}

fn pretrain(config: &RunConfig, dataset: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let ds = load_dataset(config, dataset)?;
    let receiver = Receiver::new(config.receiver_seed(), ReceiverConfig::default())?;
    let (receiver, history) = pretrain_receiver(&config.pretrain_config(0.0), &ds, receiver, progress("pretrain"))?;
    receiver.params.save(&out.join("receiver"))?;
    write(&out.join("history.csv"), &history_csv(&history))
}

fn train(config: &RunConfig, dataset: Option<&Path>, warm: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let ds = load_dataset(config, dataset)?;
    let mut receiver = Receiver::new(config.receiver_seed(), ReceiverConfig::default())?;
    if let Some(dir) = warm {
        receiver.params = ParamSet::load_like(&receiver.params, dir)?;
    }
    let tc = config.train_config();
    let mut sender = Sender::new(config.sender_seed(), config.scene.height, config.scene.width)?;
    if config.pretrain.sender_epochs > 0 {
        let pc = isqa_core::training::TrainConfig {
            epochs: config.pretrain.sender_epochs,
            ..config.pretrain_config(tc.a)
        };
        sender = pretrain_sender(&pc, &ds, sender, progress("warm-up"))?.0;
    }
    let encoder = PerceptualEncoder::new(tc.perceptual_seed, config.scene.height, config.scene.width)?;
    let outcome = train_variant(&tc, &ds, sender, receiver, &encoder, progress("train"))?;
    let ck = Checkpoint {
        a: tc.a,
        seed: config.seed,
        epoch: tc.epochs,
        sender: outcome.sender,
        receiver: outcome.receiver,
        perceptual: encoder,
        history: outcome.history,
    };
    ck.save(out)?;
    Ok(())
}

fn eval(config: &RunConfig, dataset: Option<&Path>, checkpoints: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let variants = checkpoints.iter().map(|p| Variant::load(p)).collect::<Result<Vec<_>, _>>()?;
    let ds = load_dataset(config, dataset)?;
    let encoder = PerceptualEncoder::new(config.train.perceptual_seed, config.scene.height, config.scene.width)?;
    let traces = out.join("traces");
    if config.eval.traces {
        std::fs::create_dir_all(&traces).map_err(|e| Failure::io(&traces, e))?;
    }
    let mut counter = 0usize;
    let report = sweep(&variants, &config.sweep_config(), &ds.eval, &encoder, config.seed, |cell, t| {
        if config.eval.traces {
            let path = traces.join(format!("{}_{}_{}_{counter:06}.json", cell.variant, cell.budget, cell.rounds));
            counter += 1;
            std::fs::write(&path, t.to_json()).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    })?;
    emit_report(&report, out)?;
    print!("{}", summary(&report));
    Ok(())
}

fn episode(config: &RunConfig, dataset: Option<&Path>, checkpoint: &Path, out: &Path) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(config, dataset)?;
    let i = config.episode.record;
    let record = ds.eval.get(i).ok_or_else(|| Failure {
        kind: "config",
        message: format!("episode.record={i} outside the {} eval records", ds.eval.len()),
    })?;
    let ec = config.episode_config(ck.a)?;
    let trace = run_episode(&record.image(), &record.qa, &ck.sender, &ck.receiver, &ec)?;
    write(&out.join("trace.json"), &trace.to_json())?;
    let (h, w) = ck.sender.canvas();
    println!(
        "question \"{}\" predicted {} truth {} correct {} rounds {} ledger {} bound {}",
        record.qa.text(),
        predicted_word(&trace).unwrap_or("-"),
        answer_word(trace.ground_truth).unwrap_or("?"),
        trace.correct,
        trace.rounds.len(),
        trace.ledger.total,
        cost_cap(&ec, h * w)
    );
    Ok(())
}

fn serve(config: &RunConfig, checkpoint: Option<&Path>, dataset: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let ck = checkpoint.map(Checkpoint::load).transpose()?;
    let ds = dataset.map(Dataset::load).transpose()?;
    let options = ServerOptions {
        mode: config.serve.mode,
        seed: config.seed,
        trace_dir: Some(out.join("traces")),
        default_budget: config.serve.budget,
        default_rounds: config.serve.rounds,
    };
    let addr = SocketAddr::from(([127, 0, 0, 1], config.serve.port));
    let state = Arc::new(AppState::new(ck, ds, options));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure {
        kind: "io",
        message: format!("starting runtime: {e}"),
    })?;
    eprintln!("listening on http://{addr}");
    rt.block_on(isqa_server::serve(addr, state)).map_err(|e| Failure {
        kind: "io",
        message: format!("serving on {addr}: {e}"),
    })
}

fn files_under(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Failure::io(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, base, out)?;
        } else if path.strip_prefix(base).is_ok_and(|p| p != Path::new(DIGESTS)) {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `digests.txt` (SHA-256 of every output file) and returns its own digest.
fn write_digests(out: &Path) -> Result<String, Failure> {
    let mut files = Vec::new();
    files_under(out, out, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| Failure::io(f, e))?;
        let rel = f.strip_prefix(out).expect("listed under out");
        let _ = writeln!(listing, "{}  {}", hex::encode(Sha256::digest(&bytes)), rel.display());
    }
    write(&out.join(DIGESTS), &listing)?;
    Ok(hex::encode(Sha256::digest(listing.as_bytes())))
}
