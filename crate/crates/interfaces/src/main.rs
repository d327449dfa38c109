//! `phasewatch` command line.
//!
//! Stage verbs run the pipeline up to and including that stage and print
//! the stage's artifacts as JSON without persisting anything. `run` executes
//! every configured stage into the run store; `card` and `serve` read from it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use phasewatch_interfaces::config::{PipelineConfig, Stage, SWEEP_AXES};
use phasewatch_interfaces::pipeline;
use phasewatch_interfaces::server::{self, AppState};
use phasewatch_interfaces::store::{RunStatus, RunStore};
use phasewatch_interfaces::synth::{self, RegimeSpec, StepSpec};
use phasewatch_interfaces::card;
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "phasewatch", version, about = "Incident-surveillance phase classification")]
struct Cli {
    /// Pipeline configuration (JSON). Relative input paths resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run store root.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured pipeline seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Detector {
    Pelt,
    Hmm,
    Kmeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    /// Repository-star exposure with one step in excess risk.
    Step,
    /// External exposure with three regimes, media, interventions and a comparison source.
    Regimes,
}

#[derive(Subcommand)]
enum Command {
    /// Load and filter the corpus into a monthly panel.
    Ingest,
    /// Fit the reporting-delay model.
    FitDelay,
    /// Apply the right-truncation correction.
    Nowcast,
    /// Build the exposure index.
    Exposure,
    /// Fit the count model and derive excess risk.
    FitGlm,
    /// Run a regime detector.
    Detect {
        #[arg(value_enum)]
        detector: Detector,
    },
    /// Classify months and segments into phases.
    Classify,
    Forecast,
    /// Assess intervention events.
    Impact,
    /// Compare against the second reporting source.
    Agree,
    /// Run sensitivity sweeps; prints one axis or all.
    Sweep { axis: Option<String> },
    /// Execute every configured stage into the run store.
    Run,
    /// Emit the meta-reporting card for a stored run.
    Card {
        #[arg(long)]
        run: String,
        /// Plain-text rendering instead of JSON.
        #[arg(long)]
        text: bool,
    },
    /// Serve the HTTP API over the run store.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Base directory for relative input paths in posted configs.
        #[arg(long, default_value = ".")]
        data_root: PathBuf,
    },
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(value_enum)]
        shape: Shape,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        corpus_seed: u64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("--config is required for this command")]
    NoConfig,
    #[error(transparent)]
    Config(#[from] phasewatch_interfaces::config::ConfigError),
    #[error(transparent)]
    Store(#[from] phasewatch_interfaces::store::StoreError),
    #[error(transparent)]
    Card(#[from] card::CardError),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("stage {0} is not configured")]
    NotConfigured(Stage),
    #[error("unknown sweep axis `{0}`")]
    Axis(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, PathBuf), CliError> {
    let path = cli.config.as_deref().ok_or(CliError::NoConfig)?;
    let (mut cfg, base) = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok((cfg, base))
}

fn print_json(v: &impl serde::Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Runs through `stage` and prints the named artifacts keyed by name.
fn stage_verb(cfg: &PipelineConfig, base: &Path, stage: Stage, names: &[&str]) -> Result<(), CliError> {
    if !cfg.is_configured(stage) {
        return Err(CliError::NotConfigured(stage));
    }
    cfg.validate()?;
    let outcome = pipeline::execute(cfg, base, Some(stage));
    if let Some(f) = outcome.failure {
        return Err(CliError::Stage { stage: f.stage, message: f.message });
    }
    let mut obj = Map::new();
    for name in names {
        if let Some(bytes) = outcome.artifacts.get(*name) {
            obj.insert((*name).to_string(), serde_json::from_slice::<Value>(bytes)?);
        }
    }
    print_json(&obj)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Card { run, text } => {
            let store = RunStore::open(&cli.out)?;
            let c = card::emit_card(&store, run)?;
            if *text {
                print!("{}", card::render_text(&c));
                Ok(())
            } else {
                print_json(&c)
            }
        }
        Command::Serve { bind, data_root } => {
            let state = Arc::new(AppState { store: RunStore::open(&cli.out)?, data_root: data_root.clone() });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(state, bind))?;
            Ok(())
        }
        Command::Synth { shape, dir, corpus_seed } => {
            let corpus = match shape {
                Shape::Step => synth::step_corpus(&StepSpec { seed: *corpus_seed, ..StepSpec::default() }),
                Shape::Regimes => synth::regime_corpus(&RegimeSpec { seed: *corpus_seed, ..RegimeSpec::default() }),
            };
            corpus.write_to(dir)?;
            eprintln!("wrote {} incidents to {}", corpus.incidents.len(), dir.display());
            Ok(())
        }
        Command::Run => {
            let (cfg, base) = load_config(&cli)?;
            let store = RunStore::open(&cli.out)?;
            let manifest = store.execute(&cfg, &base)?;
            print_json(&manifest)?;
            match manifest.status {
                RunStatus::Complete => Ok(()),
                RunStatus::Failed { stage, message } => Err(CliError::Stage { stage, message }),
            }
        }
        verb => {
            let (cfg, base) = load_config(&cli)?;
            let (stage, names): (Stage, Vec<&str>) = match verb {
                Command::Ingest => (Stage::Ingest, vec!["panel"]),
                Command::FitDelay => (Stage::Delay, vec!["delay"]),
                Command::Nowcast => (Stage::Delay, vec!["nowcast", "panel"]),
                Command::Exposure => (Stage::Exposure, vec!["exposure"]),
                Command::FitGlm => (Stage::Glm, vec!["count_model", "excess_risk", "risk"]),
                Command::Detect { detector: Detector::Pelt } => (Stage::Regimes, vec!["pelt_sweep", "segmentation"]),
                Command::Detect { detector: Detector::Hmm } => (Stage::Regimes, vec!["hmm", "triangulation"]),
                Command::Detect { detector: Detector::Kmeans } => (Stage::Regimes, vec!["kmeans", "triangulation"]),
                Command::Classify => (Stage::Phases, vec!["timeline", "segment_phases"]),
                Command::Forecast => (Stage::Forecast, vec!["forecast"]),
                Command::Impact => (Stage::Impact, vec!["impact"]),
                Command::Agree => (Stage::Agreement, vec!["agreement"]),
                Command::Sweep { axis: None } => (
                    Stage::Sweeps,
                    vec!["sweep_threshold", "sweep_two_threshold", "sweep_half_life", "sweep_alpha"],
                ),
                Command::Sweep { axis: Some(a) } => {
                    let Some(axis) = SWEEP_AXES.iter().find(|x| **x == a.as_str()) else {
                        return Err(CliError::Axis(a.clone()));
                    };
                    let name: &'static str = match *axis {
                        "threshold" => "sweep_threshold",
                        "two_threshold" => "sweep_two_threshold",
                        "half_life" => "sweep_half_life",
                        _ => "sweep_alpha",
                    };
                    (Stage::Sweeps, vec![name])
                }
                Command::Run | Command::Card { .. } | Command::Serve { .. } | Command::Synth { .. } => {
                    unreachable!("handled above")
                }
            };
            stage_verb(&cfg, &base, stage, &names)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
