//! Command-line surface. Config precedence: defaults < `--config` JSON <
//! flags. Errors print one JSON line on stderr; exit codes are 0 ok,
//! 1 usage, 2 config, 3 runtime, 4 check failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::diagnostics::{
    gradcheck_csv, gradcheck_suite, influence_csv, influence_probe, intervention_csv, intervention_sweep, stratify, sweep,
    sweep_csv, tier_csv, AntonymMap, InterventionMode, SweepAxis,
};
use crate::error::{Error, Result};
use crate::evaluation::{eval_csv, evaluate, summarize, ChainSource};
use crate::eventifier::Prototypes;
use crate::experiment::{initial_model, prepare_data, RunConfig};
use crate::model::ModelState;
use crate::pipeline::{prepare, to_detected_space, PreparedScenario};
use crate::trainer::{load_checkpoint, metrics_csv, save_checkpoint, Trainer};
use crate::world::{generate_corpus, read_corpus, write_corpus, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "eventchain", version, about = "Event-grounded reasoning chains with a differentiable logic verifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Seed for model init and sampling (`gen`: corpus seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON run config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (`gen`: corpus file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Events per scenario.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct ModelInput {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scenario JSONL to evaluate; default regenerates the test split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Prototypes JSON; default `prototypes.json` beside the checkpoint.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scenario corpus (JSONL, one scenario per line).
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of scenarios.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train and write checkpoints and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training corpus JSONL; default generates the train split.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Chain-recovery F1, belief and per-tier tables for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
    },
    /// Utility degradation under chain interventions.
    Intervene {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
    },
    /// One train + eval per grid value along an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["alpha", "k", "t", "m"])]
        axis: String,
        /// Comma-separated values; default is the axis grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Finite-difference suite over every differentiable path.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Influence probes between consecutive held-out scenarios.
    Influence {
        #[command(flatten)]
        common: Common,
        /// Checkpoint; default is a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        eta: f64,
        #[arg(long, default_value_t = 20)]
        probes: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Intervene { .. } => "intervene",
            Command::Sweep { .. } => "sweep",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Influence { .. } => "influence",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gen { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Intervene { common, .. }
            | Command::Sweep { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Influence { common, .. } => common,
        }
    }
}

/// A failed invariant check (e.g. gradcheck); maps to exit code 4.
#[derive(Debug)]
struct CheckFailed(String);

enum Failure {
    Lib(Error),
    Check(CheckFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn error_kind(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Config(_) => ("config", EXIT_CONFIG),
        Error::Io(_) => ("io", EXIT_RUNTIME),
        Error::Json(_) => ("json", EXIT_RUNTIME),
        Error::Checkpoint(_) => ("checkpoint", EXIT_RUNTIME),
        _ => ("runtime", EXIT_RUNTIME),
    }
}

fn error_line(kind: &str, code: i32, message: &str) -> String {
    json!({ "error": kind, "code": code, "message": message.replace('\n', " ") }).to_string()
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", EXIT_USAGE, first));
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Check(c)) => {
            eprintln!("{}", error_line("check", EXIT_CHECK, &c.0));
            EXIT_CHECK
        }
        Err(Failure::Lib(e)) => {
            let (kind, code) = error_kind(&e);
            eprintln!("{}", error_line(kind, code, &e.to_string()));
            code
        }
    }
}

/// Defaults, then the JSON file, then flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(k) = common.k {
        config.world.events = k;
    }
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.eval.seed = seed;
    }
    Ok(config)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_run_json(dir: &Path, command: &str, config: &RunConfig, summary: Value) -> Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": created,
        "seeds": {
            "train": config.train.seed,
            "eval": config.eval.seed,
            "corpus_train": config.corpus.train_seed,
            "corpus_test": config.corpus.test_seed,
            "world": config.world.world_seed,
        },
        "config": config,
        "summary": summary,
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn dispatch(command: &Command) -> std::result::Result<(), Failure> {
    let common = command.common();
    let mut config = resolve_config(common)?;
    let name = command.name();
    match command {
        Command::Gen { n, .. } => {
            if let Some(seed) = common.seed {
                config.corpus.train_seed = seed;
            }
            if let Some(n) = n {
                config.corpus.train = *n;
            }
            config.world.validate()?;
            let path = common.out.clone().unwrap_or_else(|| PathBuf::from("corpus.jsonl"));
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
            std::fs::create_dir_all(&dir).map_err(Error::from)?;
            let corpus = generate_corpus(&config.world, config.corpus.train_seed, config.corpus.train)?;
            write_corpus(&path, &corpus)?;
            write_run_json(&dir, name, &config, json!({ "scenarios": corpus.len(), "corpus": path }))?;
        }
        Command::Train { corpus, epochs, .. } => {
            if let Some(e) = epochs {
                config.train.epochs = *e;
            }
            config.validate()?;
            let dir = out_dir(common)?;
            let scenarios = match corpus {
                Some(p) => read_corpus(p)?,
                None => generate_corpus(&config.world, config.corpus.train_seed, config.corpus.train)?,
            };
            check_corpus(&config, &scenarios)?;
            let prototypes = Prototypes::estimate(&scenarios);
            let data = prepare(
                &scenarios,
                &prototypes,
                &config.eventifier,
                config.train.negatives,
                config.corpus.train_seed,
            );
            let mut trainer = Trainer::new(initial_model(&config)?, config.train.clone())?;
            let every = config.train.checkpoint_every;
            let model_config = config.model.clone();
            let metrics = trainer.fit(&data, |t, _| {
                if every > 0 && t.epoch % every == 0 {
                    save_checkpoint(&t.checkpoint(&model_config), &dir.join(format!("checkpoint_epoch{}.json", t.epoch)))?;
                }
                Ok(())
            })?;
            save_checkpoint(&trainer.checkpoint(&config.model), &dir.join("checkpoint.json"))?;
            std::fs::write(dir.join("prototypes.json"), serde_json::to_string(&prototypes).map_err(Error::from)?)
                .map_err(Error::from)?;
            std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics)).map_err(Error::from)?;
            let last = metrics.last();
            write_run_json(
                &dir,
                name,
                &config,
                json!({
                    "epochs": trainer.epoch,
                    "steps": trainer.step,
                    "final_loss": last.map(|m| m.loss_total),
                    "final_mean_len": last.map(|m| m.mean_len),
                    "skipped": metrics.iter().map(|m| m.skipped.len()).sum::<usize>(),
                }),
            )?;
        }
        Command::Eval { input, .. } | Command::Intervene { input, .. } => {
            let (model, prepared) = load_for_eval(&mut config, input)?;
            let dir = out_dir(common)?;
            let objective = config.train.objective;
            if matches!(command, Command::Eval { .. }) {
                let results = evaluate(&model, &prepared, &objective, &config.eval, ChainSource::Policy);
                std::fs::write(dir.join("eval.csv"), eval_csv(&results)).map_err(Error::from)?;
                std::fs::write(dir.join("tiers.csv"), tier_csv(&stratify(&results))).map_err(Error::from)?;
                let summary = summarize(&results);
                write_run_json(&dir, name, &config, serde_json::to_value(summary).map_err(Error::from)?)?;
            } else {
                let results = intervention_sweep(
                    &model,
                    &prepared,
                    &objective,
                    &config.eval,
                    &InterventionMode::ALL,
                    &AntonymMap::default(),
                    config.eval.seed,
                )?;
                std::fs::write(dir.join("intervention.csv"), intervention_csv(&results)).map_err(Error::from)?;
                write_run_json(&dir, name, &config, serde_json::to_value(&results).map_err(Error::from)?)?;
            }
        }
        Command::Sweep { axis, grid, .. } => {
            config.validate()?;
            let axis = SweepAxis::parse(axis).ok_or_else(|| Error::Config(format!("unknown axis {axis}")))?;
            let grid = grid.clone().unwrap_or_else(|| axis.default_grid());
            let dir = out_dir(common)?;
            let rows = sweep(axis, &grid, &config)?;
            std::fs::write(dir.join("sweep.csv"), sweep_csv(&rows)).map_err(Error::from)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            write_run_json(&dir, name, &config, json!({ "axis": axis, "grid": grid, "failed_settings": failed }))?;
        }
        Command::Gradcheck { instances, .. } => {
            let dir = out_dir(common)?;
            let seed = config.train.seed;
            let rows = gradcheck_suite(seed, *instances)?;
            std::fs::write(dir.join("gradcheck.csv"), gradcheck_csv(&rows)).map_err(Error::from)?;
            let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
            let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            write_run_json(
                &dir,
                name,
                &config,
                json!({ "checks": rows.len(), "failed": failed.len(), "max_rel_error": worst }),
            )?;
            if let Some(f) = failed.first() {
                return Err(Failure::Check(CheckFailed(format!(
                    "{} of {} gradient checks failed; first: {} instance {} rel error {}",
                    failed.len(),
                    rows.len(),
                    f.path,
                    f.instance,
                    f.max_rel_error
                ))));
            }
        }
        Command::Influence { checkpoint, eta, probes, .. } => {
            let model = match checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    config.model = ck.config.model.clone();
                    ck.model()?
                }
                None => initial_model(&config)?,
            };
            config.validate()?;
            let dir = out_dir(common)?;
            let data = prepare_data(&config)?;
            let pairs: Vec<(&PreparedScenario, ReasoningChainPair)> = data
                .test
                .windows(2)
                .filter_map(|w| {
                    let a = to_detected_space(&w[0].scenario.truth_chain, &w[0].grounding);
                    let b = to_detected_space(&w[1].scenario.truth_chain, &w[1].grounding);
                    (!a.is_empty() && !b.is_empty() && w[0].events().len() >= 2 && w[1].events().len() >= 2)
                        .then_some((&w[0], (a, &w[1], b)))
                })
                .take(*probes)
                .collect();
            let reports = pairs
                .iter()
                .map(|(tr, (ct, te, cs))| influence_probe(&model, &config.train.objective, (tr, ct), (te, cs), *eta))
                .collect::<Result<Vec<_>>>()?;
            std::fs::write(dir.join("influence.csv"), influence_csv(&reports)).map_err(Error::from)?;
            write_run_json(&dir, name, &config, json!({ "probes": reports.len(), "eta": eta }))?;
        }
    }
    Ok(())
}

type ReasoningChainPair<'a> = (crate::event::ReasoningChain, &'a PreparedScenario, crate::event::ReasoningChain);

fn check_corpus(config: &RunConfig, corpus: &[Scenario]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    for s in corpus {
        if s.config.feature_width != config.model.feature_width {
            return Err(Error::Config(format!(
                "corpus feature width {} does not match model feature_width {}",
                s.config.feature_width, config.model.feature_width
            )));
        }
    }
    Ok(())
}

/// Loads the checkpoint, validates it against the world before any
/// compute, and eventifies the evaluation corpus.
fn load_for_eval(config: &mut RunConfig, input: &ModelInput) -> Result<(ModelState, Vec<PreparedScenario>)> {
    let ck = load_checkpoint(&input.checkpoint)?;
    config.model = ck.config.model.clone();
    config.train.objective = ck.config.train.objective;
    config.train.negatives = ck.config.train.negatives;
    config.validate()?;
    let corpus = match &input.corpus {
        Some(p) => read_corpus(p)?,
        None => generate_corpus(&config.world, config.corpus.test_seed, config.corpus.test)?,
    };
    check_corpus(config, &corpus)?;
    let proto_path = input
        .prototypes
        .clone()
        .unwrap_or_else(|| input.checkpoint.with_file_name("prototypes.json"));
    let prototypes: Prototypes = match std::fs::read_to_string(&proto_path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) if input.prototypes.is_none() => {
            let train = generate_corpus(&config.world, config.corpus.train_seed, config.corpus.train)?;
            Prototypes::estimate(&train)
        }
        Err(e) => return Err(Error::Config(format!("cannot read {}: {e}", proto_path.display()))),
    };
    let model = ck.model()?;
    let prepared = prepare(&corpus, &prototypes, &config.eventifier, config.train.negatives, config.corpus.test_seed);
    Ok((model, prepared))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_json_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"world":{"events":5,"frames":40},"train":{"seed":3}}"#).unwrap();
        let common = Common {
            seed: Some(9),
            config: Some(path),
            out: None,
            k: None,
        };
        let c = resolve_config(&common).unwrap();
        assert_eq!(c.world.events, 5);
        assert_eq!(c.world.frames, 40);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.epochs, RunConfig::default().train.epochs);
        let c = resolve_config(&Common { k: Some(4), ..common }).unwrap();
        assert_eq!(c.world.events, 4);
    }

    #[test]
    fn bad_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{not json").unwrap();
        let common = Common {
            seed: None,
            config: Some(path.clone()),
            out: None,
            k: None,
        };
        assert!(matches!(resolve_config(&common), Err(Error::Config(_))));
        let missing = Common {
            config: Some(dir.path().join("missing.json")),
            ..common
        };
        assert!(matches!(resolve_config(&missing), Err(Error::Config(_))));
    }

    #[test]
    fn error_line_is_single_line_json() {
        let line = error_line("config", 2, "a\nb");
        assert!(!line.contains('\n'));
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["code"], 2);
        assert_eq!(v["error"], "config");
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["eventchain", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["eventchain", "gen", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["eventchain", "--help"]), EXIT_OK);
    }
}
