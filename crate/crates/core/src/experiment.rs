//! Resolved run configuration and the corpus → train → evaluate pipeline
//! shared by the CLI, sweeps and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::{evaluate, summarize, ChainSource, EvalConfig, EvalSummary, ScenarioEval};
use crate::eventifier::{EventifierConfig, Prototypes};
use crate::model::{ModelConfig, ModelState};
use crate::pipeline::{prepare, PreparedScenario};
use crate::trainer::{StepMetrics, TrainConfig, Trainer};
use crate::world::{generate_corpus, Scenario, WorldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train: usize,
    pub test: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 100,
            train_seed: 0,
            test_seed: 100_000,
        }
    }
}

/// Every knob of a run. Deserialization fills missing fields with defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub eventifier: EventifierConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub corpus: CorpusConfig,
}

impl RunConfig {
    /// Validates every section and their cross-constraints before any compute.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.model.check_world(&self.world)?;
        self.train.validate()?;
        if self.eval.samples == 0 {
            return Err(crate::Error::Config("eval.samples must be >= 1".into()));
        }
        if !(self.eval.temperature > 0.0) {
            return Err(crate::Error::Config("eval.temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Eventified train and test splits with their shared prototypes.
pub struct Data {
    pub train_corpus: Vec<Scenario>,
    pub test_corpus: Vec<Scenario>,
    pub prototypes: Prototypes,
    pub train: Vec<PreparedScenario>,
    pub test: Vec<PreparedScenario>,
}

/// Prototypes are estimated on the training split only.
pub fn prepare_data(config: &RunConfig) -> Result<Data> {
    config.validate()?;
    let c = config.corpus;
    let train_corpus = generate_corpus(&config.world, c.train_seed, c.train)?;
    let test_corpus = generate_corpus(&config.world, c.test_seed, c.test)?;
    let prototypes = Prototypes::estimate(&train_corpus);
    let sampling = config.train.negatives;
    let train = prepare(&train_corpus, &prototypes, &config.eventifier, sampling, c.train_seed);
    let test = prepare(&test_corpus, &prototypes, &config.eventifier, sampling, c.test_seed);
    Ok(Data {
        train_corpus,
        test_corpus,
        prototypes,
        train,
        test,
    })
}

/// Model initialized from `train.seed`.
pub fn initial_model(config: &RunConfig) -> Result<ModelState> {
    ModelState::new(config.model.clone(), config.train.seed)
}

pub struct Outcome {
    pub trainer: Trainer,
    pub metrics: Vec<StepMetrics>,
    pub before: EvalSummary,
    pub after: EvalSummary,
    pub results: Vec<Result<ScenarioEval>>,
}

/// Trains from scratch on `data.train` and evaluates policy-selected chains
/// on `data.test` before and after training.
pub fn run(
    config: &RunConfig,
    data: &Data,
    on_epoch: impl FnMut(&Trainer, &[StepMetrics]) -> Result<()>,
) -> Result<Outcome> {
    let model = initial_model(config)?;
    let objective = config.train.objective;
    let before = summarize(&evaluate(&model, &data.test, &objective, &config.eval, ChainSource::Policy));
    let mut trainer = Trainer::new(model, config.train.clone())?;
    let metrics = trainer.fit(&data.train, on_epoch)?;
    let results = evaluate(&trainer.model, &data.test, &objective, &config.eval, ChainSource::Policy);
    let after = summarize(&results);
    Ok(Outcome {
        trainer,
        metrics,
        before,
        after,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"world":{"events":3},"train":{"epochs":2}}"#).unwrap();
        assert_eq!(c.world.events, 3);
        assert_eq!(c.world.frames, WorldConfig::default().frames);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.corpus, CorpusConfig::default());
    }

    #[test]
    fn width_mismatch_fails_validation() {
        let mut c = RunConfig::default();
        c.model.feature_width = 8;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
        assert!(prepare_data(&c).is_err());
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let mut c = RunConfig::default();
        c.world.events = 3;
        c.world.frames = 32;
        c.corpus = CorpusConfig {
            train: 8,
            test: 4,
            train_seed: 1,
            test_seed: 50,
        };
        c.train.epochs = 1;
        let data = prepare_data(&c).unwrap();
        let a = run(&c, &data, |_, _| Ok(())).unwrap();
        let b = run(&c, &data, |_, _| Ok(())).unwrap();
        assert_eq!(crate::trainer::metrics_csv(&a.metrics), crate::trainer::metrics_csv(&b.metrics));
        assert_eq!(a.after, b.after);
    }
}
