//! Inference and scoring against planted truth.
//!
//! Inference draws `N` hard samples and keeps the one minimizing
//! `L_aux(V)`. No negative exists at inference time, so the CF term is
//! dropped there.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventifier::{EventifierConfig, Prototypes};
use crate::event::ReasoningChain;
use crate::generator::{sample_and_select, PolicyParams, Selection};
use crate::model::ModelState;
use crate::numeric::SeededRng;
use crate::objectives::{aux_loss, AuxInputs, AuxLossReport, ObjectiveConfig};
use crate::pipeline::{edge_f1, negative_events, semantic_only, to_detected_space, to_truth_space, EdgeScore, PreparedScenario};
use crate::verifier::score_chain;
use crate::world::{CounterfactualMode, DensityTier, Scenario};

const EVAL_STREAM: u64 = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Inference samples N.
    pub samples: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 5,
            seed: 0,
            temperature: 0.1,
        }
    }
}

/// Where evaluated chains come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainSource {
    /// Sample-and-select with the model's policy.
    Policy,
    /// Sample-and-select with an all-zero policy (uniform actions).
    Uniform,
    /// The planted chain mapped onto detected events.
    Truth,
}

/// `L_aux(V)` with the CF term dropped and `|C|` as the length.
pub fn inference_loss(
    model: &ModelState,
    prep: &PreparedScenario,
    objective: &ObjectiveConfig,
    chain: &ReasoningChain,
) -> Result<AuxLossReport> {
    aux_loss(
        AuxInputs {
            chain,
            events: prep.events(),
            frames: &prep.frames,
            negative: None,
            length: chain.len() as f64,
        },
        &model.verifier,
        &model.codebook,
        &model.predictor,
        objective,
        false,
    )
}

pub fn select_chain(
    model: &ModelState,
    policy: &PolicyParams,
    prep: &PreparedScenario,
    objective: &ObjectiveConfig,
    config: &EvalConfig,
) -> Result<Selection> {
    let mut rng = SeededRng::with_stream(config.seed, EVAL_STREAM + prep.index as u64);
    sample_and_select(
        policy,
        &model.codebook,
        prep.events(),
        config.samples,
        &mut rng,
        config.temperature,
        |c| Ok(inference_loss(model, prep, objective, c)?.total),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioEval {
    pub index: usize,
    pub density: DensityTier,
    pub detected: usize,
    /// Selected chain over detected events.
    pub chain: ReasoningChain,
    pub edges: EdgeScore,
    pub semantic: EdgeScore,
    pub belief: f64,
    pub logic: f64,
    pub pred: f64,
    pub total: f64,
    pub length: usize,
}

pub fn evaluate_scenario(
    model: &ModelState,
    prep: &PreparedScenario,
    objective: &ObjectiveConfig,
    config: &EvalConfig,
    source: ChainSource,
) -> Result<ScenarioEval> {
    if prep.events().len() < 2 {
        return Err(Error::Contract(format!("{} detected events", prep.events().len())));
    }
    let chain = match source {
        ChainSource::Policy => select_chain(model, &model.policy, prep, objective, config)?.chain().clone(),
        ChainSource::Uniform => {
            let zero = PolicyParams::zeros(model.config.policy, model.config.feature_width, model.config.embedding_width);
            select_chain(model, &zero, prep, objective, config)?.chain().clone()
        }
        ChainSource::Truth => to_detected_space(&prep.scenario.truth_chain, &prep.grounding),
    };
    let report = inference_loss(model, prep, objective, &chain)?;
    let mapped = to_truth_space(&chain, &prep.grounding);
    let truth = &prep.scenario.truth_chain;
    Ok(ScenarioEval {
        index: prep.index,
        density: prep.scenario.density,
        detected: prep.events().len(),
        edges: edge_f1(&mapped, truth, |_| true),
        semantic: edge_f1(&mapped, truth, semantic_only(&model.codebook)),
        belief: report.belief,
        logic: report.logic,
        pred: report.pred,
        total: report.total,
        length: chain.len(),
        chain,
    })
}

/// Evaluates every scenario in parallel; failures are returned in place.
pub fn evaluate(
    model: &ModelState,
    prepared: &[PreparedScenario],
    objective: &ObjectiveConfig,
    config: &EvalConfig,
    source: ChainSource,
) -> Vec<Result<ScenarioEval>> {
    prepared
        .par_iter()
        .map(|p| evaluate_scenario(model, p, objective, config, source))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalSummary {
    pub scenarios: usize,
    pub failures: usize,
    pub f1: f64,
    pub semantic_f1: f64,
    pub mean_belief: f64,
    pub mean_logic: f64,
    pub mean_pred: f64,
    pub mean_len: f64,
    /// Mean of `−(L_pred + L_logic)`.
    pub utility: f64,
}

pub fn summarize(results: &[Result<ScenarioEval>]) -> EvalSummary {
    let ok: Vec<&ScenarioEval> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let n = ok.len() as f64;
    let mean = |f: &dyn Fn(&ScenarioEval) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|e| f(e)).sum::<f64>() / n
        }
    };
    EvalSummary {
        scenarios: ok.len(),
        failures: results.len() - ok.len(),
        f1: mean(&|e| e.edges.f1),
        semantic_f1: mean(&|e| e.semantic.f1),
        mean_belief: mean(&|e| e.belief),
        mean_logic: mean(&|e| e.logic),
        mean_pred: mean(&|e| e.pred),
        mean_len: mean(&|e| e.length as f64),
        utility: mean(&|e| -(e.pred + e.logic)),
    }
}

pub const EVAL_HEADER: &str = "index,density,detected,length,f1,semantic_f1,belief,logic,pred,total";

pub fn eval_csv(results: &[Result<ScenarioEval>]) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for e in results.iter().filter_map(|r| r.as_ref().ok()) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            e.index,
            e.density.as_str(),
            e.detected,
            e.length,
            e.edges.f1,
            e.semantic.f1,
            e.belief,
            e.logic,
            e.pred,
            e.total
        ));
    }
    out
}

/// Mean of `L_logic(C*; V⁻) − L_logic(C*; V)` over `modes`, with `C*` the
/// planted chain on detected events. `None` when no mode yields a negative.
#[allow(clippy::too_many_arguments)]
pub fn verifier_margin(
    model: &ModelState,
    prep: &PreparedScenario,
    modes: &[CounterfactualMode],
    pool: &[Scenario],
    prototypes: &Prototypes,
    eventifier: &EventifierConfig,
    seed: u64,
) -> Result<Option<f64>> {
    let chain = to_detected_space(&prep.scenario.truth_chain, &prep.grounding);
    let real = score_chain(&chain, prep.events(), &model.verifier, &model.codebook)?.0.loss;
    let mut acc = Vec::new();
    for &mode in modes {
        let Ok(neg) = negative_events(&prep.scenario, &prep.grounding, mode, seed, pool, prototypes, eventifier) else {
            continue;
        };
        let l = score_chain(&chain, &neg, &model.verifier, &model.codebook)?.0.loss;
        acc.push(l - real);
    }
    Ok((!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64))
}
