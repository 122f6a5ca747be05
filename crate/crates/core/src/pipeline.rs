//! Scenario preparation shared by training, evaluation and diagnostics:
//! eventification, counterfactual negatives in detected-event space, chain
//! mapping and edge-recovery scores.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Edge, Event, OperatorCodebook, ReasoningChain};
use crate::eventifier::{ground_scenario, EventifierConfig, Grounding, Prototypes};
use crate::numeric::{Matrix, SeededRng};
use crate::world::{make_counterfactual, CounterfactualEdit, CounterfactualMode, Scenario};

#[derive(Clone, Debug, PartialEq)]
pub struct Negative {
    pub mode: CounterfactualMode,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug)]
pub struct PreparedScenario {
    pub index: usize,
    pub scenario: Scenario,
    pub frames: Matrix,
    pub grounding: Grounding,
    pub negative: Option<Negative>,
}

impl PreparedScenario {
    pub fn events(&self) -> &[Event] {
        &self.grounding.events
    }
}

/// Applies the counterfactual edit to the detected events through the truth
/// alignment. Cross-video negatives are the eventified pool scenario and
/// must have the same event count.
pub fn negative_events(
    scenario: &Scenario,
    grounding: &Grounding,
    mode: CounterfactualMode,
    seed: u64,
    pool: &[Scenario],
    prototypes: &Prototypes,
    eventifier: &EventifierConfig,
) -> Result<Vec<Event>> {
    let cf = make_counterfactual(scenario, mode, seed, pool)?;
    let detected = |t: usize| {
        grounding
            .detected_for(t)
            .ok_or_else(|| Error::Counterfactual(format!("truth event {t} was not detected")))
    };
    let mut events = grounding.events.clone();
    match cf.edit {
        CounterfactualEdit::SwapSupports { a, b } => {
            let (da, db) = (detected(a)?, detected(b)?);
            let s = events[da].support;
            events[da].support = events[db].support;
            events[db].support = s;
        }
        CounterfactualEdit::SwapFeatures { a, b } => {
            let (da, db) = (detected(a)?, detected(b)?);
            let f = events[da].feature.clone();
            events[da].feature = events[db].feature.clone();
            events[db].feature = f;
        }
        CounterfactualEdit::Replace { .. } => {
            let other = &cf.scenario;
            let g = ground_scenario(other, &other.frames(), prototypes, eventifier);
            if g.events.len() != events.len() {
                return Err(Error::EventCount {
                    expected: events.len(),
                    got: g.events.len(),
                });
            }
            events = g.events;
        }
    }
    Ok(events)
}

/// Negative-sampling policy: a fixed mode, or uniform over all modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    #[default]
    Uniform,
    Temporal,
    FeatureSwap,
    CrossVideo,
}

impl NegativeSampling {
    fn draw(self, rng: &mut SeededRng) -> CounterfactualMode {
        match self {
            NegativeSampling::Uniform => CounterfactualMode::ALL[rng.below(3)],
            NegativeSampling::Temporal => CounterfactualMode::Temporal,
            NegativeSampling::FeatureSwap => CounterfactualMode::FeatureSwap,
            NegativeSampling::CrossVideo => CounterfactualMode::CrossVideo,
        }
    }
}

/// Eventifies every scenario and draws one negative each. A failed mode
/// falls back to temporal; if that fails too the scenario has no negative.
pub fn prepare(
    corpus: &[Scenario],
    prototypes: &Prototypes,
    eventifier: &EventifierConfig,
    sampling: NegativeSampling,
    seed: u64,
) -> Vec<PreparedScenario> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(index, scenario)| {
            let frames = scenario.frames();
            let grounding = ground_scenario(scenario, &frames, prototypes, eventifier);
            let mut rng = SeededRng::with_stream(seed, 1000 + index as u64);
            let mode = sampling.draw(&mut rng);
            let cf_seed = seed.wrapping_add(index as u64);
            let negative = [mode, CounterfactualMode::Temporal].into_iter().find_map(|m| {
                negative_events(scenario, &grounding, m, cf_seed, corpus, prototypes, eventifier)
                    .ok()
                    .map(|events| Negative { mode: m, events })
            });
            PreparedScenario {
                index,
                scenario: scenario.clone(),
                frames,
                grounding,
                negative,
            }
        })
        .collect()
}

/// Maps a chain over detected events to truth event ids. Edges touching an
/// unaligned event, and self-loops created by over-segmentation, are dropped.
pub fn to_truth_space(chain: &ReasoningChain, grounding: &Grounding) -> ReasoningChain {
    let edges = chain
        .edges
        .iter()
        .filter_map(|e| {
            let a = (*grounding.alignment.get(e.source)?)?;
            let b = (*grounding.alignment.get(e.target)?)?;
            (a != b).then_some(Edge::new(a, e.op, b))
        })
        .collect();
    ReasoningChain::new(edges).canonicalize()
}

/// Maps a truth chain onto detected events; edges with an undetected
/// endpoint are dropped.
pub fn to_detected_space(chain: &ReasoningChain, grounding: &Grounding) -> ReasoningChain {
    let edges = chain
        .edges
        .iter()
        .filter_map(|e| {
            let a = grounding.detected_for(e.source)?;
            let b = grounding.detected_for(e.target)?;
            (a != b).then_some(Edge::new(a, e.op, b))
        })
        .collect();
    ReasoningChain::new(edges).canonicalize()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set-based edge recovery. An empty side scores 0 unless both are empty.
pub fn edge_f1(predicted: &ReasoningChain, truth: &ReasoningChain, keep: impl Fn(&Edge) -> bool) -> EdgeScore {
    let p: HashSet<Edge> = predicted.edges.iter().filter(|e| keep(e)).copied().collect();
    let t: HashSet<Edge> = truth.edges.iter().filter(|e| keep(e)).copied().collect();
    if p.is_empty() && t.is_empty() {
        return EdgeScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let hit = p.intersection(&t).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { hit / p.len() as f64 };
    let recall = if t.is_empty() { 0.0 } else { hit / t.len() as f64 };
    let f1 = if hit == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    EdgeScore { precision, recall, f1 }
}

pub fn semantic_only(codebook: &OperatorCodebook) -> impl Fn(&Edge) -> bool + '_ {
    move |e: &Edge| !codebook.is_temporal(e.op)
}
