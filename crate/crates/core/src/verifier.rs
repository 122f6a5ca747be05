//! Hybrid edge verifier.
//!
//! Temporal operators are scored by fixed timestamp rules, semantic
//! operators by a learned head over `[v_a ⊕ v_b ⊕ e_z]`. Every edge score is
//! `σ(logit)`; the chain belief is the product of edge scores and the logic
//! loss is `−Σ log s_i` with scores clamped to `[1e-7, 1 − 1e-7]`.
//!
//! Orientation: an edge `(a, z, b)` reads "a z b", so `before` scores
//! `σ(k(τ_b^s − τ_a^e))` and `after` scores `σ(k(τ_a^s − τ_b^e))`, which makes
//! `after(a, b)` identical to `before(b, a)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Edge, Event, OpId, OperatorCodebook, OperatorKind, ReasoningChain, TemporalRule};
use crate::numeric::{join, sigmoid, Activation, Matrix, Mlp, MlpCache, Parameters, SeededRng};

pub const SCORE_FLOOR: f64 = 1e-7;
pub const SCORE_CEIL: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    /// Temporal slope k (frames⁻¹); fixed.
    pub slope: f64,
    /// Tolerance window of `meets`, in frames.
    pub meets_window: f64,
    pub hidden: usize,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            slope: 1.0,
            meets_window: 2.0,
            hidden: 32,
        }
    }
}

/// Learnable part of the verifier: the semantic head `Φ_θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verifier {
    pub config: VerifierConfig,
    pub head: Mlp,
}

impl Verifier {
    pub fn new(config: VerifierConfig, feature_width: usize, embedding_width: usize, rng: &mut SeededRng) -> Result<Self> {
        if !(config.slope > 0.0) {
            return Err(Error::Config(format!("temporal slope must be > 0, got {}", config.slope)));
        }
        let head = Mlp::random(
            2 * feature_width + embedding_width,
            config.hidden,
            1,
            Activation::Tanh,
            1.0,
            rng,
        );
        Ok(Self { config, head })
    }

    pub fn zeroed(config: VerifierConfig, feature_width: usize, embedding_width: usize) -> Self {
        Self {
            config,
            head: Mlp::zeros(2 * feature_width + embedding_width, config.hidden, 1, Activation::Tanh),
        }
    }
}

impl Parameters for Verifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

fn temporal_logit(rule: TemporalRule, a: &Event, b: &Event, k: f64, window: f64) -> f64 {
    match rule {
        TemporalRule::Before => k * (b.support.start - a.support.end),
        TemporalRule::After => k * (a.support.start - b.support.end),
        TemporalRule::Meets => k * (window - (b.support.start - a.support.end).abs()),
    }
}

pub fn score_temporal_edge(rule: TemporalRule, a: &Event, b: &Event, config: &VerifierConfig) -> f64 {
    sigmoid(temporal_logit(rule, a, b, config.slope, config.meets_window))
}

/// `∂s/∂τ` for the four timestamps of a temporal edge.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TimestampGrads {
    pub source_start: f64,
    pub source_end: f64,
    pub target_start: f64,
    pub target_end: f64,
}

/// `∂logit/∂τ`; multiply by `s(1 − s)` to get `∂s/∂τ`.
fn temporal_logit_grads(rule: TemporalRule, a: &Event, b: &Event, k: f64) -> TimestampGrads {
    let mut g = TimestampGrads::default();
    match rule {
        TemporalRule::Before => {
            g.target_start = k;
            g.source_end = -k;
        }
        TemporalRule::After => {
            g.source_start = k;
            g.target_end = -k;
        }
        TemporalRule::Meets => {
            let x = b.support.start - a.support.end;
            let sign = if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
            g.target_start = -k * sign;
            g.source_end = k * sign;
        }
    }
    g
}

pub fn temporal_edge_grads(rule: TemporalRule, a: &Event, b: &Event, config: &VerifierConfig) -> TimestampGrads {
    let s = score_temporal_edge(rule, a, b, config);
    let ds = s * (1.0 - s);
    let g = temporal_logit_grads(rule, a, b, config.slope);
    TimestampGrads {
        source_start: ds * g.source_start,
        source_end: ds * g.source_end,
        target_start: ds * g.target_start,
        target_end: ds * g.target_end,
    }
}

fn semantic_input(a: &Event, b: &Event, embedding: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(a.feature.len() * 2 + embedding.len());
    x.extend_from_slice(&a.feature);
    x.extend_from_slice(&b.feature);
    x.extend_from_slice(embedding);
    x
}

#[derive(Clone, Debug)]
pub struct SemanticCache {
    pub logit: f64,
    mlp: MlpCache,
}

pub fn score_semantic_edge(
    op: OpId,
    a: &Event,
    b: &Event,
    verifier: &Verifier,
    codebook: &OperatorCodebook,
) -> Result<(f64, SemanticCache)> {
    if codebook.is_temporal(op) {
        return Err(Error::Contract(format!(
            "temporal operator {:?} routed to the semantic head",
            codebook.name(op)
        )));
    }
    let (out, mlp) = verifier.head.forward(&semantic_input(a, b, codebook.embedding(op)))?;
    Ok((sigmoid(out[0]), SemanticCache { logit: out[0], mlp }))
}

/// Instrumented work counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreStats {
    /// Event-pair comparisons (one per scored edge or scanned pair).
    pub pair_comparisons: usize,
    /// Multiply-adds plus nonlinearity evaluations.
    pub operations: usize,
}

impl ScoreStats {
    fn edge(&mut self, temporal: bool, head: &Mlp) {
        self.pair_comparisons += 1;
        self.operations += if temporal {
            3
        } else {
            let (i, h, o) = (head.input_width(), head.hidden_width(), head.output_width());
            i * h + h + h * o + 1
        };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainScore {
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
    /// Π s_i
    pub belief: f64,
    /// −Σ log clamp(s_i)
    pub loss: f64,
    pub stats: ScoreStats,
}

#[derive(Clone, Debug)]
enum EdgeCache {
    Temporal,
    Semantic(MlpCache),
}

#[derive(Clone, Debug)]
pub struct ChainCache {
    chain: ReasoningChain,
    events: usize,
    edges: Vec<EdgeCache>,
}

fn score_edge(
    e: &Edge,
    events: &[Event],
    verifier: &Verifier,
    codebook: &OperatorCodebook,
    stats: &mut ScoreStats,
) -> Result<(f64, EdgeCache)> {
    let (a, b) = (&events[e.source], &events[e.target]);
    match codebook.kind(e.op) {
        OperatorKind::Temporal(rule) => {
            stats.edge(true, &verifier.head);
            let c = &verifier.config;
            Ok((temporal_logit(rule, a, b, c.slope, c.meets_window), EdgeCache::Temporal))
        }
        OperatorKind::Semantic => {
            stats.edge(false, &verifier.head);
            let (_, cache) = score_semantic_edge(e.op, a, b, verifier, codebook)?;
            Ok((cache.logit, EdgeCache::Semantic(cache.mlp)))
        }
    }
}

/// Scores a valid chain. Invalid chains are rejected with the full
/// violation report.
pub fn score_chain(
    chain: &ReasoningChain,
    events: &[Event],
    verifier: &Verifier,
    codebook: &OperatorCodebook,
) -> Result<(ChainScore, ChainCache)> {
    chain.validate(events.len(), codebook)?;
    score_edges_unchecked(chain, events, verifier, codebook)
}

/// Scores every edge as written, without validity checks beyond index
/// bounds. Used to evaluate deliberately corrupted chains (self-loops,
/// duplicates).
pub fn score_edges_unchecked(
    chain: &ReasoningChain,
    events: &[Event],
    verifier: &Verifier,
    codebook: &OperatorCodebook,
) -> Result<(ChainScore, ChainCache)> {
    let k = events.len();
    if let Some(e) = chain
        .edges
        .iter()
        .find(|e| e.source >= k || e.target >= k || e.op >= codebook.len())
    {
        return Err(Error::Contract(format!("edge {e:?} out of range")));
    }
    let mut stats = ScoreStats::default();
    let mut scores = Vec::with_capacity(chain.len());
    let mut logits = Vec::with_capacity(chain.len());
    let mut caches = Vec::with_capacity(chain.len());
    for e in &chain.edges {
        let (logit, cache) = score_edge(e, events, verifier, codebook, &mut stats)?;
        logits.push(logit);
        scores.push(sigmoid(logit));
        caches.push(cache);
    }
    let belief = scores.iter().product();
    let loss = scores
        .iter()
        .map(|s| -s.clamp(SCORE_FLOOR, SCORE_CEIL).ln())
        .sum();
    Ok((
        ChainScore {
            scores,
            logits,
            belief,
            loss,
            stats,
        },
        ChainCache {
            chain: chain.clone(),
            events: k,
            edges: caches,
        },
    ))
}

/// `∂(−log clamp(s))/∂logit`: `−(1 − s)` inside the clamp, 0 outside.
pub fn logic_loss_logit_grad(s: f64) -> f64 {
    if s > SCORE_FLOOR && s < SCORE_CEIL {
        -(1.0 - s)
    } else {
        0.0
    }
}

/// Gradients with respect to everything the verifier reads.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifierGrads {
    pub head: Mlp,
    pub embeddings: Matrix,
    pub features: Vec<Vec<f64>>,
    /// `[∂/∂τ^s, ∂/∂τ^e]` per event.
    pub supports: Vec<[f64; 2]>,
}

impl VerifierGrads {
    pub fn zeros(verifier: &Verifier, codebook: &OperatorCodebook, events: &[Event]) -> Self {
        Self {
            head: verifier.head.zeros_like(),
            embeddings: Matrix::zeros(codebook.len(), codebook.width()),
            features: events.iter().map(|e| vec![0.0; e.feature.len()]).collect(),
            supports: vec![[0.0; 2]; events.len()],
        }
    }
}

/// Backpropagates per-edge logit gradients `upstream[i] = ∂L/∂logit_i`
/// into `grads` (accumulating).
pub fn backward_logits_into(
    chain: &ReasoningChain,
    events: &[Event],
    verifier: &Verifier,
    codebook: &OperatorCodebook,
    cache: &ChainCache,
    upstream: &[f64],
    grads: &mut VerifierGrads,
) -> Result<()> {
    if cache.chain != *chain || cache.events != events.len() || upstream.len() != chain.len() {
        return Err(Error::StaleCache("chain cache does not match the chain being differentiated"));
    }
    let d = verifier.head.input_width() - codebook.width();
    let fw = d / 2;
    for ((e, ec), &g) in chain.edges.iter().zip(&cache.edges).zip(upstream) {
        if g == 0.0 {
            continue;
        }
        match (codebook.kind(e.op), ec) {
            (OperatorKind::Temporal(rule), EdgeCache::Temporal) => {
                let lg = temporal_logit_grads(rule, &events[e.source], &events[e.target], verifier.config.slope);
                grads.supports[e.source][0] += g * lg.source_start;
                grads.supports[e.source][1] += g * lg.source_end;
                grads.supports[e.target][0] += g * lg.target_start;
                grads.supports[e.target][1] += g * lg.target_end;
            }
            (OperatorKind::Semantic, EdgeCache::Semantic(mc)) => {
                let gx = verifier.head.backward_into(mc, &[g], &mut grads.head)?;
                for (x, y) in grads.features[e.source].iter_mut().zip(&gx[..fw]) {
                    *x += y;
                }
                for (x, y) in grads.features[e.target].iter_mut().zip(&gx[fw..2 * fw]) {
                    *x += y;
                }
                for (x, y) in grads.embeddings.row_mut(e.op).iter_mut().zip(&gx[2 * fw..]) {
                    *x += y;
                }
            }
            _ => return Err(Error::StaleCache("edge cache kind does not match operator")),
        }
    }
    Ok(())
}

/// Exact gradients of `scale · (−Σ log clamp(s_i))`, accumulated into `grads`.
pub fn logic_loss_backward_into(
    chain: &ReasoningChain,
    events: &[Event],
    verifier: &Verifier,
    codebook: &OperatorCodebook,
    score: &ChainScore,
    cache: &ChainCache,
    scale: f64,
    grads: &mut VerifierGrads,
) -> Result<()> {
    let upstream: Vec<f64> = score
        .scores
        .iter()
        .map(|&s| scale * logic_loss_logit_grad(s))
        .collect();
    backward_logits_into(chain, events, verifier, codebook, cache, &upstream, grads)
}

pub fn logic_loss_backward(
    chain: &ReasoningChain,
    events: &[Event],
    verifier: &Verifier,
    codebook: &OperatorCodebook,
    score: &ChainScore,
    cache: &ChainCache,
) -> Result<VerifierGrads> {
    let mut grads = VerifierGrads::zeros(verifier, codebook, events);
    logic_loss_backward_into(chain, events, verifier, codebook, score, cache, 1.0, &mut grads)?;
    Ok(grads)
}

/// Scores `op` on every ordered pair of distinct events.
pub fn pairwise_scan(
    events: &[Event],
    op: OpId,
    verifier: &Verifier,
    codebook: &OperatorCodebook,
) -> Result<(Vec<(usize, usize, f64)>, ScoreStats)> {
    let mut stats = ScoreStats::default();
    let mut out = Vec::new();
    for a in 0..events.len() {
        for b in 0..events.len() {
            if a == b {
                continue;
            }
            let (logit, _) = score_edge(&Edge::new(a, op, b), events, verifier, codebook, &mut stats)?;
            out.push((a, b, sigmoid(logit)));
        }
    }
    Ok((out, stats))
}
