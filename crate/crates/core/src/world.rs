//! Synthetic scenarios with planted causal structure.
//!
//! Each scenario is a stream of `T` frames of width `d` produced by `K`
//! events. Labels map to fixed per-vocabulary codes; a planted semantic edge
//! `(a, z, b)` adds `β · W_z · base(v_a)` to `v_b`, where `W_z` is a fixed
//! random matrix per relation. Vocabulary codes and `W_z` depend only on
//! `WorldConfig::world_seed`, so every scenario of a corpus shares them.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{
    Edge, Event, EventLabel, OperatorCodebook, ReasoningChain, TemporalSupport, Vocabulary,
    BEFORE, CAUSE, ENABLE, PREVENT,
};
use crate::numeric::{axpy, Matrix, SeededRng};

const STRUCTURE_STREAM: u64 = 0;
const FRAME_STREAM: u64 = 1;
const COUNTERFACTUAL_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// K
    pub events: usize,
    /// T
    pub frames: usize,
    /// d
    pub feature_width: usize,
    pub vocabulary: Vocabulary,
    pub min_semantic_edges: usize,
    pub max_semantic_edges: usize,
    /// Relations planted on semantic edges (operator names).
    pub relations: Vec<String>,
    /// β
    pub coupling: f64,
    /// σ_n
    pub noise: f64,
    pub delta_vis: f64,
    pub delta_logic: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_gap: usize,
    pub allow_overlap: bool,
    pub world_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            events: 8,
            frames: 64,
            feature_width: 16,
            vocabulary: Vocabulary {
                premises: 3,
                actions: 3,
                objects: 3,
            },
            min_semantic_edges: 1,
            max_semantic_edges: 3,
            relations: vec!["cause".into(), "enable".into(), "prevent".into()],
            coupling: 1.0,
            noise: 0.1,
            delta_vis: 0.5,
            delta_logic: 0.2,
            min_duration: 3,
            max_duration: 6,
            min_gap: 2,
            allow_overlap: false,
            world_seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.events < 2 {
            return bad(format!("need at least 2 events, got {}", self.events));
        }
        if self.frames < self.events {
            return bad(format!("frames {} < events {}", self.frames, self.events));
        }
        if self.feature_width == 0 {
            return bad("feature width must be positive".into());
        }
        let v = self.vocabulary;
        if v.premises == 0 || v.actions == 0 || v.objects == 0 {
            return bad("vocabulary sizes must be positive".into());
        }
        if self.min_semantic_edges > self.max_semantic_edges {
            return bad("min_semantic_edges > max_semantic_edges".into());
        }
        if !(self.coupling >= 0.0 && self.coupling.is_finite()) {
            return bad(format!("coupling must be finite and >= 0, got {}", self.coupling));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(0.0 < self.delta_logic && self.delta_logic <= self.delta_vis && self.delta_vis <= 1.0)
        {
            return bad("need 0 < delta_logic <= delta_vis <= 1".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("need 0 < min_duration <= max_duration".into());
        }
        if self.relations.is_empty() {
            return bad("at least one planted relation is required".into());
        }
        for r in &self.relations {
            relation_id(r)?;
        }
        Ok(())
    }

    pub fn relation_ids(&self) -> Result<Vec<usize>> {
        self.relations.iter().map(|r| relation_id(r)).collect()
    }
}

fn relation_id(name: &str) -> Result<usize> {
    match name {
        "cause" => Ok(CAUSE),
        "enable" => Ok(ENABLE),
        "prevent" => Ok(PREVENT),
        other => Err(Error::Config(format!("unknown planted relation {other:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityTier {
    Sparse,
    Medium,
    Dense,
}

impl DensityTier {
    /// sparse ≤ 3 planted semantic edges, medium 4–6, dense > 6.
    pub fn from_semantic_edges(n: usize) -> Self {
        match n {
            0..=3 => DensityTier::Sparse,
            4..=6 => DensityTier::Medium,
            _ => DensityTier::Dense,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DensityTier::Sparse => "sparse",
            DensityTier::Medium => "medium",
            DensityTier::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub config: WorldConfig,
    /// Ground-truth events, sorted by start time.
    pub events: Vec<Event>,
    pub truth_chain: ReasoningChain,
    pub density: DensityTier,
}

impl Scenario {
    pub fn semantic_edges(&self) -> Vec<Edge> {
        self.truth_chain
            .edges
            .iter()
            .filter(|e| e.op != BEFORE)
            .copied()
            .collect()
    }

    pub fn frames(&self) -> Matrix {
        render_frames(&self.events, &self.config, self.seed)
    }
}

/// Fixed vocabulary codes and relation matrices shared by a corpus.
#[derive(Clone, Debug)]
pub struct WorldBasis {
    premise: Vec<Vec<f64>>,
    action: Vec<Vec<f64>>,
    object: Vec<Vec<f64>>,
    relations: BTreeMap<usize, Matrix>,
}

impl WorldBasis {
    pub fn new(config: &WorldConfig) -> Self {
        let d = config.feature_width;
        let mut rng = SeededRng::new(config.world_seed);
        // Split the feature space into three blocks so premise, action and
        // object codes do not interfere; codes within a block are
        // orthogonal whenever the block is wide enough.
        let b0 = d / 3;
        let b1 = d / 3;
        let blocks = [(0, b0), (b0, b1), (b0 + b1, d - b0 - b1)];
        let v = config.vocabulary;
        let counts = [v.premises, v.actions, v.objects];
        let mut banks = Vec::new();
        for ((offset, width), n) in blocks.into_iter().zip(counts) {
            banks.push(block_codes(n as usize, offset, width, d, &mut rng));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let relations = [CAUSE, ENABLE, PREVENT]
            .into_iter()
            .map(|z| (z, Matrix::from_fn(d, d, |_, _| scale * rng.normal())))
            .collect();
        let object = banks.pop().unwrap();
        let action = banks.pop().unwrap();
        let premise = banks.pop().unwrap();
        Self {
            premise,
            action,
            object,
            relations,
        }
    }

    /// Label-determined feature before relation coupling.
    pub fn base_feature(&self, label: &EventLabel) -> Vec<f64> {
        let mut v = self.premise[label.premise as usize].clone();
        axpy(1.0, &self.action[label.action as usize], &mut v);
        axpy(1.0, &self.object[label.object as usize], &mut v);
        v
    }

    pub fn relation(&self, op: usize) -> Option<&Matrix> {
        self.relations.get(&op)
    }
}

/// `n` codes supported on `[offset, offset + width)`, each of squared norm
/// `d / 3` so the three blocks contribute comparable energy.
fn block_codes(n: usize, offset: usize, width: usize, d: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let target = (d as f64 / 3.0).sqrt();
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut local: Vec<f64> = (0..width.max(1)).map(|_| rng.normal()).collect();
        if i < width {
            for prev in &codes {
                let p = &prev[offset..offset + width];
                let proj = crate::numeric::dot(&local, p) / crate::numeric::dot(p, p);
                axpy(-proj, p, &mut local);
            }
        }
        let nrm = crate::numeric::norm(&local).max(1e-12);
        let mut full = vec![0.0; d];
        for (k, x) in local.iter().enumerate().take(width) {
            full[offset + k] = target * x / nrm;
        }
        codes.push(full);
    }
    codes
}

/// Pure function of `(config, seed)`.
pub fn generate_scenario(config: &WorldConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let basis = WorldBasis::new(config);
    generate_with_basis(config, &basis, seed)
}

pub fn generate_with_basis(config: &WorldConfig, basis: &WorldBasis, seed: u64) -> Result<Scenario> {
    let mut rng = SeededRng::with_stream(seed, STRUCTURE_STREAM);
    let supports = place_supports(config, &mut rng)?;
    let k = config.events;
    let v = config.vocabulary;
    let labels: Vec<EventLabel> = (0..k)
        .map(|_| EventLabel {
            premise: rng.below(v.premises as usize) as u16,
            action: rng.below(v.actions as usize) as u16,
            object: rng.below(v.objects as usize) as u16,
        })
        .collect();

    // Candidate semantic pairs: strict temporal precedence.
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|a| (0..k).map(move |b| (a, b)))
        .filter(|&(a, b)| a != b && supports[a].end < supports[b].start)
        .collect();
    let wanted = config
        .min_semantic_edges
        .max(rng.range_inclusive(config.min_semantic_edges, config.max_semantic_edges));
    if wanted > pairs.len() {
        return Err(Error::Generation(format!(
            "{wanted} semantic edges requested but only {} ordered pairs exist",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let relations = config.relation_ids()?;
    let mut planted: Vec<Edge> = order[..wanted]
        .iter()
        .map(|&i| {
            let (a, b) = pairs[i];
            Edge::new(a, relations[rng.below(relations.len())], b)
        })
        .collect();
    planted.sort();

    let bases: Vec<Vec<f64>> = labels.iter().map(|l| basis.base_feature(l)).collect();
    let mut features = bases.clone();
    for e in &planted {
        let w = basis.relation(e.op).expect("planted relations have matrices");
        let coupled = w.matvec(&bases[e.source]);
        axpy(config.coupling, &coupled, &mut features[e.target]);
    }

    let mut truth = planted.clone();
    let mut linked = HashSet::new();
    for e in &planted {
        if linked.insert((e.source, e.target)) {
            truth.push(Edge::new(e.source, BEFORE, e.target));
        }
    }
    let truth_chain = ReasoningChain::new(truth).canonicalize();

    let events = labels
        .into_iter()
        .zip(features)
        .zip(supports)
        .map(|((label, feature), support)| Event {
            label,
            feature,
            support,
        })
        .collect();
    Ok(Scenario {
        seed,
        config: config.clone(),
        events,
        truth_chain,
        density: DensityTier::from_semantic_edges(planted.len()),
    })
}

fn place_supports(config: &WorldConfig, rng: &mut SeededRng) -> Result<Vec<TemporalSupport>> {
    let k = config.events;
    let t = config.frames;
    if config.allow_overlap {
        if config.min_duration > t {
            return Err(Error::Generation("event duration exceeds frame count".into()));
        }
        let mut out: Vec<TemporalSupport> = (0..k)
            .map(|_| {
                let dur = rng.range_inclusive(config.min_duration, config.max_duration.min(t));
                let start = rng.range_inclusive(0, t - dur);
                TemporalSupport {
                    start: start as f64,
                    end: (start + dur) as f64,
                }
            })
            .collect();
        out.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        return Ok(out);
    }
    let gaps = (k - 1) * config.min_gap;
    if k * config.min_duration + gaps > t {
        return Err(Error::Generation(format!(
            "cannot place {k} events of length >= {} with gaps >= {} in {t} frames",
            config.min_duration, config.min_gap
        )));
    }
    let available = t - gaps;
    let mut durations: Vec<usize> = (0..k)
        .map(|_| rng.range_inclusive(config.min_duration, config.max_duration))
        .collect();
    while durations.iter().sum::<usize>() > available {
        let i = (0..k).max_by_key(|&i| (durations[i], k - i)).unwrap();
        durations[i] -= 1;
    }
    // Distribute the slack over the K + 1 inter-event gaps.
    let slack = available - durations.iter().sum::<usize>();
    let mut extra = vec![0usize; k + 1];
    for _ in 0..slack {
        extra[rng.below(k + 1)] += 1;
    }
    let mut out = Vec::with_capacity(k);
    let mut cursor = extra[0];
    for i in 0..k {
        let start = cursor;
        let end = start + durations[i];
        out.push(TemporalSupport {
            start: start as f64,
            end: end as f64,
        });
        cursor = end + config.min_gap + extra[i + 1];
    }
    Ok(out)
}

/// Frame `t` is the sum of the features of events active at `t` plus
/// Gaussian noise of scale σ_n.
pub fn render_frames(events: &[Event], config: &WorldConfig, seed: u64) -> Matrix {
    let d = config.feature_width;
    let mut rng = SeededRng::with_stream(seed, FRAME_STREAM);
    let mut frames = Matrix::zeros(config.frames, d);
    for t in 0..config.frames {
        let row = frames.row_mut(t);
        for e in events.iter().filter(|e| e.support.contains_frame(t)) {
            axpy(1.0, &e.feature, row);
        }
        for x in row.iter_mut() {
            *x += config.noise * rng.normal();
        }
    }
    frames
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualMode {
    Temporal,
    FeatureSwap,
    CrossVideo,
}

impl CounterfactualMode {
    pub const ALL: [CounterfactualMode; 3] = [
        CounterfactualMode::Temporal,
        CounterfactualMode::FeatureSwap,
        CounterfactualMode::CrossVideo,
    ];
}

/// What was changed to obtain the negative, in ground-truth event ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CounterfactualEdit {
    SwapSupports { a: usize, b: usize },
    SwapFeatures { a: usize, b: usize },
    Replace { pool_index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    pub mode: CounterfactualMode,
    pub edit: CounterfactualEdit,
    pub scenario: Scenario,
}

/// Builds the negative `V⁻`. `pool` is only consulted for cross-video mode.
pub fn make_counterfactual(
    scenario: &Scenario,
    mode: CounterfactualMode,
    seed: u64,
    pool: &[Scenario],
) -> Result<Counterfactual> {
    let mut rng = SeededRng::with_stream(seed, COUNTERFACTUAL_STREAM);
    match mode {
        CounterfactualMode::Temporal | CounterfactualMode::FeatureSwap => {
            let semantic = scenario.semantic_edges();
            if semantic.is_empty() {
                return Err(Error::Counterfactual(
                    "scenario has no planted semantic edge".into(),
                ));
            }
            let candidates: Vec<Edge> = if mode == CounterfactualMode::Temporal {
                let causes: Vec<Edge> = semantic.iter().filter(|e| e.op == CAUSE).copied().collect();
                if causes.is_empty() {
                    semantic
                } else {
                    causes
                }
            } else {
                semantic
            };
            let e = candidates[rng.below(candidates.len())];
            let (a, b) = (e.source, e.target);
            let mut cf = scenario.clone();
            let edit = if mode == CounterfactualMode::Temporal {
                let sa = cf.events[a].support;
                cf.events[a].support = cf.events[b].support;
                cf.events[b].support = sa;
                CounterfactualEdit::SwapSupports { a, b }
            } else {
                cf.events.swap(a, b);
                // only the features move; labels and supports stay in place
                let (la, lb) = (cf.events[a].label, cf.events[b].label);
                let (sa, sb) = (cf.events[a].support, cf.events[b].support);
                cf.events[a].label = lb;
                cf.events[b].label = la;
                cf.events[a].support = sb;
                cf.events[b].support = sa;
                CounterfactualEdit::SwapFeatures { a, b }
            };
            Ok(Counterfactual {
                mode,
                edit,
                scenario: cf,
            })
        }
        CounterfactualMode::CrossVideo => {
            let cfg = &scenario.config;
            let truth: HashSet<Edge> = scenario.truth_chain.edges.iter().copied().collect();
            let mut best: Option<(usize, f64)> = None;
            for (i, cand) in pool.iter().enumerate() {
                if cand.seed == scenario.seed && cand.events == scenario.events {
                    continue;
                }
                let vis = label_jaccard(&scenario.events, &cand.events);
                let other: HashSet<Edge> = cand.truth_chain.edges.iter().copied().collect();
                let logic = set_jaccard(&truth, &other);
                if vis >= cfg.delta_vis
                    && logic <= cfg.delta_logic
                    && best.is_none_or(|(_, v)| vis > v)
                {
                    best = Some((i, vis));
                }
            }
            let (pool_index, _) = best.ok_or(Error::NoStructuralNegative)?;
            Ok(Counterfactual {
                mode,
                edit: CounterfactualEdit::Replace { pool_index },
                scenario: pool[pool_index].clone(),
            })
        }
    }
}

/// Multiset Jaccard over event labels (visual similarity proxy).
pub fn label_jaccard(a: &[Event], b: &[Event]) -> f64 {
    let mut counts: BTreeMap<EventLabel, (usize, usize)> = BTreeMap::new();
    for e in a {
        counts.entry(e.label).or_default().0 += 1;
    }
    for e in b {
        counts.entry(e.label).or_default().1 += 1;
    }
    let (inter, union) = counts
        .values()
        .fold((0, 0), |(i, u), &(x, y)| (i + x.min(y), u + x.max(y)));
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Set Jaccard; two empty sets are identical.
pub fn set_jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// `count` scenarios with seeds `base_seed, base_seed + 1, …`.
pub fn generate_corpus(config: &WorldConfig, base_seed: u64, count: usize) -> Result<Vec<Scenario>> {
    use rayon::prelude::*;
    config.validate()?;
    let basis = WorldBasis::new(config);
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_with_basis(config, &basis, base_seed.wrapping_add(i)))
        .collect()
}

/// One line of the scenario corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub seed: u64,
    pub config: WorldConfig,
    pub events: Vec<Event>,
    pub truth_chain: Vec<(usize, String, usize)>,
    pub density: DensityTier,
}

fn file_codebook() -> OperatorCodebook {
    let ops = OperatorCodebook::standard_operators(crate::event::NAMED_OPERATORS)
        .expect("named operators");
    let n = ops.len();
    OperatorCodebook::new(ops, Matrix::zeros(n, 1)).expect("valid codebook")
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        let cb = file_codebook();
        Self {
            seed: s.seed,
            config: s.config.clone(),
            events: s.events.clone(),
            truth_chain: s
                .truth_chain
                .edges
                .iter()
                .map(|e| (e.source, cb.name(e.op).to_string(), e.target))
                .collect(),
            density: s.density,
        }
    }
}

impl TryFrom<ScenarioRecord> for Scenario {
    type Error = Error;

    fn try_from(r: ScenarioRecord) -> Result<Self> {
        let cb = file_codebook();
        r.config.validate()?;
        let edges = r
            .truth_chain
            .into_iter()
            .map(|(a, op, b)| {
                cb.id_of(&op)
                    .map(|z| Edge::new(a, z, b))
                    .ok_or_else(|| Error::Contract(format!("unknown operator {op:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let truth_chain = ReasoningChain::new(edges);
        truth_chain.validate(r.events.len(), &cb)?;
        for e in &r.events {
            e.validate(r.config.feature_width, r.config.frames as f64)?;
        }
        Ok(Scenario {
            seed: r.seed,
            config: r.config,
            events: r.events,
            truth_chain,
            density: r.density,
        })
    }
}

pub fn write_corpus(path: &std::path::Path, scenarios: &[Scenario]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenarios {
        serde_json::to_writer(&mut out, &ScenarioRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: &std::path::Path) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Scenario::try_from(serde_json::from_str::<ScenarioRecord>(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::ENABLE;

    fn two_event_cause() -> WorldConfig {
        WorldConfig {
            events: 2,
            frames: 16,
            min_semantic_edges: 1,
            max_semantic_edges: 1,
            relations: vec!["cause".into()],
            ..WorldConfig::default()
        }
    }

    #[test]
    fn two_event_cause_truth_chain() {
        let s = generate_scenario(&two_event_cause(), 3).unwrap();
        assert_eq!(
            s.truth_chain.edges,
            vec![Edge::new(0, BEFORE, 1), Edge::new(0, CAUSE, 1)]
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_scenario(&cfg, 11).unwrap(), generate_scenario(&cfg, 11).unwrap());
        assert_ne!(generate_scenario(&cfg, 11).unwrap(), generate_scenario(&cfg, 12).unwrap());
    }

    #[test]
    fn planted_edges_respect_precedence_and_validate() {
        let cfg = WorldConfig {
            max_semantic_edges: 8,
            ..WorldConfig::default()
        };
        let cb = file_codebook();
        for seed in 0..30 {
            let s = generate_scenario(&cfg, seed).unwrap();
            s.truth_chain.validate(s.events.len(), &cb).unwrap();
            for e in s.semantic_edges() {
                assert!(s.events[e.source].support.end < s.events[e.target].support.start);
            }
        }
    }

    #[test]
    fn zero_coupling_removes_relation_signal() {
        let cfg = WorldConfig {
            coupling: 0.0,
            noise: 0.0,
            ..two_event_cause()
        };
        let s = generate_scenario(&cfg, 5).unwrap();
        let basis = WorldBasis::new(&cfg);
        for e in &s.events {
            assert_eq!(e.feature, basis.base_feature(&e.label));
        }
    }

    #[test]
    fn infeasible_placement_is_an_error() {
        let cfg = WorldConfig {
            events: 8,
            frames: 10,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_scenario(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn single_event_over_all_frames_renders_exactly() {
        let cfg = WorldConfig {
            frames: 6,
            feature_width: 3,
            noise: 0.0,
            ..WorldConfig::default()
        };
        let e = Event {
            label: [0, 0, 0].into(),
            feature: vec![1.0, -2.0, 0.5],
            support: TemporalSupport { start: 0.0, end: 6.0 },
        };
        let f = render_frames(std::slice::from_ref(&e), &cfg, 0);
        for t in 0..6 {
            assert_eq!(f.row(t), e.feature.as_slice());
        }
    }

    #[test]
    fn overlapping_events_sum() {
        let cfg = WorldConfig {
            frames: 6,
            feature_width: 2,
            noise: 0.0,
            ..WorldConfig::default()
        };
        let a = Event {
            label: [0, 0, 0].into(),
            feature: vec![1.0, 2.0],
            support: TemporalSupport { start: 0.0, end: 4.0 },
        };
        let b = Event {
            label: [0, 0, 0].into(),
            feature: vec![10.0, 20.0],
            support: TemporalSupport { start: 2.0, end: 6.0 },
        };
        let f = render_frames(&[a, b], &cfg, 0);
        assert_eq!(f.row(1), &[1.0, 2.0]);
        assert_eq!(f.row(3), &[11.0, 22.0]);
        assert_eq!(f.row(5), &[10.0, 20.0]);
    }

    #[test]
    fn empty_stream_variance_matches_noise() {
        let cfg = WorldConfig {
            frames: 10_000,
            feature_width: 1,
            noise: 0.3,
            ..WorldConfig::default()
        };
        let f = render_frames(&[], &cfg, 1);
        let n = f.data().len() as f64;
        let mean = f.data().iter().sum::<f64>() / n;
        let var = f.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / 0.09 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn temporal_counterfactual_only_touches_the_pair() {
        let s = generate_scenario(&two_event_cause(), 3).unwrap();
        let cf = make_counterfactual(&s, CounterfactualMode::Temporal, 0, &[]).unwrap();
        assert_eq!(cf.edit, CounterfactualEdit::SwapSupports { a: 0, b: 1 });
        let (a, b) = (&cf.scenario.events[0], &cf.scenario.events[1]);
        assert!(a.support.end > b.support.start);
        assert_eq!(a.feature, s.events[0].feature);
        assert_eq!(b.feature, s.events[1].feature);
        assert_eq!(a.support, s.events[1].support);
    }

    #[test]
    fn temporal_counterfactual_leaves_other_events_bit_identical() {
        let cfg = WorldConfig {
            max_semantic_edges: 4,
            ..WorldConfig::default()
        };
        let s = generate_scenario(&cfg, 9).unwrap();
        let cf = make_counterfactual(&s, CounterfactualMode::Temporal, 4, &[]).unwrap();
        let CounterfactualEdit::SwapSupports { a, b } = cf.edit else {
            panic!("wrong edit")
        };
        for (i, (x, y)) in s.events.iter().zip(&cf.scenario.events).enumerate() {
            assert_eq!(x.feature, y.feature);
            assert_eq!(x.label, y.label);
            if i != a && i != b {
                assert_eq!(x.support, y.support);
            }
        }
    }

    #[test]
    fn feature_swap_is_an_involution() {
        let cfg = WorldConfig {
            max_semantic_edges: 4,
            ..WorldConfig::default()
        };
        let s = generate_scenario(&cfg, 2).unwrap();
        let once = make_counterfactual(&s, CounterfactualMode::FeatureSwap, 8, &[]).unwrap();
        let twice =
            make_counterfactual(&once.scenario, CounterfactualMode::FeatureSwap, 8, &[]).unwrap();
        assert_eq!(twice.scenario.events, s.events);
        let CounterfactualEdit::SwapFeatures { a, b } = once.edit else {
            panic!("wrong edit")
        };
        assert_eq!(once.scenario.events[a].feature, s.events[b].feature);
        assert_eq!(once.scenario.events[a].support, s.events[a].support);
    }

    #[test]
    fn temporal_mode_needs_a_semantic_edge() {
        let mut s = generate_scenario(&two_event_cause(), 3).unwrap();
        s.truth_chain = ReasoningChain::new(vec![Edge::new(0, BEFORE, 1)]);
        assert!(make_counterfactual(&s, CounterfactualMode::Temporal, 0, &[]).is_err());
    }

    #[test]
    fn cross_video_finds_disjoint_structure() {
        let cfg = WorldConfig {
            events: 3,
            frames: 24,
            delta_vis: 0.5,
            delta_logic: 1e-9,
            ..two_event_cause()
        };
        let s = generate_scenario(&cfg, 0).unwrap();
        // identical labels, planted edge moved to a disjoint pair
        let mut pool = Vec::new();
        for edges in [
            vec![Edge::new(0, BEFORE, 1), Edge::new(0, CAUSE, 1)],
            vec![Edge::new(1, BEFORE, 2), Edge::new(1, ENABLE, 2)],
            vec![Edge::new(0, BEFORE, 2), Edge::new(0, PREVENT, 2)],
        ] {
            let mut p = s.clone();
            p.seed += 100 + pool.len() as u64;
            p.truth_chain = ReasoningChain::new(edges);
            pool.push(p);
        }
        let truth: HashSet<Edge> = s.truth_chain.edges.iter().copied().collect();
        let oracle: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let o: HashSet<Edge> = p.truth_chain.edges.iter().copied().collect();
                label_jaccard(&s.events, &p.events) >= 0.5 && set_jaccard(&truth, &o) == 0.0
            })
            .map(|(i, _)| i)
            .collect();
        let cf = make_counterfactual(&s, CounterfactualMode::CrossVideo, 0, &pool).unwrap();
        let CounterfactualEdit::Replace { pool_index } = cf.edit else {
            panic!("wrong edit")
        };
        assert!(oracle.contains(&pool_index));
        let o: HashSet<Edge> = cf.scenario.truth_chain.edges.iter().copied().collect();
        assert_eq!(set_jaccard(&truth, &o), 0.0);
    }

    #[test]
    fn cross_video_reports_exhausted_pool() {
        let s = generate_scenario(&two_event_cause(), 3).unwrap();
        let err = make_counterfactual(&s, CounterfactualMode::CrossVideo, 0, std::slice::from_ref(&s));
        assert!(matches!(err, Err(Error::NoStructuralNegative)));
    }

    #[test]
    fn corpus_file_round_trips() {
        let cfg = WorldConfig::default();
        let corpus = generate_corpus(&cfg, 0, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().contains("\"truth_chain\":[["));
    }
}
