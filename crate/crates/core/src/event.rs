//! Symbolic data model: grounded events, the operator codebook and
//! reasoning chains over event indices.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{join, Matrix, Parameters, SeededRng};

/// `⟨premise, action, object⟩`, each an index into its own vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u16; 3]", into = "[u16; 3]")]
pub struct EventLabel {
    pub premise: u16,
    pub action: u16,
    pub object: u16,
}

impl From<[u16; 3]> for EventLabel {
    fn from(v: [u16; 3]) -> Self {
        Self {
            premise: v[0],
            action: v[1],
            object: v[2],
        }
    }
}

impl From<EventLabel> for [u16; 3] {
    fn from(l: EventLabel) -> Self {
        [l.premise, l.action, l.object]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub premises: u16,
    pub actions: u16,
    pub objects: u16,
}

impl Vocabulary {
    pub fn contains(&self, l: &EventLabel) -> bool {
        l.premise < self.premises && l.action < self.actions && l.object < self.objects
    }
}

/// `[start, end)` in frame units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct TemporalSupport {
    pub start: f64,
    pub end: f64,
}

impl From<[f64; 2]> for TemporalSupport {
    fn from(v: [f64; 2]) -> Self {
        Self {
            start: v[0],
            end: v[1],
        }
    }
}

impl From<TemporalSupport> for [f64; 2] {
    fn from(s: TemporalSupport) -> Self {
        [s.start, s.end]
    }
}

impl TemporalSupport {
    pub fn new(start: f64, end: f64, horizon: f64) -> Result<Self> {
        let s = Self { start, end };
        s.validate(horizon)?;
        Ok(s)
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) {
            return Err(Error::NonFinite("temporal support".into()));
        }
        if self.start > self.end || self.start < 0.0 || self.end > horizon {
            return Err(Error::Contract(format!(
                "support [{}, {}) outside [0, {horizon}] or reversed",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn contains_frame(&self, t: usize) -> bool {
        let t = t as f64;
        self.start <= t && t < self.end
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Length of the intersection with `other`.
    pub fn overlap(&self, other: &TemporalSupport) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

/// Grounded event: symbolic label, pooled feature and temporal support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub label: EventLabel,
    pub feature: Vec<f64>,
    pub support: TemporalSupport,
}

impl Event {
    pub fn validate(&self, width: usize, horizon: f64) -> Result<()> {
        crate::error::check_len("event feature", width, self.feature.len())?;
        if !crate::numeric::all_finite(&self.feature) {
            return Err(Error::NonFinite("event feature".into()));
        }
        self.support.validate(horizon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalRule {
    Before,
    After,
    Meets,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    /// Scored by a fixed timestamp rule.
    Temporal(TemporalRule),
    /// Scored by the learned head.
    Semantic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operator {
    pub name: String,
    pub kind: OperatorKind,
}

pub type OpId = usize;

/// Operator ids in the standard codebook layout.
pub const BEFORE: OpId = 0;
pub const AFTER: OpId = 1;
pub const MEETS: OpId = 2;
pub const CAUSE: OpId = 3;
pub const ENABLE: OpId = 4;
pub const PREVENT: OpId = 5;
/// Operators with a fixed meaning; everything past this index is padding.
pub const NAMED_OPERATORS: usize = 6;
/// Semantic relations planted by the world generator.
pub const PLANTED_SEMANTIC: [OpId; 3] = [CAUSE, ENABLE, PREVENT];

/// Temporal and semantic operators plus one learnable embedding row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorCodebook {
    operators: Vec<Operator>,
    pub embeddings: Matrix,
}

impl OperatorCodebook {
    pub fn new(operators: Vec<Operator>, embeddings: Matrix) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::Config("codebook must contain at least one operator".into()));
        }
        crate::error::check_len("codebook embeddings", operators.len(), embeddings.rows())?;
        let mut names = HashSet::new();
        for op in &operators {
            if !names.insert(op.name.as_str()) {
                return Err(Error::Config(format!("duplicate operator name {:?}", op.name)));
            }
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFinite("codebook embeddings".into()));
        }
        Ok(Self {
            operators,
            embeddings,
        })
    }

    /// The six named operators followed by inert semantic padding up to `size`.
    pub fn standard_operators(size: usize) -> Result<Vec<Operator>> {
        if size < NAMED_OPERATORS {
            return Err(Error::Config(format!(
                "codebook size {size} is smaller than the {NAMED_OPERATORS} named operators"
            )));
        }
        let t = |name: &str, r| Operator {
            name: name.into(),
            kind: OperatorKind::Temporal(r),
        };
        let s = |name: String| Operator {
            name,
            kind: OperatorKind::Semantic,
        };
        let mut ops = vec![
            t("before", TemporalRule::Before),
            t("after", TemporalRule::After),
            t("meets", TemporalRule::Meets),
            s("cause".into()),
            s("enable".into()),
            s("prevent".into()),
        ];
        ops.extend((NAMED_OPERATORS..size).map(|i| s(format!("pad{}", i - NAMED_OPERATORS))));
        Ok(ops)
    }

    /// Standard layout with Gaussian embeddings of standard deviation `scale`.
    pub fn standard(size: usize, width: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        let ops = Self::standard_operators(size)?;
        let emb = Matrix::from_fn(size, width, |_, _| scale * rng.normal());
        Self::new(ops, emb)
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    pub fn operator(&self, id: OpId) -> &Operator {
        &self.operators[id]
    }

    pub fn kind(&self, id: OpId) -> OperatorKind {
        self.operators[id].kind
    }

    pub fn is_temporal(&self, id: OpId) -> bool {
        matches!(self.operators[id].kind, OperatorKind::Temporal(_))
    }

    pub fn name(&self, id: OpId) -> &str {
        &self.operators[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<OpId> {
        self.operators.iter().position(|o| o.name == name)
    }

    pub fn embedding(&self, id: OpId) -> &[f64] {
        self.embeddings.row(id)
    }

    pub fn temporal_ids(&self) -> Vec<OpId> {
        (0..self.len()).filter(|&i| self.is_temporal(i)).collect()
    }

    pub fn semantic_ids(&self) -> Vec<OpId> {
        (0..self.len()).filter(|&i| !self.is_temporal(i)).collect()
    }
}

impl Parameters for OperatorCodebook {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "embeddings"), &self.embeddings.shape(), self.embeddings.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "embeddings"), self.embeddings.data_mut());
    }
}

/// One logical transition `source --op--> target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub op: OpId,
    pub target: usize,
}

impl Edge {
    pub fn new(source: usize, op: OpId, target: usize) -> Self {
        Self { source, op, target }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    SelfLoop { position: usize },
    EventOutOfRange { position: usize, index: usize, events: usize },
    UnknownOperator { position: usize, op: OpId, operators: usize },
    Duplicate { position: usize, first: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop { position } => write!(f, "edge {position}: self-loop"),
            Violation::EventOutOfRange {
                position,
                index,
                events,
            } => write!(f, "edge {position}: event {index} out of range for {events} events"),
            Violation::UnknownOperator {
                position,
                op,
                operators,
            } => write!(f, "edge {position}: operator {op} out of range for {operators} operators"),
            Violation::Duplicate { position, first } => {
                write!(f, "edge {position}: duplicate of edge {first}")
            }
        }
    }
}

impl ReasoningChain {
    pub fn new(edges: Vec<Edge>) -> Self {
        Self { edges }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, e: &Edge) -> bool {
        self.edges.contains(e)
    }

    /// Every violated invariant, in edge order. Empty means valid.
    pub fn violations(&self, events: usize, operators: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen: Vec<Edge> = Vec::with_capacity(self.edges.len());
        for (position, e) in self.edges.iter().enumerate() {
            for index in [e.source, e.target] {
                if index >= events {
                    out.push(Violation::EventOutOfRange {
                        position,
                        index,
                        events,
                    });
                }
            }
            if e.op >= operators {
                out.push(Violation::UnknownOperator {
                    position,
                    op: e.op,
                    operators,
                });
            }
            if e.source == e.target {
                out.push(Violation::SelfLoop { position });
            }
            if let Some(first) = seen.iter().position(|s| s == e) {
                out.push(Violation::Duplicate { position, first });
            }
            seen.push(*e);
        }
        out
    }

    pub fn validate(&self, events: usize, codebook: &OperatorCodebook) -> Result<()> {
        let v = self.violations(events, codebook.len());
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidChain(v))
        }
    }

    /// Sorted by `(source, target, op)` with duplicates removed.
    pub fn canonicalize(&self) -> ReasoningChain {
        let mut edges = self.edges.clone();
        edges.sort_by_key(|e| (e.source, e.target, e.op));
        edges.dedup();
        ReasoningChain { edges }
    }

    /// One edge per line: `a --op--> b`.
    pub fn to_text(&self, codebook: &OperatorCodebook) -> String {
        self.edges
            .iter()
            .map(|e| format!("{} --{}--> {}\n", e.source, codebook.name(e.op), e.target))
            .collect()
    }

    pub fn parse_text(text: &str, codebook: &OperatorCodebook) -> Result<Self> {
        let mut edges = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let bad = || Error::Contract(format!("malformed chain line {line:?}"));
            let (a, rest) = line.split_once(" --").ok_or_else(bad)?;
            let (op, b) = rest.split_once("--> ").ok_or_else(bad)?;
            let op = codebook
                .id_of(op)
                .ok_or_else(|| Error::Contract(format!("unknown operator {op:?}")))?;
            edges.push(Edge::new(
                a.parse().map_err(|_| bad())?,
                op,
                b.parse().map_err(|_| bad())?,
            ));
        }
        Ok(Self { edges })
    }

    /// `[[a, "op", b], ...]`.
    pub fn to_json(&self, codebook: &OperatorCodebook) -> serde_json::Value {
        serde_json::Value::Array(
            self.edges
                .iter()
                .map(|e| serde_json::json!([e.source, codebook.name(e.op), e.target]))
                .collect(),
        )
    }

    pub fn from_json(value: &serde_json::Value, codebook: &OperatorCodebook) -> Result<Self> {
        let triples: Vec<(usize, String, usize)> = serde_json::from_value(value.clone())?;
        let edges = triples
            .into_iter()
            .map(|(a, op, b)| {
                codebook
                    .id_of(&op)
                    .map(|z| Edge::new(a, z, b))
                    .ok_or_else(|| Error::Contract(format!("unknown operator {op:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { edges })
    }
}
