//! Proposal-then-classify grounding: change-point segmentation of the
//! frame stream, mean pooling per segment, nearest-prototype labels.

use serde::{Deserialize, Serialize};

use crate::event::{Event, EventLabel, TemporalSupport};
use crate::numeric::{axpy, cosine, norm, Matrix};
use crate::world::Scenario;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    /// Frame indices where a new segment starts (excluding 0).
    pub boundaries: Vec<usize>,
    /// Half-open `(start, end)` frame ranges partitioning `[0, T)`.
    pub segments: Vec<(usize, usize)>,
}

/// L2 change-point segmentation. A boundary goes before frame `t + 1`
/// whenever `‖S_{t+1} − S_t‖ > threshold`; segments shorter than `min_len`
/// are merged into their successor (the last one into its predecessor).
pub fn segment_stream(frames: &Matrix, threshold: f64, min_len: usize) -> Segmentation {
    let t_len = frames.rows();
    let min_len = min_len.max(1);
    if t_len < 2 * min_len {
        return Segmentation {
            boundaries: Vec::new(),
            segments: vec![(0, t_len)],
        };
    }
    let mut cuts = vec![0];
    for t in 0..t_len - 1 {
        let diff: f64 = frames
            .row(t + 1)
            .iter()
            .zip(frames.row(t))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if diff > threshold {
            cuts.push(t + 1);
        }
    }
    cuts.push(t_len);

    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for &end in &cuts[1..] {
        if end - start >= min_len {
            segments.push((start, end));
            start = end;
        }
    }
    if start < t_len {
        match segments.last_mut() {
            Some(last) => last.1 = t_len,
            None => segments.push((0, t_len)),
        }
    }
    Segmentation {
        boundaries: segments.iter().skip(1).map(|s| s.0).collect(),
        segments,
    }
}

/// Per-label mean features, one bank per label component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub premise: Vec<(u16, Vec<f64>)>,
    pub action: Vec<(u16, Vec<f64>)>,
    pub object: Vec<(u16, Vec<f64>)>,
}

impl Prototypes {
    /// Estimates prototypes from pooled frames over the ground-truth supports
    /// of a labeled calibration split. Only labels actually observed get a
    /// prototype; banks are sorted by label index.
    pub fn estimate(calibration: &[Scenario]) -> Self {
        use std::collections::BTreeMap;
        type Bank = BTreeMap<u16, (Vec<f64>, usize)>;
        let mut banks: [Bank; 3] = Default::default();
        for s in calibration {
            let frames = s.frames();
            for e in &s.events {
                let start = e.support.start.max(0.0) as usize;
                let end = (e.support.end as usize).min(frames.rows());
                if end <= start {
                    continue;
                }
                let pooled = mean_rows(&frames, start, end);
                for (bank, key) in banks
                    .iter_mut()
                    .zip([e.label.premise, e.label.action, e.label.object])
                {
                    let entry = bank
                        .entry(key)
                        .or_insert_with(|| (vec![0.0; pooled.len()], 0));
                    axpy(1.0, &pooled, &mut entry.0);
                    entry.1 += 1;
                }
            }
        }
        let finish = |bank: Bank| -> Vec<(u16, Vec<f64>)> {
            bank.into_iter()
                .map(|(k, (sum, n))| (k, sum.into_iter().map(|x| x / n as f64).collect()))
                .collect()
        };
        let [p, a, o] = banks;
        Self {
            premise: finish(p),
            action: finish(a),
            object: finish(o),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.premise.is_empty() || self.action.is_empty() || self.object.is_empty()
    }
}

/// Best label in one bank; ties go to the lower label index.
fn nearest(bank: &[(u16, Vec<f64>)], v: &[f64], comparisons: &mut usize) -> (u16, f64) {
    let mut best = (bank[0].0, f64::NEG_INFINITY);
    for (label, proto) in bank {
        *comparisons += 1;
        let c = cosine(v, proto).unwrap_or(0.0);
        if c > best.1 || (c == best.1 && *label < best.0) {
            best = (*label, c);
        }
    }
    best
}

fn mean_rows(frames: &Matrix, start: usize, end: usize) -> Vec<f64> {
    let mut acc = vec![0.0; frames.cols()];
    for t in start..end {
        axpy(1.0, frames.row(t), &mut acc);
    }
    let n = (end - start) as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct Eventified {
    pub events: Vec<Event>,
    /// Prototype comparisons spent on classification.
    pub comparisons: usize,
    /// Segments dropped as background.
    pub background: usize,
}

/// One event per non-background segment, sorted by start frame. Segments
/// whose pooled feature norm is at most `background_norm` are treated as
/// background and produce no event.
pub fn eventify(
    frames: &Matrix,
    segmentation: &Segmentation,
    prototypes: &Prototypes,
    background_norm: f64,
) -> Eventified {
    assert!(!prototypes.is_empty(), "eventify needs non-empty prototype banks");
    let mut comparisons = 0;
    let mut background = 0;
    let mut events = Vec::new();
    for &(start, end) in &segmentation.segments {
        let v = mean_rows(frames, start, end);
        if norm(&v) <= background_norm {
            background += 1;
            continue;
        }
        let (p, _) = nearest(&prototypes.premise, &v, &mut comparisons);
        let (a, _) = nearest(&prototypes.action, &v, &mut comparisons);
        let (o, _) = nearest(&prototypes.object, &v, &mut comparisons);
        events.push(Event {
            label: EventLabel {
                premise: p,
                action: a,
                object: o,
            },
            feature: v,
            support: TemporalSupport {
                start: start as f64,
                end: end as f64,
            },
        });
    }
    Eventified {
        events,
        comparisons,
        background,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventifierConfig {
    /// Change-point threshold; `None` means `3 σ_n √d + floor`.
    pub threshold: Option<f64>,
    pub floor: f64,
    pub min_len: usize,
}

impl Default for EventifierConfig {
    fn default() -> Self {
        Self {
            threshold: None,
            floor: 0.1,
            min_len: 2,
        }
    }
}

impl EventifierConfig {
    pub fn resolved_threshold(&self, noise: f64, width: usize) -> f64 {
        self.threshold
            .unwrap_or(3.0 * noise * (width as f64).sqrt() + self.floor)
    }
}

/// Detected events plus their ground-truth correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct Grounding {
    pub events: Vec<Event>,
    /// `alignment[i]` = truth event with the largest overlap with detected event `i`.
    pub alignment: Vec<Option<usize>>,
    pub comparisons: usize,
}

impl Grounding {
    /// Detected index aligned with truth event `truth`, if any (first match).
    pub fn detected_for(&self, truth: usize) -> Option<usize> {
        self.alignment.iter().position(|a| *a == Some(truth))
    }
}

pub fn ground_scenario(
    scenario: &Scenario,
    frames: &Matrix,
    prototypes: &Prototypes,
    config: &EventifierConfig,
) -> Grounding {
    let threshold = config.resolved_threshold(scenario.config.noise, scenario.config.feature_width);
    let seg = segment_stream(frames, threshold, config.min_len);
    let out = eventify(frames, &seg, prototypes, threshold);
    let alignment = align_to_truth(&out.events, &scenario.events);
    Grounding {
        events: out.events,
        alignment,
        comparisons: out.comparisons,
    }
}

/// Maximum-overlap matching of detected events onto truth events.
pub fn align_to_truth(detected: &[Event], truth: &[Event]) -> Vec<Option<usize>> {
    detected
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truth.iter().enumerate() {
                let ov = d.support.overlap(&t.support);
                if ov > 0.0 && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((j, ov));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_corpus, generate_scenario, WorldConfig};

    #[test]
    fn constant_stream_is_one_segment() {
        let f = Matrix::from_fn(10, 3, |_, c| c as f64);
        let s = segment_stream(&f, 0.5, 2);
        assert_eq!(s.segments, vec![(0, 10)]);
        assert!(s.boundaries.is_empty());
    }

    #[test]
    fn single_jump_splits_in_two() {
        let f = Matrix::from_fn(12, 2, |t, _| if t < 5 { 0.0 } else { 10.0 });
        let s = segment_stream(&f, 1.0, 2);
        assert_eq!(s.segments, vec![(0, 5), (5, 12)]);
        assert_eq!(s.boundaries, vec![5]);
    }

    #[test]
    fn short_segments_merge_forward() {
        // spike of length 1 at t = 4
        let f = Matrix::from_fn(10, 1, |t, _| if t == 4 { 5.0 } else { 0.0 });
        let s = segment_stream(&f, 1.0, 2);
        assert!(s.segments.iter().all(|(a, b)| b - a >= 2), "{s:?}");
        assert_eq!(s.segments.first().unwrap().0, 0);
        assert_eq!(s.segments.last().unwrap().1, 10);
    }

    fn noiseless(events: usize, frames: usize) -> WorldConfig {
        WorldConfig {
            events,
            frames,
            noise: 0.0,
            coupling: 0.0,
            min_semantic_edges: 1,
            max_semantic_edges: 1,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn noiseless_segments_pool_to_event_features() {
        let cfg = noiseless(3, 30);
        let s = generate_scenario(&cfg, 4).unwrap();
        let frames = s.frames();
        let seg = segment_stream(&frames, 0.1, 2);
        assert!(seg.segments.len() >= 3);
        for e in &s.events {
            let (a, b) = (e.support.start as usize, e.support.end as usize);
            assert!(seg.segments.contains(&(a, b)), "missing {a}..{b} in {seg:?}");
            let pooled = mean_rows(&frames, a, b);
            for (x, y) in pooled.iter().zip(&e.feature) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_prototype_gets_its_label() {
        let protos = Prototypes {
            premise: vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])],
            action: vec![(0, vec![1.0, 0.0])],
            object: vec![(2, vec![0.0, 1.0]), (5, vec![1.0, 0.0])],
        };
        let mut n = 0;
        assert_eq!(nearest(&protos.premise, &[0.0, 3.0], &mut n), (1, 1.0));
        // equidistant: lower label index wins
        assert_eq!(nearest(&protos.premise, &[1.0, 1.0], &mut n).0, 0);
        assert_eq!(nearest(&protos.object, &[1.0, 1.0], &mut n).0, 2);
        assert_eq!(n, 6);
    }

    #[test]
    fn noiseless_grounding_recovers_truth() {
        let cfg = noiseless(4, 40);
        let calibration = generate_corpus(&cfg, 1000, 40).unwrap();
        let protos = Prototypes::estimate(&calibration);
        let ecfg = EventifierConfig::default();
        let mut correct = 0;
        let mut total = 0;
        let mut support_err = 0.0;
        for s in generate_corpus(&cfg, 0, 20).unwrap() {
            let g = ground_scenario(&s, &s.frames(), &protos, &ecfg);
            assert_eq!(g.events.len(), s.events.len());
            assert!(g.events.windows(2).all(|w| w[0].support.start <= w[1].support.start));
            for (d, t) in g.events.iter().zip(&s.events) {
                total += 1;
                correct += usize::from(d.label == t.label);
                support_err += (d.support.start - t.support.start).abs()
                    + (d.support.end - t.support.end).abs();
                d.validate(cfg.feature_width, cfg.frames as f64).unwrap();
            }
            // classification cost is linear in the number of events
            let bank = protos.premise.len() + protos.action.len() + protos.object.len();
            assert_eq!(g.comparisons, g.events.len() * bank);
        }
        assert_eq!(correct, total);
        assert!(support_err / total as f64 <= 2.0);
    }

    #[test]
    fn alignment_uses_maximum_overlap() {
        let ev = |s: f64, e: f64| Event {
            label: [0, 0, 0].into(),
            feature: vec![0.0],
            support: TemporalSupport { start: s, end: e },
        };
        let truth = vec![ev(0.0, 4.0), ev(5.0, 9.0)];
        let det = vec![ev(0.0, 5.0), ev(4.0, 10.0), ev(10.0, 12.0)];
        assert_eq!(align_to_truth(&det, &truth), vec![Some(0), Some(1), None]);
    }
}
