//! Auxiliary objective: predictive utility, logic loss, counterfactual
//! margin and sparsity.
//!
//! `L_aux = λ_pred·L_pred + λ_logic·L_logic + λ_CF·L_CF + λ_spar·L_spar`.
//! Gradients of the three differentiable terms are routed to the verifier
//! head, the operator embeddings and the predictor. `L_spar` only shapes the
//! policy reward.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::event::{Event, OperatorCodebook, ReasoningChain};
use crate::numeric::{dot, join, norm, Activation, Matrix, Mlp, MlpCache, Parameters, SeededRng};
use crate::verifier::{logic_loss_backward_into, score_chain, Verifier, VerifierGrads};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// `α·|C|`
    #[default]
    Count,
    /// `α·Σ_t p_cont(t)` over visited decision states, an unbiased estimate
    /// of `α·E|C|` with a pathwise gradient into the stop head.
    ExpectedLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub lambda_pred: f64,
    pub lambda_logic: f64,
    pub lambda_cf: f64,
    pub lambda_spar: f64,
    pub alpha: f64,
    pub margin: f64,
    pub sparsity: SparsityMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_pred: 1.0,
            lambda_logic: 1.0,
            lambda_cf: 1.0,
            lambda_spar: 1.0,
            alpha: 0.1,
            margin: 0.5,
            sparsity: SparsityMode::Count,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_pred, self.lambda_logic, self.lambda_cf, self.lambda_spar, self.alpha];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("objective weights and alpha must be finite and >= 0".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub prefix: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { hidden: 32, prefix: 32 }
    }
}

/// Chain-prefix encoder plus next-state head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    /// `[v_a ⊕ e_z ⊕ v_b]` mean → prefix code
    pub prefix: Mlp,
    /// Code used when no edge has elapsed.
    pub null: Vec<f64>,
    /// `[prefix ⊕ S_t]` → `Ŝ_{t+1}`
    pub head: Mlp,
}

impl Predictor {
    pub fn zeros(config: PredictorConfig, feature_width: usize, embedding_width: usize) -> Self {
        let d = feature_width;
        Self {
            prefix: Mlp::zeros(2 * d + embedding_width, config.hidden, config.prefix, Activation::Tanh),
            null: vec![0.0; config.prefix],
            head: Mlp::zeros(config.prefix + d, config.hidden, d, Activation::Tanh),
        }
    }

    pub fn random(
        config: PredictorConfig,
        feature_width: usize,
        embedding_width: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let d = feature_width;
        let prefix = Mlp::random(2 * d + embedding_width, config.hidden, config.prefix, Activation::Tanh, 1.0, rng);
        let null = (0..config.prefix).map(|_| 0.1 * rng.normal()).collect();
        let head = Mlp::random(config.prefix + d, config.hidden, d, Activation::Tanh, 1.0, rng);
        Self { prefix, null, head }
    }

    pub fn feature_width(&self) -> usize {
        self.head.output_width()
    }
}

impl Parameters for Predictor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.prefix.visit(&join(prefix, "prefix"), f);
        f(&join(prefix, "null"), &[self.null.len()], &self.null);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.prefix.visit_mut(&join(prefix, "prefix"), f);
        f(&join(prefix, "null"), &mut self.null);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Gradients for the directly trained parameter group θ.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaGrads {
    pub head: Mlp,
    pub embeddings: Matrix,
    pub predictor: Predictor,
}

impl ThetaGrads {
    pub fn zeros(verifier: &Verifier, codebook: &OperatorCodebook, predictor: &Predictor) -> Self {
        Self {
            head: verifier.head.zeros_like(),
            embeddings: Matrix::zeros(codebook.len(), codebook.width()),
            predictor: predictor.zeros_like(),
        }
    }

    pub fn absorb(&mut self, v: &VerifierGrads) {
        self.head.add_scaled(&v.head, 1.0);
        for (a, b) in self.embeddings.data_mut().iter_mut().zip(v.embeddings.data()) {
            *a += b;
        }
    }
}

/// Same tensor names as the owners: `verifier.head.*`, `codebook.embeddings`,
/// `predictor.*`.
impl Parameters for ThetaGrads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.head.visit(&join(&join(prefix, "verifier"), "head"), f);
        f(&join(&join(prefix, "codebook"), "embeddings"), &self.embeddings.shape(), self.embeddings.data());
        self.predictor.visit(&join(prefix, "predictor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.head.visit_mut(&join(&join(prefix, "verifier"), "head"), f);
        f(&join(&join(prefix, "codebook"), "embeddings"), self.embeddings.data_mut());
        self.predictor.visit_mut(&join(prefix, "predictor"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredReport {
    pub loss: f64,
    /// Frames whose cosine was undefined (zero norm) and counted as 0.
    pub zero_norm: usize,
}

#[derive(Clone, Debug)]
struct PrefixGroup {
    edges: Vec<usize>,
    input: Vec<f64>,
    cache: Option<MlpCache>,
}

#[derive(Clone, Debug)]
pub struct PredCache {
    chain: ReasoningChain,
    groups: Vec<PrefixGroup>,
    /// Group index per predicted frame; `None` means the null code.
    frame_group: Vec<Option<usize>>,
    heads: Vec<MlpCache>,
    outputs: Vec<Vec<f64>>,
    defined: Vec<bool>,
}

fn edge_encoding(events: &[Event], codebook: &OperatorCodebook, e: &crate::event::Edge) -> Vec<f64> {
    let mut x = events[e.source].feature.clone();
    x.extend_from_slice(codebook.embedding(e.op));
    x.extend_from_slice(&events[e.target].feature);
    x
}

/// `L_pred = mean_t (1 − cos(Ŝ_{t+1}, S_{t+1}))`. The prefix at frame `t`
/// holds the edges whose events have both ended by frame `t`
/// (`τ^e ≤ t + 1`, supports being half-open).
pub fn pred_loss(
    chain: &ReasoningChain,
    events: &[Event],
    frames: &Matrix,
    predictor: &Predictor,
    codebook: &OperatorCodebook,
) -> Result<(PredReport, PredCache)> {
    let t_len = frames.rows();
    if t_len < 2 {
        return Err(Error::Contract(format!("pred_loss needs T >= 2, got {t_len}")));
    }
    let d = predictor.feature_width();
    check_len("pred_loss frame width", d, frames.cols())?;
    check_len(
        "pred_loss prefix input",
        predictor.prefix.input_width(),
        2 * d + codebook.width(),
    )?;
    if let Some(e) = chain
        .edges
        .iter()
        .find(|e| e.source >= events.len() || e.target >= events.len() || e.op >= codebook.len())
    {
        return Err(Error::Contract(format!("edge {e:?} out of range")));
    }
    let mut ready: Vec<(f64, usize)> = chain
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| (events[e.source].support.end.max(events[e.target].support.end), i))
        .collect();
    ready.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let encodings: Vec<Vec<f64>> = chain
        .edges
        .iter()
        .map(|e| edge_encoding(events, codebook, e))
        .collect();

    let mut groups: Vec<PrefixGroup> = Vec::new();
    let mut codes: Vec<Vec<f64>> = Vec::new();
    let mut frame_group = Vec::with_capacity(t_len - 1);
    let mut next = 0;
    let mut members: Vec<usize> = Vec::new();
    for t in 0..t_len - 1 {
        let before = members.len();
        while next < ready.len() && ready[next].0 <= (t + 1) as f64 {
            members.push(ready[next].1);
            next += 1;
        }
        if members.len() != before {
            let mut input = vec![0.0; encodings.first().map_or(0, Vec::len)];
            for &i in &members {
                for (x, y) in input.iter_mut().zip(&encodings[i]) {
                    *x += y / members.len() as f64;
                }
            }
            let (code, cache) = predictor.prefix.forward(&input)?;
            groups.push(PrefixGroup {
                edges: members.clone(),
                input,
                cache: Some(cache),
            });
            codes.push(code);
        }
        frame_group.push(groups.len().checked_sub(1));
    }

    let mut heads = Vec::with_capacity(t_len - 1);
    let mut outputs = Vec::with_capacity(t_len - 1);
    let mut defined = Vec::with_capacity(t_len - 1);
    let mut total = 0.0;
    let mut zero_norm = 0;
    for t in 0..t_len - 1 {
        let code = match frame_group[t] {
            Some(g) => &codes[g],
            None => &predictor.null,
        };
        let mut x = code.clone();
        x.extend_from_slice(frames.row(t));
        let (y, cache) = predictor.head.forward(&x)?;
        let target = frames.row(t + 1);
        let (ny, nt) = (norm(&y), norm(target));
        let cos = if ny > 0.0 && nt > 0.0 {
            defined.push(true);
            dot(&y, target) / (ny * nt)
        } else {
            zero_norm += 1;
            defined.push(false);
            0.0
        };
        total += 1.0 - cos;
        heads.push(cache);
        outputs.push(y);
    }
    Ok((
        PredReport {
            loss: total / (t_len - 1) as f64,
            zero_norm,
        },
        PredCache {
            chain: chain.clone(),
            groups,
            frame_group,
            heads,
            outputs,
            defined,
        },
    ))
}

/// Accumulates `scale · ∇L_pred` into the predictor and embedding buffers.
#[allow(clippy::too_many_arguments)]
pub fn pred_loss_backward_into(
    chain: &ReasoningChain,
    events: &[Event],
    frames: &Matrix,
    predictor: &Predictor,
    codebook: &OperatorCodebook,
    cache: &PredCache,
    scale: f64,
    grads: &mut ThetaGrads,
) -> Result<()> {
    if cache.chain != *chain || cache.heads.len() + 1 != frames.rows() {
        return Err(Error::StaleCache("prediction cache does not match the chain or frames"));
    }
    let n = (frames.rows() - 1) as f64;
    let pw = predictor.null.len();
    let d = predictor.feature_width();
    let mut group_up = vec![vec![0.0; pw]; cache.groups.len()];
    for t in 0..cache.heads.len() {
        if !cache.defined[t] {
            continue;
        }
        let y = &cache.outputs[t];
        let target = frames.row(t + 1);
        let (ny, nt) = (norm(y), norm(target));
        let cos = dot(y, target) / (ny * nt);
        let up: Vec<f64> = y
            .iter()
            .zip(target)
            .map(|(yi, ti)| -scale / n * (ti / (ny * nt) - cos * yi / (ny * ny)))
            .collect();
        let dx = predictor.head.backward_into(&cache.heads[t], &up, &mut grads.predictor.head)?;
        match cache.frame_group[t] {
            Some(g) => {
                for (a, b) in group_up[g].iter_mut().zip(&dx[..pw]) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in grads.predictor.null.iter_mut().zip(&dx[..pw]) {
                    *a += b;
                }
            }
        }
    }
    for (group, up) in cache.groups.iter().zip(&group_up) {
        let mc = group.cache.as_ref().expect("prefix groups always hold a cache");
        debug_assert_eq!(mc.input(), group.input.as_slice());
        let dx = predictor.prefix.backward_into(mc, up, &mut grads.predictor.prefix)?;
        let w = 1.0 / group.edges.len() as f64;
        for &i in &group.edges {
            let e = &chain.edges[i];
            for (a, b) in grads.embeddings.row_mut(e.op).iter_mut().zip(&dx[d..d + codebook.width()]) {
                *a += w * b;
            }
        }
    }
    let _ = events;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfReport {
    pub loss: f64,
    pub logic_real: f64,
    pub logic_negative: f64,
    /// Hinge is open (`m + L(V) − L(V⁻) > 0`).
    pub active: bool,
}

/// `max(0, m + L_logic(C; V) − L_logic(C; V⁻))`.
pub fn cf_loss(
    chain: &ReasoningChain,
    real: &[Event],
    negative: &[Event],
    verifier: &Verifier,
    codebook: &OperatorCodebook,
    margin: f64,
) -> Result<CfReport> {
    if real.len() != negative.len() {
        return Err(Error::EventCount {
            expected: real.len(),
            got: negative.len(),
        });
    }
    let lr = score_chain(chain, real, verifier, codebook)?.0.loss;
    let ln = score_chain(chain, negative, verifier, codebook)?.0.loss;
    Ok(cf_from_logic(lr, ln, margin))
}

pub fn cf_from_logic(logic_real: f64, logic_negative: f64, margin: f64) -> CfReport {
    // Difference first, so equal losses give exactly `m`.
    let h = margin + (logic_real - logic_negative);
    CfReport {
        loss: h.max(0.0),
        logic_real,
        logic_negative,
        active: h > 0.0,
    }
}

pub fn spar_loss(length: f64, alpha: f64) -> f64 {
    alpha * length
}

/// Inputs of one auxiliary-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AuxInputs<'a> {
    pub chain: &'a ReasoningChain,
    pub events: &'a [Event],
    pub frames: &'a Matrix,
    /// Counterfactual events; `None` drops the CF term (reported as 0).
    pub negative: Option<&'a [Event]>,
    /// `|C|`, or the expected-length estimate under
    /// [`SparsityMode::ExpectedLength`].
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxLossReport {
    pub pred: f64,
    pub logic: f64,
    pub cf: f64,
    pub spar: f64,
    pub total: f64,
    pub belief: f64,
    pub cf_active: bool,
    pub cf_available: bool,
    pub zero_norm: usize,
    pub grads: Option<ThetaGrads>,
}

pub fn aux_loss(
    inputs: AuxInputs,
    verifier: &Verifier,
    codebook: &OperatorCodebook,
    predictor: &Predictor,
    config: &ObjectiveConfig,
    with_grads: bool,
) -> Result<AuxLossReport> {
    let AuxInputs {
        chain,
        events,
        frames,
        negative,
        length,
    } = inputs;
    let (score, vcache) = score_chain(chain, events, verifier, codebook)?;
    let (pred, pcache) = pred_loss(chain, events, frames, predictor, codebook)?;
    let (cf, neg) = match negative {
        Some(neg_events) => {
            if neg_events.len() != events.len() {
                return Err(Error::EventCount {
                    expected: events.len(),
                    got: neg_events.len(),
                });
            }
            let (ns, nc) = score_chain(chain, neg_events, verifier, codebook)?;
            let cf = cf_from_logic(score.loss, ns.loss, config.margin);
            (Some(cf), Some((neg_events, ns, nc)))
        }
        None => (None, None),
    };
    let spar = spar_loss(length, config.alpha);
    let cf_value = cf.map_or(0.0, |c| c.loss);
    let total = config.lambda_pred * pred.loss
        + config.lambda_logic * score.loss
        + config.lambda_cf * cf_value
        + config.lambda_spar * spar;

    let grads = if with_grads {
        let mut g = ThetaGrads::zeros(verifier, codebook, predictor);
        if config.lambda_pred != 0.0 {
            pred_loss_backward_into(chain, events, frames, predictor, codebook, &pcache, config.lambda_pred, &mut g)?;
        }
        let cf_open = config.lambda_cf != 0.0 && cf.is_some_and(|c| c.active);
        let real_scale = config.lambda_logic + if cf_open { config.lambda_cf } else { 0.0 };
        let mut vg = VerifierGrads::zeros(verifier, codebook, events);
        if real_scale != 0.0 {
            logic_loss_backward_into(chain, events, verifier, codebook, &score, &vcache, real_scale, &mut vg)?;
        }
        if cf_open {
            let (neg_events, ns, nc) = neg.as_ref().expect("cf present implies negative");
            let mut ng = VerifierGrads::zeros(verifier, codebook, neg_events);
            logic_loss_backward_into(chain, neg_events, verifier, codebook, ns, nc, -config.lambda_cf, &mut ng)?;
            g.absorb(&ng);
        }
        g.absorb(&vg);
        Some(g)
    } else {
        None
    };
    Ok(AuxLossReport {
        pred: pred.loss,
        logic: score.loss,
        cf: cf_value,
        spar,
        total,
        belief: score.belief,
        cf_active: cf.is_some_and(|c| c.active),
        cf_available: cf.is_some(),
        zero_norm: pred.zero_norm,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Edge, TemporalSupport, BEFORE, CAUSE, ENABLE, PREVENT};
    use crate::numeric::finite_diff_check;
    use crate::verifier::VerifierConfig;

    fn ev(start: f64, end: f64, feature: Vec<f64>) -> Event {
        Event {
            label: [0, 0, 0].into(),
            feature,
            support: TemporalSupport { start, end },
        }
    }

    struct Fixture {
        verifier: Verifier,
        codebook: OperatorCodebook,
        predictor: Predictor,
        events: Vec<Event>,
        negative: Vec<Event>,
        frames: Matrix,
        chain: ReasoningChain,
    }

    fn fixture(seed: u64) -> Fixture {
        let (d, t) = (4, 12);
        let mut rng = SeededRng::new(seed);
        let codebook = OperatorCodebook::standard(8, 3, 1.0, &mut rng).unwrap();
        let cfg = VerifierConfig {
            hidden: 6,
            ..VerifierConfig::default()
        };
        let mut verifier = Verifier::new(cfg, d, 3, &mut rng).unwrap();
        verifier.head.b1.iter_mut().for_each(|b| *b = 0.2 * rng.normal());
        let pc = PredictorConfig { hidden: 5, prefix: 4 };
        let mut predictor = Predictor::random(pc, d, 3, &mut rng);
        predictor.head.b1.iter_mut().for_each(|b| *b = 0.2 * rng.normal());
        predictor.prefix.b2.iter_mut().for_each(|b| *b = 0.2 * rng.normal());
        let events: Vec<Event> = (0..4)
            .map(|i| {
                let s = 2.5 * i as f64 + 0.3 * rng.uniform();
                ev(s, s + 1.5 + rng.uniform(), (0..d).map(|_| rng.normal()).collect())
            })
            .collect();
        let mut negative = events.clone();
        let f0 = negative[0].feature.clone();
        negative[0].feature = negative[2].feature.clone();
        negative[2].feature = f0;
        negative[1].support.start += 4.0;
        negative[1].support.end += 4.0;
        negative[0].feature.iter_mut().for_each(|x| *x += 0.3);
        let frames = Matrix::from_fn(t, d, |_, _| rng.normal());
        let chain = ReasoningChain::new(vec![
            Edge::new(0, BEFORE, 1),
            Edge::new(0, CAUSE, 2),
            Edge::new(1, PREVENT, 3),
            Edge::new(2, ENABLE, 3),
        ]);
        Fixture {
            verifier,
            codebook,
            predictor,
            events,
            negative,
            frames,
            chain,
        }
    }

    #[test]
    fn exact_predictor_has_zero_loss_and_negated_has_two() {
        let d = 3;
        let mut p = Predictor::zeros(PredictorConfig { hidden: d, prefix: 2 }, d, 2);
        p.head.activation = Activation::Identity;
        for i in 0..d {
            p.head.w1.set(i, 2 + i, 1.0);
            p.head.w2.set(i, i, 1.0);
        }
        let mut rng = SeededRng::new(0);
        let cb = OperatorCodebook::standard(6, 2, 1.0, &mut rng).unwrap();
        let row = [0.3, -1.2, 0.8];
        let frames = Matrix::from_fn(6, d, |_, c| row[c]);
        let events = vec![ev(0.0, 2.0, vec![0.0; d]), ev(2.0, 4.0, vec![0.0; d])];
        let chain = ReasoningChain::new(vec![Edge::new(0, BEFORE, 1)]);
        let (r, _) = pred_loss(&chain, &events, &frames, &p, &cb).unwrap();
        assert!(r.loss.abs() < 1e-12, "{}", r.loss);
        for i in 0..d {
            p.head.w2.set(i, i, -1.0);
        }
        let (r, _) = pred_loss(&chain, &events, &frames, &p, &cb).unwrap();
        assert!((r.loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_frames_count_as_loss_one() {
        let f = fixture(0);
        let frames = Matrix::zeros(5, 4);
        let (r, _) = pred_loss(&f.chain, &f.events, &frames, &f.predictor, &f.codebook).unwrap();
        assert_eq!(r.zero_norm, 4);
        assert_eq!(r.loss, 1.0);
        let one = Matrix::zeros(1, 4);
        assert!(pred_loss(&f.chain, &f.events, &one, &f.predictor, &f.codebook).is_err());
    }

    #[test]
    fn pred_loss_is_in_range() {
        for seed in 0..10 {
            let f = fixture(seed);
            let (r, _) = pred_loss(&f.chain, &f.events, &f.frames, &f.predictor, &f.codebook).unwrap();
            assert!((0.0..=2.0).contains(&r.loss));
        }
    }

    #[test]
    fn prefix_only_holds_elapsed_edges() {
        // An edge whose events end after the last frame never enters a prefix,
        // so the loss equals the empty chain's.
        let f = fixture(1);
        let late = vec![ev(0.0, 100.0, f.events[0].feature.clone()), ev(1.0, 200.0, f.events[1].feature.clone())];
        let chain = ReasoningChain::new(vec![Edge::new(0, CAUSE, 1)]);
        let a = pred_loss(&chain, &late, &f.frames, &f.predictor, &f.codebook).unwrap().0;
        let b = pred_loss(&ReasoningChain::default(), &late, &f.frames, &f.predictor, &f.codebook)
            .unwrap()
            .0;
        assert_eq!(a, b);
        let early = pred_loss(&f.chain, &f.events, &f.frames, &f.predictor, &f.codebook).unwrap().0;
        let empty = pred_loss(&ReasoningChain::default(), &f.events, &f.frames, &f.predictor, &f.codebook)
            .unwrap()
            .0;
        assert_ne!(early, empty);
    }

    #[test]
    fn cf_hinge_cases() {
        let r = cf_from_logic(1.7, 1.7, 0.5);
        assert_eq!(r.loss, 0.5);
        let r = cf_from_logic(1.7, 1.7 + 1.0, 0.5);
        assert_eq!(r.loss, 0.0);
        assert!(!r.active);
    }

    #[test]
    fn cf_temporal_closed_form() {
        let f = fixture(0);
        let real = vec![ev(0.0, 2.0, vec![0.0; 4]), ev(3.0, 5.0, vec![0.0; 4])];
        let neg = vec![ev(3.0, 5.0, vec![0.0; 4]), ev(4.0, 6.0, vec![0.0; 4])];
        let chain = ReasoningChain::new(vec![Edge::new(0, BEFORE, 1)]);
        let r = cf_loss(&chain, &real, &neg, &f.verifier, &f.codebook, 0.5).unwrap();
        assert!((r.logic_real - 0.31326168751822286).abs() < 1e-12);
        assert!((r.logic_negative - 1.3132616875182228).abs() < 1e-12);
        assert_eq!(r.loss, 0.0);
        assert!(cf_loss(&chain, &real, &neg[..1], &f.verifier, &f.codebook, 0.5).is_err());
    }

    #[test]
    fn cf_bounds_hold() {
        for seed in 0..20 {
            let f = fixture(seed);
            let r = cf_loss(&f.chain, &f.events, &f.negative, &f.verifier, &f.codebook, 0.5).unwrap();
            assert!(r.loss >= 0.0);
            assert!(r.loss <= 0.5 + r.logic_real + 1e-12);
        }
    }

    #[test]
    fn spar_examples() {
        assert_eq!(spar_loss(5.0, 0.1), 0.5);
        assert_eq!(spar_loss(0.0, 0.1), 0.0);
        assert_eq!(spar_loss(9.0, 0.0), 0.0);
    }

    fn report(f: &Fixture, cfg: &ObjectiveConfig, grads: bool) -> AuxLossReport {
        aux_loss(
            AuxInputs {
                chain: &f.chain,
                events: &f.events,
                frames: &f.frames,
                negative: Some(&f.negative),
                length: f.chain.len() as f64,
            },
            &f.verifier,
            &f.codebook,
            &f.predictor,
            cfg,
            grads,
        )
        .unwrap()
    }

    #[test]
    fn aux_total_is_weighted_sum_and_linear() {
        let f = fixture(2);
        let zero = ObjectiveConfig {
            lambda_pred: 0.0,
            lambda_logic: 0.0,
            lambda_cf: 0.0,
            lambda_spar: 0.0,
            ..ObjectiveConfig::default()
        };
        assert_eq!(report(&f, &zero, false).total, 0.0);
        let logic_only = ObjectiveConfig {
            lambda_logic: 1.0,
            ..zero
        };
        let r = report(&f, &logic_only, false);
        let direct = score_chain(&f.chain, &f.events, &f.verifier, &f.codebook).unwrap().0.loss;
        assert_eq!(r.total, direct);
        let base = report(&f, &ObjectiveConfig::default(), false);
        let sum = base.pred + base.logic + base.cf + base.spar;
        assert!((base.total - sum).abs() < 1e-12);
        let scaled = ObjectiveConfig {
            lambda_pred: 3.0,
            ..ObjectiveConfig::default()
        };
        let r = report(&f, &scaled, false);
        assert!((r.total - base.total - 2.0 * base.pred).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let f = fixture(3);
        let zero = ObjectiveConfig {
            lambda_pred: 0.0,
            lambda_logic: 0.0,
            lambda_cf: 0.0,
            lambda_spar: 0.0,
            alpha: 0.0,
            ..ObjectiveConfig::default()
        };
        let g = report(&f, &zero, true).grads.unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    fn theta_flat(f: &Fixture) -> Vec<f64> {
        let mut v = f.verifier.head.flatten();
        v.extend(f.codebook.flatten());
        v.extend(f.predictor.flatten());
        v
    }

    fn set_theta(f: &mut Fixture, x: &[f64]) {
        let (a, rest) = x.split_at(f.verifier.head.num_params());
        let (b, c) = rest.split_at(f.codebook.num_params());
        f.verifier.head.assign(a);
        f.codebook.assign(b);
        f.predictor.assign(c);
    }

    #[test]
    fn aux_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut f = fixture(seed);
            let cfg = ObjectiveConfig {
                lambda_pred: 0.7,
                lambda_logic: 1.3,
                lambda_cf: 2.0,
                margin: 3.0,
                ..ObjectiveConfig::default()
            };
            let r = report(&f, &cfg, true);
            assert!(r.cf_active);
            let g = r.grads.unwrap();
            let x0 = theta_flat(&f);
            let check = finite_diff_check(
                |x| {
                    set_theta(&mut f, x);
                    report(&f, &cfg, false).total
                },
                &x0,
                &g.flatten(),
                1e-5,
            )
            .unwrap();
            assert!(check.max_rel_error <= 1e-5, "seed {seed}: {check:?}");
        }
    }

    #[test]
    fn theta_grad_names_match_owners() {
        let f = fixture(0);
        let g = ThetaGrads::zeros(&f.verifier, &f.codebook, &f.predictor);
        let mut names = Vec::new();
        g.visit("", &mut |n, _, _| names.push(n.to_string()));
        let mut owners = Vec::new();
        f.verifier.visit("verifier", &mut |n, _, _| owners.push(n.to_string()));
        f.codebook.visit("codebook", &mut |n, _, _| owners.push(n.to_string()));
        f.predictor.visit("predictor", &mut |n, _, _| owners.push(n.to_string()));
        assert_eq!(names, owners);
    }
}
