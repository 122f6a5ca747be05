//! Autoregressive chain policy.
//!
//! Each step first decides stop/continue (Bernoulli on a stop logit), then
//! picks a source event, an operator and a target event. Event features
//! enter as `φ_j = [v_j, τ^s/H, τ^e/H]` with `H` the latest event end.
//! Source and target logits are bilinear in a context vector and `φ_j`;
//! operator logits are dot products with codebook embeddings, so embeddings
//! receive gradient from the policy as well as from the verifier.
//!
//! Masking keeps every emitted chain valid: no self-loops, no repeated
//! `(a, z, b)` triples. When nothing is available, or `L_max` edges exist,
//! the stop is forced and contributes log-probability 0.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::event::{Edge, Event, OpId, OperatorCodebook, ReasoningChain};
use crate::numeric::{
    dot, join, log_sigmoid, log_softmax, sigmoid, softmax, Activation, Matrix, Mlp, MlpCache, Parameters, SeededRng,
};

pub const STEP_ENCODING: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub context: usize,
    pub max_len: usize,
    /// Condition later decisions on the relaxed operator mixture instead of
    /// the chosen embedding.
    pub soft_embedding: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            context: 32,
            max_len: 12,
            soft_embedding: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub feature_width: usize,
    pub embedding_width: usize,
    pub context: Mlp,
    pub stop_w: Vec<f64>,
    pub stop_b: Vec<f64>,
    pub source_w: Matrix,
    pub source_b: Vec<f64>,
    pub op_w: Matrix,
    pub op_b: Vec<f64>,
    pub target_w: Matrix,
    pub target_b: Vec<f64>,
}

fn phi_width(d: usize) -> usize {
    d + 2
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig, feature_width: usize, embedding_width: usize) -> Self {
        let (d, dz, c) = (feature_width, embedding_width, config.context);
        let p = phi_width(d);
        Self {
            config,
            feature_width: d,
            embedding_width: dz,
            context: Mlp::zeros(d + 2 * d + dz + STEP_ENCODING, config.hidden, c, Activation::Tanh),
            stop_w: vec![0.0; c],
            stop_b: vec![0.0],
            source_w: Matrix::zeros(p, c),
            source_b: vec![0.0; p],
            op_w: Matrix::zeros(dz, c + p),
            op_b: vec![0.0; dz],
            target_w: Matrix::zeros(p, c + p + dz),
            target_b: vec![0.0; p],
        }
    }

    /// Small random init: near-uniform action distributions.
    pub fn random(
        config: PolicyConfig,
        feature_width: usize,
        embedding_width: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if config.max_len == 0 || config.hidden == 0 || config.context == 0 {
            return Err(Error::Config("policy widths and max_len must be positive".into()));
        }
        let mut p = Self::zeros(config, feature_width, embedding_width);
        let c = config.context;
        p.context = Mlp::random(p.context.input_width(), config.hidden, c, Activation::Tanh, 1.0, rng);
        let mut fill = |m: &mut Matrix| {
            let s = gain / (m.cols() as f64).sqrt();
            m.data_mut().iter_mut().for_each(|x| *x = s * rng.normal());
        };
        fill(&mut p.source_w);
        fill(&mut p.op_w);
        fill(&mut p.target_w);
        Ok(p)
    }

    fn check(&self, events: &[Event], codebook: &OperatorCodebook) -> Result<()> {
        check_len("policy embedding width", self.embedding_width, codebook.width())?;
        for e in events {
            check_len("policy feature width", self.feature_width, e.feature.len())?;
        }
        Ok(())
    }
}

impl Parameters for PolicyParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.context.visit(&join(prefix, "context"), f);
        f(&join(prefix, "stop_w"), &[self.stop_w.len()], &self.stop_w);
        f(&join(prefix, "stop_b"), &[1], &self.stop_b);
        f(&join(prefix, "source_w"), &self.source_w.shape(), self.source_w.data());
        f(&join(prefix, "source_b"), &[self.source_b.len()], &self.source_b);
        f(&join(prefix, "op_w"), &self.op_w.shape(), self.op_w.data());
        f(&join(prefix, "op_b"), &[self.op_b.len()], &self.op_b);
        f(&join(prefix, "target_w"), &self.target_w.shape(), self.target_w.data());
        f(&join(prefix, "target_b"), &[self.target_b.len()], &self.target_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.context.visit_mut(&join(prefix, "context"), f);
        f(&join(prefix, "stop_w"), &mut self.stop_w);
        f(&join(prefix, "stop_b"), &mut self.stop_b);
        f(&join(prefix, "source_w"), self.source_w.data_mut());
        f(&join(prefix, "source_b"), &mut self.source_b);
        f(&join(prefix, "op_w"), self.op_w.data_mut());
        f(&join(prefix, "op_b"), &mut self.op_b);
        f(&join(prefix, "target_w"), self.target_w.data_mut());
        f(&join(prefix, "target_b"), &mut self.target_b);
    }
}

/// Sinusoidal step encoding.
pub fn step_encoding(step: usize) -> [f64; STEP_ENCODING] {
    let mut out = [0.0; STEP_ENCODING];
    for i in 0..STEP_ENCODING / 2 {
        let w = 1.0 / 100f64.powf(2.0 * i as f64 / STEP_ENCODING as f64);
        out[2 * i] = (step as f64 * w).sin();
        out[2 * i + 1] = (step as f64 * w).cos();
    }
    out
}

/// Relaxed distribution `softmax((log p + g)/τ)` over unmasked entries.
pub fn gumbel_softmax(log_p: &[f64], gumbel: &[f64], temperature: f64, mask: Option<&[bool]>) -> Vec<f64> {
    let z: Vec<f64> = log_p
        .iter()
        .zip(gumbel)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    softmax(&z, mask)
}

/// `argmax(log p + g)` over unmasked finite entries; ties go to the lower index.
pub fn perturbed_argmax(log_p: &[f64], gumbel: &[f64], mask: Option<&[bool]>) -> Option<usize> {
    argmax((0..log_p.len()).map(|i| {
        if mask.is_none_or(|m| m[i]) && log_p[i].is_finite() {
            log_p[i] + gumbel[i]
        } else {
            f64::NEG_INFINITY
        }
    }))
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if v == f64::NEG_INFINITY || v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

struct Available {
    k: usize,
    m: usize,
    taken: Vec<bool>,
}

impl Available {
    fn new(k: usize, m: usize, chain: &[Edge]) -> Self {
        let mut taken = vec![false; k * m * k];
        for e in chain {
            if e.source < k && e.target < k && e.op < m {
                taken[(e.source * m + e.op) * k + e.target] = true;
            }
        }
        Self { k, m, taken }
    }

    fn edge(&self, a: usize, z: usize, b: usize) -> bool {
        a != b && !self.taken[(a * self.m + z) * self.k + b]
    }

    fn take(&mut self, e: &Edge) {
        self.taken[(e.source * self.m + e.op) * self.k + e.target] = true;
    }

    fn target_mask(&self, a: usize, z: usize) -> Vec<bool> {
        (0..self.k).map(|b| self.edge(a, z, b)).collect()
    }

    fn op_mask(&self, a: usize) -> Vec<bool> {
        (0..self.m).map(|z| (0..self.k).any(|b| self.edge(a, z, b))).collect()
    }

    fn source_mask(&self) -> Vec<bool> {
        (0..self.k).map(|a| self.op_mask(a).into_iter().any(|x| x)).collect()
    }
}

/// Logits of one decision step, with masks. Operator and target entries are
/// present only once the earlier choices they condition on are given.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLogits {
    pub stop: f64,
    pub forced_stop: bool,
    pub source: Vec<f64>,
    pub source_mask: Vec<bool>,
    pub operator: Option<(Vec<f64>, Vec<bool>)>,
    pub target: Option<(Vec<f64>, Vec<bool>)>,
}

/// Per-rollout constant inputs.
struct Frame<'a> {
    policy: &'a PolicyParams,
    codebook: &'a OperatorCodebook,
    events: &'a [Event],
    phi: Vec<Vec<f64>>,
    mean_v: Vec<f64>,
}

impl<'a> Frame<'a> {
    fn new(policy: &'a PolicyParams, codebook: &'a OperatorCodebook, events: &'a [Event]) -> Result<Self> {
        policy.check(events, codebook)?;
        let d = policy.feature_width;
        let h = events
            .iter()
            .map(|e| e.support.end)
            .fold(1.0f64, f64::max);
        let phi = events
            .iter()
            .map(|e| {
                let mut p = e.feature.clone();
                p.extend([e.support.start / h, e.support.end / h]);
                p
            })
            .collect();
        let mut mean_v = vec![0.0; d];
        for e in events {
            for (m, x) in mean_v.iter_mut().zip(&e.feature) {
                *m += x / events.len() as f64;
            }
        }
        Ok(Self {
            policy,
            codebook,
            events,
            phi,
            mean_v,
        })
    }

    fn context(&self, prev: &[f64], step: usize) -> Result<(Vec<f64>, MlpCache)> {
        let mut x = self.mean_v.clone();
        x.extend_from_slice(prev);
        x.extend(step_encoding(step));
        self.policy.context.forward(&x)
    }

    fn source_logits(&self, c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.policy;
        let mut u = p.source_w.matvec(c);
        u.iter_mut().zip(&p.source_b).for_each(|(x, b)| *x += b);
        let l = self.phi.iter().map(|f| dot(&u, f)).collect();
        (l, u)
    }

    fn op_input(&self, c: &[f64], a: usize) -> Vec<f64> {
        let mut x = c.to_vec();
        x.extend_from_slice(&self.phi[a]);
        x
    }

    fn op_logits(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.policy;
        let mut q = p.op_w.matvec(x);
        q.iter_mut().zip(&p.op_b).for_each(|(x, b)| *x += b);
        let l = (0..self.codebook.len())
            .map(|z| dot(&q, self.codebook.embedding(z)))
            .collect();
        (l, q)
    }

    fn target_input(&self, c: &[f64], a: usize, cond: &[f64]) -> Vec<f64> {
        let mut x = c.to_vec();
        x.extend_from_slice(&self.phi[a]);
        x.extend_from_slice(cond);
        x
    }

    fn target_logits(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.policy;
        let mut r = p.target_w.matvec(x);
        r.iter_mut().zip(&p.target_b).for_each(|(x, b)| *x += b);
        let l = self.phi.iter().map(|f| dot(&r, f)).collect();
        (l, r)
    }

    fn mixture(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.codebook.width()];
        for (z, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, e) in out.iter_mut().zip(self.codebook.embedding(z)) {
                    *o += w * e;
                }
            }
        }
        out
    }

    fn prev_encoding(&self, e: &Edge, cond: &[f64]) -> Vec<f64> {
        let mut x = self.events[e.source].feature.clone();
        x.extend_from_slice(cond);
        x.extend_from_slice(&self.events[e.target].feature);
        x
    }

    fn empty_prev(&self) -> Vec<f64> {
        vec![0.0; 2 * self.policy.feature_width + self.codebook.width()]
    }
}

/// Step logits for `chain_so_far` at `step`, conditioned on the optional
/// source and operator choices.
pub fn step_logits(
    policy: &PolicyParams,
    codebook: &OperatorCodebook,
    events: &[Event],
    chain_so_far: &ReasoningChain,
    step: usize,
    source: Option<usize>,
    op: Option<OpId>,
) -> Result<StepLogits> {
    if step >= policy.config.max_len {
        return Err(Error::Contract(format!("step {step} >= L_max {}", policy.config.max_len)));
    }
    let f = Frame::new(policy, codebook, events)?;
    let avail = Available::new(events.len(), codebook.len(), &chain_so_far.edges);
    let prev = match chain_so_far.edges.last() {
        Some(e) => f.prev_encoding(e, codebook.embedding(e.op)),
        None => f.empty_prev(),
    };
    let (c, _) = f.context(&prev, step)?;
    let source_mask = avail.source_mask();
    let forced_stop = !source_mask.iter().any(|&x| x);
    let (source_logits, _) = f.source_logits(&c);
    let operator = source.map(|a| {
        let (l, _) = f.op_logits(&f.op_input(&c, a));
        (l, avail.op_mask(a))
    });
    let target = match (source, op) {
        (Some(a), Some(z)) => {
            let (l, _) = f.target_logits(&f.target_input(&c, a, codebook.embedding(z)));
            Some((l, avail.target_mask(a, z)))
        }
        _ => None,
    };
    Ok(StepLogits {
        stop: dot(&policy.stop_w, &c) + policy.stop_b[0],
        forced_stop,
        source: source_logits,
        source_mask,
        operator,
        target,
    })
}

/// How a rollout makes its choices.
trait Driver {
    fn stop(&mut self, p_stop: f64) -> Option<bool>;
    fn source(&mut self, log_p: &[f64]) -> Option<usize>;
    /// Chosen operator and, when relaxed, the mixture weights.
    fn operator(&mut self, log_p: &[f64], mask: &[bool]) -> Option<(usize, Option<Vec<f64>>)>;
    fn target(&mut self, log_p: &[f64]) -> Option<usize>;
    /// Edges a replayed chain still holds when the rollout is forced to stop.
    fn pending(&self) -> bool {
        false
    }
}

struct Sampler<'r> {
    rng: &'r mut SeededRng,
    temperature: f64,
    hard: bool,
}

impl Driver for Sampler<'_> {
    fn stop(&mut self, p_stop: f64) -> Option<bool> {
        Some(self.rng.uniform() < p_stop)
    }

    fn source(&mut self, log_p: &[f64]) -> Option<usize> {
        let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
        Some(self.rng.categorical(&p))
    }

    fn operator(&mut self, log_p: &[f64], mask: &[bool]) -> Option<(usize, Option<Vec<f64>>)> {
        let g: Vec<f64> = (0..log_p.len()).map(|_| self.rng.gumbel()).collect();
        let z = perturbed_argmax(log_p, &g, Some(mask))?;
        let relaxed = gumbel_softmax(log_p, &g, self.temperature, Some(mask));
        Some((z, (!self.hard).then_some(relaxed)))
    }

    fn target(&mut self, log_p: &[f64]) -> Option<usize> {
        self.source(log_p)
    }
}

struct Greedy;

impl Driver for Greedy {
    fn stop(&mut self, p_stop: f64) -> Option<bool> {
        Some(p_stop > 0.5)
    }

    fn source(&mut self, log_p: &[f64]) -> Option<usize> {
        argmax(log_p.iter().copied())
    }

    fn operator(&mut self, log_p: &[f64], _mask: &[bool]) -> Option<(usize, Option<Vec<f64>>)> {
        argmax(log_p.iter().copied()).map(|z| (z, None))
    }

    fn target(&mut self, log_p: &[f64]) -> Option<usize> {
        argmax(log_p.iter().copied())
    }
}

struct Replay<'c> {
    edges: &'c [Edge],
    relaxed: Option<&'c [Vec<f64>]>,
    step: usize,
}

impl Driver for Replay<'_> {
    fn stop(&mut self, _p: f64) -> Option<bool> {
        Some(self.step >= self.edges.len())
    }

    fn source(&mut self, _l: &[f64]) -> Option<usize> {
        Some(self.edges[self.step].source)
    }

    fn operator(&mut self, _l: &[f64], _m: &[bool]) -> Option<(usize, Option<Vec<f64>>)> {
        let w = self.relaxed.map(|r| r[self.step].clone());
        Some((self.edges[self.step].op, w))
    }

    fn target(&mut self, _l: &[f64]) -> Option<usize> {
        let b = self.edges[self.step].target;
        self.step += 1;
        Some(b)
    }

    fn pending(&self) -> bool {
        self.step < self.edges.len()
    }
}

/// Gradient buffers for `scale · ∇ log π`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrads {
    pub policy: PolicyParams,
    pub embeddings: Matrix,
}

impl PolicyGrads {
    pub fn zeros(policy: &PolicyParams, codebook: &OperatorCodebook) -> Self {
        Self {
            policy: policy.zeros_like(),
            embeddings: Matrix::zeros(codebook.len(), codebook.width()),
        }
    }
}

struct Rollout {
    edges: Vec<Edge>,
    step_log_probs: Vec<f64>,
    continue_probs: Vec<f64>,
    relaxed: Vec<Vec<f64>>,
    forced: bool,
    /// First step whose chosen action had probability zero.
    unreachable: Option<usize>,
}

fn add_scaled(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// `φ_chosen − Σ p_j φ_j` over the rows of `vectors`.
fn score_grad<'v>(chosen: usize, probs: &[f64], vectors: impl Iterator<Item = &'v [f64]>, width: usize) -> Vec<f64> {
    let mut g = vec![0.0; width];
    for (j, v) in vectors.enumerate() {
        let w = if j == chosen { 1.0 } else { 0.0 } - probs[j];
        if w != 0.0 {
            add_scaled(&mut g, w, v);
        }
    }
    g
}

/// Gradient request: `scale · ∇ log π + continue_scale · ∇ Σ_t p_cont(t)`.
struct GradRequest<'g> {
    grads: &'g mut PolicyGrads,
    scale: f64,
    continue_scale: f64,
}

fn rollout(f: &Frame, driver: &mut dyn Driver, mut grads: Option<GradRequest>) -> Result<Rollout> {
    let policy = f.policy;
    let (k, m) = (f.events.len(), f.codebook.len());
    let cw = policy.config.context;
    let pw = phi_width(policy.feature_width);
    let mut avail = Available::new(k, m, &[]);
    let mut out = Rollout {
        edges: Vec::new(),
        step_log_probs: Vec::new(),
        continue_probs: Vec::new(),
        relaxed: Vec::new(),
        forced: false,
        unreachable: None,
    };
    let mut prev = f.empty_prev();
    // Conditioning weights of the previous edge, for routing context grads.
    let mut prev_cond: Option<Vec<(usize, f64)>> = None;
    let d = policy.feature_width;
    loop {
        let step = out.edges.len();
        let source_mask = avail.source_mask();
        if step >= policy.config.max_len || !source_mask.iter().any(|&x| x) {
            out.forced = true;
            out.step_log_probs.push(0.0);
            if driver.pending() {
                out.unreachable.get_or_insert(step);
            }
            return Ok(out);
        }
        let (c, cache) = f.context(&prev, step)?;
        let mut dc = vec![0.0; cw];
        let s = dot(&policy.stop_w, &c) + policy.stop_b[0];
        let stop = driver.stop(sigmoid(s)).unwrap_or(true);
        out.continue_probs.push(sigmoid(-s));
        let (stop_lp, ds) = if stop {
            (log_sigmoid(s), sigmoid(-s))
        } else {
            (log_sigmoid(-s), -sigmoid(s))
        };
        if let Some(req) = grads.as_mut() {
            let gs = req.scale * ds - req.continue_scale * sigmoid(s) * sigmoid(-s);
            add_scaled(&mut req.grads.policy.stop_w, gs, &c);
            req.grads.policy.stop_b[0] += gs;
            add_scaled(&mut dc, gs, &policy.stop_w);
        }
        let mut step_lp = stop_lp;
        let mut chosen = None;
        if !stop {
            // Source.
            let (sl, _) = f.source_logits(&c);
            let slp = log_softmax(&sl, Some(&source_mask));
            let a = driver.source(&slp).ok_or_else(|| Error::Contract("no source available".into()))?;
            step_lp += slp[a];
            // Operator.
            let ox = f.op_input(&c, a);
            let (ol, q) = f.op_logits(&ox);
            let omask = avail.op_mask(a);
            let olp = log_softmax(&ol, Some(&omask));
            let (z, relaxed) = driver
                .operator(&olp, &omask)
                .ok_or_else(|| Error::Contract("no operator available".into()))?;
            step_lp += olp[z];
            let cond_w: Vec<(usize, f64)> = match &relaxed {
                Some(w) => w.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect(),
                None => vec![(z, 1.0)],
            };
            let cond = match &relaxed {
                Some(w) => f.mixture(w),
                None => f.codebook.embedding(z).to_vec(),
            };
            // Target.
            let tx = f.target_input(&c, a, &cond);
            let (tl, _) = f.target_logits(&tx);
            let tmask = avail.target_mask(a, z);
            let tlp = log_softmax(&tl, Some(&tmask));
            let b = driver.target(&tlp).ok_or_else(|| Error::Contract("no target available".into()))?;
            step_lp += tlp[b];
            if slp[a] == f64::NEG_INFINITY || olp[z] == f64::NEG_INFINITY || tlp[b] == f64::NEG_INFINITY {
                out.unreachable.get_or_insert(step);
            }
            if let Some(req) = grads.as_mut().filter(|_| out.unreachable.is_none()) {
                let scale = req.scale;
                let g = &mut *req.grads;
                let sp: Vec<f64> = slp.iter().map(|l| l.exp()).collect();
                let du = score_grad(a, &sp, f.phi.iter().map(|v| v.as_slice()), pw);
                g.policy.source_w.add_outer(scale, &du, &c);
                add_scaled(&mut g.policy.source_b, scale, &du);
                add_scaled(&mut dc, scale, &policy.source_w.matvec_t(&du));

                let op_p: Vec<f64> = olp.iter().map(|l| l.exp()).collect();
                let dq = score_grad(z, &op_p, (0..m).map(|j| f.codebook.embedding(j)), f.codebook.width());
                for j in 0..m {
                    let w = if j == z { 1.0 } else { 0.0 } - op_p[j];
                    if w != 0.0 {
                        add_scaled(g.embeddings.row_mut(j), scale * w, &q);
                    }
                }
                g.policy.op_w.add_outer(scale, &dq, &ox);
                add_scaled(&mut g.policy.op_b, scale, &dq);
                add_scaled(&mut dc, scale, &policy.op_w.matvec_t(&dq)[..cw]);

                let tp: Vec<f64> = tlp.iter().map(|l| l.exp()).collect();
                let dr = score_grad(b, &tp, f.phi.iter().map(|v| v.as_slice()), pw);
                g.policy.target_w.add_outer(scale, &dr, &tx);
                add_scaled(&mut g.policy.target_b, scale, &dr);
                let dtx = policy.target_w.matvec_t(&dr);
                add_scaled(&mut dc, scale, &dtx[..cw]);
                for &(j, w) in &cond_w {
                    add_scaled(g.embeddings.row_mut(j), scale * w, &dtx[cw + pw..]);
                }
            }
            chosen = Some((Edge::new(a, z, b), cond, cond_w, relaxed));
        }
        if let Some(req) = grads.as_mut().filter(|_| out.unreachable.is_none()) {
            let g = &mut *req.grads;
            let dx = policy.context.backward_into(&cache, &dc, &mut g.policy.context)?;
            if let Some(pc) = &prev_cond {
                let dz = &dx[d + d..d + d + f.codebook.width()];
                for &(j, w) in pc {
                    add_scaled(g.embeddings.row_mut(j), w, dz);
                }
            }
        }
        out.step_log_probs.push(step_lp);
        match chosen {
            None => return Ok(out),
            Some((e, cond, cond_w, relaxed)) => {
                prev = f.prev_encoding(&e, &cond);
                prev_cond = Some(cond_w);
                avail.take(&e);
                out.edges.push(e);
                out.relaxed.push(relaxed.unwrap_or_default());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledChain {
    pub chain: ReasoningChain,
    /// One entry per emitted edge plus the final stop decision.
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    pub stop_step: usize,
    pub forced_stop: bool,
    /// Relaxed operator distribution per step (empty in hard mode).
    pub relaxed: Vec<Vec<f64>>,
    /// Continue probability at every unforced decision state visited.
    pub continue_probs: Vec<f64>,
}

impl SampledChain {
    fn from_rollout(r: Rollout) -> Self {
        let log_prob = r.step_log_probs.iter().sum();
        Self {
            stop_step: r.edges.len(),
            chain: ReasoningChain::new(r.edges),
            step_log_probs: r.step_log_probs,
            log_prob,
            forced_stop: r.forced,
            relaxed: r.relaxed,
            continue_probs: r.continue_probs,
        }
    }

    /// `Σ_t p_cont(t)` over visited states; its expectation is `E|C|`.
    pub fn expected_length_estimate(&self) -> f64 {
        self.continue_probs.iter().sum()
    }

    fn relaxed_weights(&self) -> Option<&[Vec<f64>]> {
        if self.relaxed.iter().any(|w| !w.is_empty()) {
            Some(&self.relaxed)
        } else {
            None
        }
    }
}

/// Samples a chain. Events are drawn from their categorical distributions,
/// operators by Gumbel-max; in soft mode (`hard = false` with the policy's
/// `soft_embedding` set) later decisions condition on the relaxed mixture.
pub fn sample_chain(
    policy: &PolicyParams,
    codebook: &OperatorCodebook,
    events: &[Event],
    rng: &mut SeededRng,
    temperature: f64,
    hard: bool,
) -> Result<SampledChain> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be > 0, got {temperature}")));
    }
    let f = Frame::new(policy, codebook, events)?;
    let mut driver = Sampler {
        rng,
        temperature,
        hard: hard || !policy.config.soft_embedding,
    };
    let r = rollout(&f, &mut driver, None)?;
    Ok(SampledChain::from_rollout(r))
}

pub fn greedy_chain(policy: &PolicyParams, codebook: &OperatorCodebook, events: &[Event]) -> Result<SampledChain> {
    let f = Frame::new(policy, codebook, events)?;
    Ok(SampledChain::from_rollout(rollout(&f, &mut Greedy, None)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChainLogProb {
    Reachable(f64),
    /// The chain needs an action that is masked at `step`.
    Unreachable { step: usize },
}

impl ChainLogProb {
    pub fn value(self) -> f64 {
        match self {
            ChainLogProb::Reachable(l) => l,
            ChainLogProb::Unreachable { .. } => f64::NEG_INFINITY,
        }
    }
}

fn replay_checked(chain: &ReasoningChain, events: &[Event], codebook: &OperatorCodebook) -> Option<usize> {
    chain
        .edges
        .iter()
        .position(|e| e.source >= events.len() || e.target >= events.len() || e.op >= codebook.len())
}

/// Exact `log π(C)`, including the final stop decision, under hard
/// conditioning.
pub fn chain_log_prob(
    policy: &PolicyParams,
    codebook: &OperatorCodebook,
    events: &[Event],
    chain: &ReasoningChain,
) -> Result<ChainLogProb> {
    if let Some(step) = replay_checked(chain, events, codebook) {
        return Ok(ChainLogProb::Unreachable { step });
    }
    let f = Frame::new(policy, codebook, events)?;
    let mut driver = Replay {
        edges: &chain.edges,
        relaxed: None,
        step: 0,
    };
    let r = rollout(&f, &mut driver, None)?;
    Ok(match r.unreachable {
        Some(step) => ChainLogProb::Unreachable { step },
        None => ChainLogProb::Reachable(r.step_log_probs.iter().sum()),
    })
}

/// Accumulates `scale · ∇ log π(sampled)` into `grads` and returns the
/// replayed log-probability.
pub fn log_prob_grad_into(
    policy: &PolicyParams,
    codebook: &OperatorCodebook,
    events: &[Event],
    sampled: &SampledChain,
    scale: f64,
    grads: &mut PolicyGrads,
) -> Result<f64> {
    policy_grad_into(policy, codebook, events, sampled, scale, 0.0, grads)
}

/// Accumulates `scale · ∇ log π + continue_scale · ∇ Σ_t p_cont(t)`, the
/// second term being the pathwise part of an expected-length penalty.
pub fn policy_grad_into(
    policy: &PolicyParams,
    codebook: &OperatorCodebook,
    events: &[Event],
    sampled: &SampledChain,
    scale: f64,
    continue_scale: f64,
    grads: &mut PolicyGrads,
) -> Result<f64> {
    if let Some(step) = replay_checked(&sampled.chain, events, codebook) {
        return Err(Error::Contract(format!("chain unreachable at step {step}")));
    }
    let f = Frame::new(policy, codebook, events)?;
    let mut driver = Replay {
        edges: &sampled.chain.edges,
        relaxed: sampled.relaxed_weights(),
        step: 0,
    };
    let req = GradRequest {
        grads,
        scale,
        continue_scale,
    };
    let r = rollout(&f, &mut driver, Some(req))?;
    if let Some(step) = r.unreachable {
        return Err(Error::Contract(format!("chain unreachable at step {step}")));
    }
    Ok(r.step_log_probs.iter().sum())
}

/// Index of the minimal loss; ties go to the shorter chain, then the lower
/// index. Non-finite losses rank last.
pub fn select_best(losses: &[f64], lengths: &[usize]) -> Option<usize> {
    let key = |i: usize| if losses[i].is_finite() { losses[i] } else { f64::INFINITY };
    (0..losses.len()).min_by(|&i, &j| {
        key(i)
            .total_cmp(&key(j))
            .then(lengths[i].cmp(&lengths[j]))
            .then(i.cmp(&j))
    })
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub best: usize,
    pub candidates: Vec<SampledChain>,
    pub losses: Vec<f64>,
}

impl Selection {
    pub fn chain(&self) -> &ReasoningChain {
        &self.candidates[self.best].chain
    }
}

/// Draws `n` chains in hard mode and keeps the one with minimal `loss`.
pub fn sample_and_select(
    policy: &PolicyParams,
    codebook: &OperatorCodebook,
    events: &[Event],
    n: usize,
    rng: &mut SeededRng,
    temperature: f64,
    mut loss: impl FnMut(&ReasoningChain) -> Result<f64>,
) -> Result<Selection> {
    if n == 0 {
        return Err(Error::Contract("sample_and_select needs n >= 1".into()));
    }
    let mut candidates = Vec::with_capacity(n);
    let mut losses = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sample_chain(policy, codebook, events, rng, temperature, true)?;
        losses.push(loss(&s.chain)?);
        candidates.push(s);
    }
    let lengths: Vec<usize> = candidates.iter().map(|c| c.chain.len()).collect();
    let best = select_best(&losses, &lengths).unwrap_or(0);
    Ok(Selection {
        best,
        candidates,
        losses,
    })
}
