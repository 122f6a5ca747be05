//! Joint training: REINFORCE with a self-critical baseline for the policy,
//! direct gradients for θ, linear temperature annealing, checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{greedy_chain, policy_grad_into, sample_chain, PolicyGrads, SampledChain};
use crate::model::{ModelConfig, ModelState};
use crate::numeric::{norm, AdamState, Parameters, RngCursor, SeededRng};
use crate::objectives::{aux_loss, AuxInputs, AuxLossReport, ObjectiveConfig, SparsityMode, ThetaGrads};
use crate::pipeline::{NegativeSampling, PreparedScenario};

const TRAIN_STREAM: u64 = 3;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str =
    "step,loss_total,loss_pred,loss_logic,loss_cf,loss_spar,mean_len,mean_belief,temperature";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_theta: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Samples per scenario, N_train.
    pub samples: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Save every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub negatives: NegativeSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_policy: 1e-3,
            lr_theta: 1e-3,
            temperature_start: 1.0,
            temperature_end: 0.1,
            samples: 5,
            seed: 0,
            objective: ObjectiveConfig::default(),
            checkpoint_every: 0,
            negatives: NegativeSampling::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples == 0 {
            return Err(Error::Config("epochs, batch_size and samples must be >= 1".into()));
        }
        for (name, lr) in [("lr_policy", self.lr_policy), ("lr_theta", self.lr_theta)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        let (a, b) = (self.temperature_start, self.temperature_end);
        if !(b > 0.0 && b <= a && a <= 1.0) {
            return Err(Error::Config(format!(
                "temperature schedule must satisfy 0 < end <= start <= 1, got {a} -> {b}"
            )));
        }
        self.objective.validate()
    }
}

/// Linear per-epoch annealing from `temperature_start` to `temperature_end`.
pub fn temperature(config: &TrainConfig, epoch: usize) -> f64 {
    if config.epochs <= 1 {
        return config.temperature_start;
    }
    let frac = (epoch.min(config.epochs - 1)) as f64 / (config.epochs - 1) as f64;
    config.temperature_start + (config.temperature_end - config.temperature_start) * frac
}

/// `(loss − baseline) · ∇ log π`, a descent direction on expected loss.
pub fn reinforce_grad<P: Parameters + Clone>(grad_log_prob: &P, loss: f64, baseline: f64) -> Result<P> {
    let advantage = loss - baseline;
    if !advantage.is_finite() {
        return Err(Error::NonFinite(format!("reward {loss} with baseline {baseline}; step skipped")));
    }
    let mut g = grad_log_prob.clone();
    g.scale(advantage);
    Ok(g)
}

fn length_term(sampled: &SampledChain, mode: SparsityMode) -> f64 {
    match mode {
        SparsityMode::Count => sampled.chain.len() as f64,
        SparsityMode::ExpectedLength => sampled.expected_length_estimate(),
    }
}

fn training_loss(
    model: &ModelState,
    prep: &PreparedScenario,
    objective: &ObjectiveConfig,
    sampled: &SampledChain,
    with_grads: bool,
) -> Result<AuxLossReport> {
    let negative = prep
        .negative
        .as_ref()
        .ok_or_else(|| Error::Counterfactual(format!("scenario {} has no negative", prep.index)))?;
    aux_loss(
        AuxInputs {
            chain: &sampled.chain,
            events: prep.events(),
            frames: &prep.frames,
            negative: Some(&negative.events),
            length: length_term(sampled, objective.sparsity),
        },
        &model.verifier,
        &model.codebook,
        &model.predictor,
        objective,
        with_grads,
    )
}

/// `L_aux` of the greedy chain; reused as the baseline for every sample of
/// the scenario.
pub fn self_critical_baseline(
    model: &ModelState,
    prep: &PreparedScenario,
    objective: &ObjectiveConfig,
) -> Result<(f64, SampledChain)> {
    let greedy = greedy_chain(&model.policy, &model.codebook, prep.events())?;
    let r = training_loss(model, prep, objective, &greedy, false)?;
    Ok((r.total, greedy))
}

#[derive(Clone, Debug)]
struct ScenarioOutcome {
    policy: PolicyGrads,
    theta: ThetaGrads,
    sums: MetricSums,
}

#[derive(Clone, Copy, Debug, Default)]
struct MetricSums {
    samples: usize,
    total: f64,
    pred: f64,
    logic: f64,
    cf: f64,
    spar: f64,
    len: f64,
    belief: f64,
}

impl MetricSums {
    fn add(&mut self, o: &MetricSums) {
        self.samples += o.samples;
        self.total += o.total;
        self.pred += o.pred;
        self.logic += o.logic;
        self.cf += o.cf;
        self.spar += o.spar;
        self.len += o.len;
        self.belief += o.belief;
    }
}

fn scenario_update(
    model: &ModelState,
    prep: &PreparedScenario,
    config: &TrainConfig,
    temperature: f64,
    seed: u64,
) -> Result<ScenarioOutcome> {
    let events = prep.events();
    if events.len() < 2 {
        return Err(Error::Contract(format!("{} detected events", events.len())));
    }
    let obj = &config.objective;
    let (baseline, _) = self_critical_baseline(model, prep, obj)?;
    let mut rng = SeededRng::new(seed);
    let hard = !model.config.policy.soft_embedding;
    let n = config.samples as f64;
    let continue_scale = match obj.sparsity {
        SparsityMode::Count => 0.0,
        SparsityMode::ExpectedLength => obj.lambda_spar * obj.alpha / n,
    };
    let mut policy = PolicyGrads::zeros(&model.policy, &model.codebook);
    let mut theta = ThetaGrads::zeros(&model.verifier, &model.codebook, &model.predictor);
    let mut sums = MetricSums::default();
    for _ in 0..config.samples {
        let s = sample_chain(&model.policy, &model.codebook, events, &mut rng, temperature, hard)?;
        let r = training_loss(model, prep, obj, &s, true)?;
        if !r.total.is_finite() {
            return Err(Error::NonFinite(format!("aux loss {}", r.total)));
        }
        theta.add_scaled(r.grads.as_ref().expect("requested"), 1.0 / n);
        let advantage = r.total - baseline;
        policy_grad_into(&model.policy, &model.codebook, events, &s, advantage / n, continue_scale, &mut policy)?;
        sums.add(&MetricSums {
            samples: 1,
            total: r.total,
            pred: r.pred,
            logic: r.logic,
            cf: r.cf,
            spar: r.spar,
            len: s.chain.len() as f64,
            belief: r.belief,
        });
    }
    Ok(ScenarioOutcome { policy, theta, sums })
}

/// One Adam state per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub policy: AdamState,
    pub theta: AdamState,
}

impl Optimizers {
    pub fn new(model: &ModelState, config: &TrainConfig) -> Self {
        Self {
            policy: AdamState::new(model.policy.num_params(), config.lr_policy),
            theta: AdamState::new(model.theta_len(), config.lr_theta),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_pred: f64,
    pub loss_logic: f64,
    pub loss_cf: f64,
    pub loss_spar: f64,
    pub mean_len: f64,
    pub mean_belief: f64,
    pub temperature: f64,
    /// `scenario=<index>:<reason>` for every scenario skipped in the batch.
    #[serde(skip)]
    pub skipped: Vec<String>,
    /// Per-operator norm of the applied embedding gradient.
    #[serde(skip)]
    pub embedding_grad_norms: Vec<f64>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_pred,
            self.loss_logic,
            self.loss_cf,
            self.loss_spar,
            self.mean_len,
            self.mean_belief,
            self.temperature
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn skip_reason(e: &Error) -> &'static str {
    match e {
        Error::Counterfactual(_) | Error::NoStructuralNegative => "no_negative",
        Error::NonFinite(_) => "non_finite",
        Error::Contract(_) => "degenerate",
        _ => "error",
    }
}

/// One optimizer step over a batch. Per-scenario failures are skipped and
/// tagged; the batch never aborts.
pub fn train_step(
    model: &mut ModelState,
    optim: &mut Optimizers,
    batch: &[&PreparedScenario],
    seeds: &[u64],
    config: &TrainConfig,
    temperature: f64,
    step: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step needs a nonempty batch".into()));
    }
    crate::error::check_len("train_step seeds", batch.len(), seeds.len())?;
    let frozen: &ModelState = model;
    let outcomes: Vec<Result<ScenarioOutcome>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(prep, &seed)| scenario_update(frozen, prep, config, temperature, seed))
        .collect();
    let mut policy = PolicyGrads::zeros(&model.policy, &model.codebook);
    let mut theta = ThetaGrads::zeros(&model.verifier, &model.codebook, &model.predictor);
    let mut sums = MetricSums::default();
    let mut skipped = Vec::new();
    let mut ok = 0usize;
    let mut embedding_grad_norms = Vec::new();
    for (prep, outcome) in batch.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                ok += 1;
                policy.policy.add_scaled(&o.policy.policy, 1.0);
                for (a, b) in policy.embeddings.data_mut().iter_mut().zip(o.policy.embeddings.data()) {
                    *a += b;
                }
                theta.add_scaled(&o.theta, 1.0);
                sums.add(&o.sums);
            }
            Err(e) => skipped.push(format!("scenario={}:{}", prep.index, skip_reason(&e))),
        }
    }
    if ok > 0 {
        let inv = 1.0 / ok as f64;
        for (a, b) in theta.embeddings.data_mut().iter_mut().zip(policy.embeddings.data()) {
            *a += b;
        }
        theta.scale(inv);
        policy.policy.scale(inv);
        embedding_grad_norms = (0..theta.embeddings.rows()).map(|r| norm(theta.embeddings.row(r))).collect();
        let mut p = model.policy.flatten();
        optim.policy.step(&mut p, &policy.policy.flatten())?;
        model.policy.assign(&p);
        let mut t = model.theta_flat();
        optim.theta.step(&mut t, &theta.flatten())?;
        model.set_theta(&t)?;
    }
    let n = sums.samples as f64;
    let mean = |x: f64| if sums.samples == 0 { f64::NAN } else { x / n };
    Ok(StepMetrics {
        step,
        loss_total: mean(sums.total),
        loss_pred: mean(sums.pred),
        loss_logic: mean(sums.logic),
        loss_cf: mean(sums.cf),
        loss_spar: mean(sums.spar),
        mean_len: mean(sums.len),
        mean_belief: mean(sums.belief),
        temperature,
        skipped,
        embedding_grad_norms,
    })
}

pub struct Trainer {
    pub model: ModelState,
    pub optim: Optimizers,
    pub config: TrainConfig,
    pub rng: SeededRng,
    pub epoch: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: ModelState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optim: Optimizers::new(&model, &config),
            rng: SeededRng::with_stream(config.seed, TRAIN_STREAM),
            model,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn current_temperature(&self) -> f64 {
        temperature(&self.config, self.epoch)
    }

    pub fn run_epoch(&mut self, data: &[PreparedScenario]) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::Contract("empty training corpus".into()));
        }
        let tau = self.current_temperature();
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let mut rows = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let seeds: Vec<u64> = chunk.iter().map(|_| self.rng.next_u64()).collect();
            let batch: Vec<&PreparedScenario> = chunk.iter().map(|&i| &data[i]).collect();
            self.step += 1;
            let m = train_step(&mut self.model, &mut self.optim, &batch, &seeds, &self.config, tau, self.step)?;
            rows.push(m);
        }
        self.epoch += 1;
        Ok(rows)
    }

    /// Trains until `config.epochs`, calling `on_epoch` after each epoch.
    pub fn fit(
        &mut self,
        data: &[PreparedScenario],
        mut on_epoch: impl FnMut(&Trainer, &[StepMetrics]) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let rows = self.run_epoch(data)?;
            on_epoch(self, &rows)?;
            all.extend(rows);
        }
        Ok(all)
    }

    pub fn checkpoint(&self, model_config: &ModelConfig) -> Checkpoint {
        Checkpoint::capture(self, model_config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamGroup {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub step: usize,
    pub config: CheckpointConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub adam: BTreeMap<String, AdamGroup>,
    pub rng_cursor: RngCursor,
}

/// Tensor names and lengths of a group, in flat order.
fn layout(visit: impl Fn(&mut dyn FnMut(&str, &[usize], &[f64]))) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    visit(&mut |n, _, d| out.push((n.to_string(), d.len())));
    out
}

fn policy_layout(model: &ModelState) -> Vec<(String, usize)> {
    layout(|f| model.policy.visit("policy", f))
}

fn theta_layout(model: &ModelState) -> Vec<(String, usize)> {
    layout(|f| {
        model.verifier.visit("verifier", f);
        model.codebook.visit("codebook", f);
        model.predictor.visit("predictor", f);
    })
}

fn split_moments(state: &AdamState, names: &[(String, usize)]) -> AdamGroup {
    let mut moments = BTreeMap::new();
    let mut off = 0;
    for (name, len) in names {
        moments.insert(
            name.clone(),
            Moments {
                m: state.m[off..off + len].to_vec(),
                v: state.v[off..off + len].to_vec(),
            },
        );
        off += len;
    }
    AdamGroup {
        step: state.step,
        lr: state.lr,
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps,
        moments,
    }
}

fn join_moments(group: &AdamGroup, names: &[(String, usize)]) -> Result<AdamState> {
    let total = names.iter().map(|(_, l)| l).sum();
    let mut state = AdamState::new(total, group.lr);
    state.step = group.step;
    state.beta1 = group.beta1;
    state.beta2 = group.beta2;
    state.eps = group.eps;
    let mut off = 0;
    for (name, len) in names {
        let mo = group
            .moments
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moments for {name}")))?;
        if mo.m.len() != *len || mo.v.len() != *len {
            return Err(Error::Checkpoint(format!("optimizer moments for {name} have the wrong length")));
        }
        state.m[off..off + len].copy_from_slice(&mo.m);
        state.v[off..off + len].copy_from_slice(&mo.v);
        off += len;
    }
    if group.moments.len() != names.len() {
        return Err(Error::Checkpoint("unexpected optimizer moments".into()));
    }
    Ok(state)
}

impl Checkpoint {
    fn capture(trainer: &Trainer, model_config: &ModelConfig) -> Self {
        let mut tensors = BTreeMap::new();
        trainer.model.visit("", &mut |name, shape, data| {
            tensors.insert(
                name.to_string(),
                Tensor {
                    shape: shape.to_vec(),
                    data: data.to_vec(),
                },
            );
        });
        let mut adam = BTreeMap::new();
        adam.insert(
            "policy".to_string(),
            split_moments(&trainer.optim.policy, &policy_layout(&trainer.model)),
        );
        adam.insert(
            "theta".to_string(),
            split_moments(&trainer.optim.theta, &theta_layout(&trainer.model)),
        );
        Self {
            version: CHECKPOINT_VERSION,
            epoch: trainer.epoch,
            step: trainer.step,
            config: CheckpointConfig {
                model: model_config.clone(),
                train: trainer.config.clone(),
            },
            tensors,
            adam,
            rng_cursor: trainer.rng.cursor(),
        }
    }

    /// Rebuilds the model; every tensor must be present with its shape.
    pub fn model(&self) -> Result<ModelState> {
        let mut model = ModelState::new(self.config.model.clone(), 0)?;
        let mut seen = 0;
        let mut err = None;
        model.visit_mut("", &mut |name, data| match self.tensors.get(name) {
            Some(t) if t.data.len() == data.len() => {
                data.copy_from_slice(&t.data);
                seen += 1;
            }
            Some(_) => {
                err.get_or_insert(Error::Checkpoint(format!("tensor {name} has the wrong size")));
            }
            None => {
                err.get_or_insert(Error::Checkpoint(format!("tensor {name} missing")));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.tensors.len() {
            return Err(Error::Checkpoint("checkpoint holds unknown tensors".into()));
        }
        if !model.is_finite() {
            return Err(Error::Checkpoint("non-finite tensor values".into()));
        }
        Ok(model)
    }

    pub fn trainer(&self) -> Result<Trainer> {
        let model = self.model()?;
        let optim = Optimizers {
            policy: join_moments(self.adam_group("policy")?, &policy_layout(&model))?,
            theta: join_moments(self.adam_group("theta")?, &theta_layout(&model))?,
        };
        let rng = SeededRng::from_cursor(&self.rng_cursor)
            .ok_or_else(|| Error::Checkpoint("malformed rng cursor".into()))?;
        self.config.train.validate()?;
        Ok(Trainer {
            model,
            optim,
            config: self.config.train.clone(),
            rng,
            epoch: self.epoch,
            step: self.step,
        })
    }

    fn adam_group(&self, name: &str) -> Result<&AdamGroup> {
        self.adam
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer group {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec(self)?;
        b.push(b'\n');
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventifier::{EventifierConfig, Prototypes};
    use crate::pipeline::prepare;
    use crate::world::{generate_corpus, WorldConfig};

    fn small_model() -> ModelConfig {
        let mut m = ModelConfig {
            feature_width: 16,
            embedding_width: 8,
            operators: 8,
            ..ModelConfig::default()
        };
        m.verifier.hidden = 8;
        m.policy.hidden = 8;
        m.policy.context = 8;
        m.policy.max_len = 6;
        m.predictor.hidden = 8;
        m.predictor.prefix = 8;
        m
    }

    fn data(n: usize, seed: u64) -> Vec<PreparedScenario> {
        let world = WorldConfig {
            events: 3,
            frames: 32,
            ..WorldConfig::default()
        };
        let corpus = generate_corpus(&world, seed, n).unwrap();
        let protos = Prototypes::estimate(&corpus);
        prepare(&corpus, &protos, &EventifierConfig::default(), NegativeSampling::Uniform, seed)
    }

    #[test]
    fn temperature_schedule_is_linear_and_monotone() {
        let cfg = TrainConfig::default();
        assert_eq!(temperature(&cfg, 0), 1.0);
        assert!((temperature(&cfg, 29) - 0.1).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..40 {
            let t = temperature(&cfg, e);
            assert!(t <= prev && t > 0.0 && t <= 1.0);
            prev = t;
        }
        let one = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!(temperature(&one, 0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            temperature_end: 2.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_theta: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reinforce_zero_at_baseline_and_shift_invariant() {
        let g = vec![0.5, -0.25, 2.0];
        assert!(reinforce_grad(&g, 1.3, 1.3).unwrap().iter().all(|&x| x == 0.0));
        // Dyadic values keep the shifted difference exact.
        let a = reinforce_grad(&g, 0.75, 0.25).unwrap();
        let b = reinforce_grad(&g, 0.75 + 8.0, 0.25 + 8.0).unwrap();
        assert_eq!(a, b);
        assert!(matches!(reinforce_grad(&g, f64::NAN, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn baseline_is_deterministic() {
        let d = data(3, 1);
        let model = ModelState::new(small_model(), 0).unwrap();
        let obj = ObjectiveConfig::default();
        let a = self_critical_baseline(&model, &d[0], &obj).unwrap();
        let b = self_critical_baseline(&model, &d[0], &obj).unwrap();
        assert_eq!(a.0, b.0);
        let direct = training_loss(&model, &d[0], &obj, &a.1, false).unwrap().total;
        assert!((a.0 - direct).abs() < 1e-9);
    }

    #[test]
    fn zero_objective_leaves_parameters_unchanged() {
        let d = data(4, 2);
        let model = ModelState::new(small_model(), 0).unwrap();
        let config = TrainConfig {
            objective: ObjectiveConfig {
                lambda_pred: 0.0,
                lambda_logic: 0.0,
                lambda_cf: 0.0,
                lambda_spar: 0.0,
                alpha: 0.0,
                ..ObjectiveConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut trained = model.clone();
        let mut optim = Optimizers::new(&trained, &config);
        let batch: Vec<&PreparedScenario> = d.iter().collect();
        let m = train_step(&mut trained, &mut optim, &batch, &[1, 2, 3, 4], &config, 1.0, 1).unwrap();
        assert!(m.skipped.is_empty());
        assert_eq!(trained, model);
        assert_eq!(optim.policy.step, 1);
        assert_eq!(optim.theta.step, 1);
    }

    #[test]
    fn degenerate_scenarios_are_skipped_not_fatal() {
        let mut d = data(3, 3);
        d[1].negative = None;
        let mut model = ModelState::new(small_model(), 0).unwrap();
        let config = TrainConfig::default();
        let mut optim = Optimizers::new(&model, &config);
        let batch: Vec<&PreparedScenario> = d.iter().collect();
        let m = train_step(&mut model, &mut optim, &batch, &[1, 2, 3], &config, 1.0, 1).unwrap();
        assert_eq!(m.skipped, vec!["scenario=1:no_negative".to_string()]);
        assert!(m.loss_total.is_finite());
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_roundtrip() {
        let d = data(6, 4);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(ModelState::new(small_model(), 1).unwrap(), config.clone()).unwrap();
            let rows = t.fit(&d, |_, _| Ok(())).unwrap();
            (t, metrics_csv(&rows))
        };
        let (t1, csv1) = run();
        let (_, csv2) = run();
        assert_eq!(csv1, csv2);
        assert!(csv1.starts_with(METRICS_HEADER));
        assert_eq!(csv1.lines().count(), 1 + 4);

        let ck = t1.checkpoint(&small_model());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = back.trainer().unwrap();
        assert_eq!(restored.model, t1.model);
        assert_eq!(restored.optim, t1.optim);
        assert_eq!(restored.rng.cursor(), t1.rng.cursor());
        let (a, _) = self_critical_baseline(&t1.model, &d[0], &config.objective).unwrap();
        let (b, _) = self_critical_baseline(&restored.model, &d[0], &config.objective).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Checkpoint(_))
        ));
        let mut wrong = back.clone();
        wrong.version = 99;
        assert!(Checkpoint::from_bytes(&wrong.to_bytes().unwrap()).is_err());
        let mut missing = back;
        missing.tensors.remove("policy.stop_b");
        assert!(missing.model().is_err());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let d = data(4, 5);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut full = Trainer::new(ModelState::new(small_model(), 2).unwrap(), config.clone()).unwrap();
        let rows_full = full.fit(&d, |_, _| Ok(())).unwrap();
        let mut half = Trainer::new(ModelState::new(small_model(), 2).unwrap(), config.clone()).unwrap();
        let mut rows = half.run_epoch(&d).unwrap();
        let ck = Checkpoint::from_bytes(&half.checkpoint(&small_model()).to_bytes().unwrap()).unwrap();
        let mut resumed = ck.trainer().unwrap();
        rows.extend(resumed.fit(&d, |_, _| Ok(())).unwrap());
        assert_eq!(metrics_csv(&rows), metrics_csv(&rows_full));
        assert_eq!(resumed.model, full.model);
    }
}
