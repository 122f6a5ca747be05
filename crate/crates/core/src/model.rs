//! Complete learnable state and its two parameter groups.
//!
//! φ (the policy) is trained by REINFORCE only. θ (verifier head, operator
//! embeddings, predictor) is trained by direct gradients of the auxiliary
//! objective; embedding gradients from the policy's operator logits are
//! added to θ's.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::event::OperatorCodebook;
use crate::generator::{PolicyConfig, PolicyParams};
use crate::numeric::{join, Parameters, SeededRng};
use crate::objectives::{Predictor, PredictorConfig};
use crate::verifier::{Verifier, VerifierConfig};
use crate::world::WorldConfig;

const INIT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Must equal the world's feature width.
    pub feature_width: usize,
    pub embedding_width: usize,
    /// Codebook size M (six named operators plus semantic padding).
    pub operators: usize,
    /// Embedding entries are drawn from N(0, scale²).
    pub embedding_scale: f64,
    /// Init gain of the policy's scoring heads.
    pub policy_gain: f64,
    pub verifier: VerifierConfig,
    pub policy: PolicyConfig,
    pub predictor: PredictorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_width: 16,
            embedding_width: 16,
            operators: 32,
            embedding_scale: 0.25,
            policy_gain: 0.1,
            verifier: VerifierConfig::default(),
            policy: PolicyConfig::default(),
            predictor: PredictorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0 || self.embedding_width == 0 {
            return Err(Error::Config("feature and embedding widths must be positive".into()));
        }
        if !(self.embedding_scale > 0.0) || !(self.policy_gain >= 0.0) {
            return Err(Error::Config("embedding_scale must be > 0 and policy_gain >= 0".into()));
        }
        if self.policy.max_len == 0 {
            return Err(Error::Config("policy.max_len must be >= 1".into()));
        }
        OperatorCodebook::standard_operators(self.operators).map(|_| ())
    }

    /// Rejects a world whose features the model cannot read.
    pub fn check_world(&self, world: &WorldConfig) -> Result<()> {
        if world.feature_width != self.feature_width {
            return Err(Error::Config(format!(
                "feature width mismatch: model expects d={}, world has d={}",
                self.feature_width, world.feature_width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub codebook: OperatorCodebook,
    pub verifier: Verifier,
    pub predictor: Predictor,
    pub policy: PolicyParams,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::with_stream(seed, INIT_STREAM);
        let (d, dz) = (config.feature_width, config.embedding_width);
        let codebook = OperatorCodebook::standard(config.operators, dz, config.embedding_scale, &mut rng)?;
        let verifier = Verifier::new(config.verifier, d, dz, &mut rng)?;
        let predictor = Predictor::random(config.predictor, d, dz, &mut rng);
        let policy = PolicyParams::random(config.policy, d, dz, config.policy_gain, &mut rng)?;
        Ok(Self {
            config,
            codebook,
            verifier,
            predictor,
            policy,
        })
    }

    pub fn theta_len(&self) -> usize {
        self.verifier.num_params() + self.codebook.num_params() + self.predictor.num_params()
    }

    /// θ in the order verifier head, embeddings, predictor.
    pub fn theta_flat(&self) -> Vec<f64> {
        let mut v = self.verifier.flatten();
        v.extend(self.codebook.flatten());
        v.extend(self.predictor.flatten());
        v
    }

    pub fn set_theta(&mut self, flat: &[f64]) -> Result<()> {
        check_len("theta", self.theta_len(), flat.len())?;
        let (a, rest) = flat.split_at(self.verifier.num_params());
        let (b, c) = rest.split_at(self.codebook.num_params());
        self.verifier.assign(a);
        self.codebook.assign(b);
        self.predictor.assign(c);
        Ok(())
    }
}

impl Parameters for ModelState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.codebook.visit(&join(prefix, "codebook"), f);
        self.verifier.visit(&join(prefix, "verifier"), f);
        self.predictor.visit(&join(prefix, "predictor"), f);
        self.policy.visit(&join(prefix, "policy"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.codebook.visit_mut(&join(prefix, "codebook"), f);
        self.verifier.visit_mut(&join(prefix, "verifier"), f);
        self.predictor.visit_mut(&join(prefix, "predictor"), f);
        self.policy.visit_mut(&join(prefix, "policy"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelState::new(ModelConfig::default(), 3).unwrap();
        let b = ModelState::new(ModelConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_ne!(a, ModelState::new(ModelConfig::default(), 4).unwrap());
    }

    #[test]
    fn theta_roundtrip() {
        let mut m = ModelState::new(ModelConfig::default(), 0).unwrap();
        let mut t = m.theta_flat();
        assert_eq!(t.len(), m.theta_len());
        t.iter_mut().for_each(|x| *x += 1.0);
        m.set_theta(&t).unwrap();
        assert_eq!(m.theta_flat(), t);
        assert!(m.set_theta(&t[1..]).is_err());
    }

    #[test]
    fn world_width_mismatch_is_a_config_error() {
        let cfg = ModelConfig::default();
        let world = WorldConfig {
            feature_width: 12,
            ..WorldConfig::default()
        };
        assert!(matches!(cfg.check_world(&world), Err(Error::Config(_))));
        assert!(cfg.check_world(&WorldConfig::default()).is_ok());
    }

    #[test]
    fn small_codebooks_are_rejected() {
        let cfg = ModelConfig {
            operators: 4,
            ..ModelConfig::default()
        };
        assert!(ModelState::new(cfg, 0).is_err());
    }
}
