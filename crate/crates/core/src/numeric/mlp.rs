use serde::{Deserialize, Serialize};

use super::params::{join, Parameters};
use super::rng::SeededRng;
use super::tensor::Matrix;
use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => super::sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activated value `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// Two affine layers with an elementwise nonlinearity in between:
/// `out = W2 · act(W1 · x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

/// Activation record of one forward call.
#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl MlpCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Self {
            w1: Matrix::zeros(hidden, input),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(output, hidden),
            b2: vec![0.0; output],
            activation,
        }
    }

    /// Gaussian init scaled by `gain / sqrt(fan_in)`, zero biases.
    pub fn random(
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let s1 = gain / (input as f64).sqrt();
        let s2 = gain / (hidden as f64).sqrt();
        Self {
            w1: Matrix::from_fn(hidden, input, |_, _| s1 * rng.normal()),
            b1: vec![0.0; hidden],
            w2: Matrix::from_fn(output, hidden, |_, _| s2 * rng.normal()),
            b2: vec![0.0; output],
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w2.rows()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        check_len("mlp_forward input", self.input_width(), input.len())?;
        let mut hidden = self.w1.matvec(input);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h = self.activation.apply(*h + b);
        }
        let mut out = self.w2.matvec(&hidden);
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o += b;
        }
        if !super::all_finite(&out) {
            return Err(Error::NonFinite("mlp_forward output".into()));
        }
        Ok((
            out,
            MlpCache {
                input: input.to_vec(),
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward_into(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        grads: &mut Mlp,
    ) -> Result<Vec<f64>> {
        if cache.input.len() != self.input_width() || cache.hidden.len() != self.hidden_width() {
            return Err(Error::StaleCache("mlp cache does not match parameter shapes"));
        }
        check_len("mlp_backward upstream", self.output_width(), upstream.len())?;
        check_len("mlp_backward grads", self.num_params(), grads.num_params())?;
        grads.w2.add_outer(1.0, upstream, &cache.hidden);
        for (g, u) in grads.b2.iter_mut().zip(upstream) {
            *g += u;
        }
        let mut delta = self.w2.matvec_t(upstream);
        for (d, &h) in delta.iter_mut().zip(&cache.hidden) {
            *d *= self.activation.derivative_from_output(h);
        }
        grads.w1.add_outer(1.0, &delta, &cache.input);
        for (g, d) in grads.b1.iter_mut().zip(&delta) {
            *g += d;
        }
        Ok(self.w1.matvec_t(&delta))
    }

    /// Returns `(param_grads, input_grad)` for one upstream gradient.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let input_grad = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w1"), &self.w1.shape(), self.w1.data());
        f(&join(prefix, "b1"), &[self.b1.len()], &self.b1);
        f(&join(prefix, "w2"), &self.w2.shape(), self.w2.data());
        f(&join(prefix, "b2"), &[self.b2.len()], &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w1"), self.w1.data_mut());
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), self.w2.data_mut());
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, sigmoid};

    fn random_net(seed: u64) -> Mlp {
        let mut rng = SeededRng::new(seed);
        let mut net = Mlp::random(5, 7, 3, Activation::Tanh, 1.0, &mut rng);
        net.b1.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
        net.b2.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
        net
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(4, 8, 2, Activation::Tanh);
        let (out, _) = net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_unit_tanh_returns_bias_path() {
        let mut net = Mlp::zeros(1, 1, 1, Activation::Tanh);
        net.w1.set(0, 0, 2.0);
        net.b1[0] = 0.7;
        net.w2.set(0, 0, 1.5);
        net.b2[0] = -0.2;
        let (out, _) = net.forward(&[0.0]).unwrap();
        assert_eq!(out[0], 1.5 * 0.7f64.tanh() - 0.2);
    }

    #[test]
    fn forward_matches_scalar_recomputation() {
        let net = random_net(42);
        let x = [0.5, -1.0, 0.25, 2.0, -0.75];
        let (out, _) = net.forward(&x).unwrap();
        // straight-line recomputation
        let mut hidden = [0.0f64; 7];
        for (h, hv) in hidden.iter_mut().enumerate() {
            let mut acc = net.b1[h];
            for (i, xi) in x.iter().enumerate() {
                acc += net.w1.data()[h * 5 + i] * xi;
            }
            *hv = acc.tanh();
        }
        for (o, got) in out.iter().enumerate() {
            let mut acc = net.b2[o];
            for (h, hv) in hidden.iter().enumerate() {
                acc += net.w2.data()[o * 7 + h] * hv;
            }
            assert!((acc - got).abs() < 1e-14, "output {o}: {acc} vs {got}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = random_net(1);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
        let (_, cache) = Mlp::zeros(2, 2, 1, Activation::Tanh).forward(&[0.0, 0.0]).unwrap();
        assert!(matches!(
            net.backward(&cache, &[1.0, 1.0, 1.0]),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = random_net(3);
        let (_, cache) = net.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let (g, gi) = net.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
        assert!(gi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_weight_sigmoid_gradient_is_analytic() {
        let mut net = Mlp::zeros(1, 1, 1, Activation::Sigmoid);
        net.w1.set(0, 0, 0.8);
        net.w2.set(0, 0, 1.0);
        let x = 1.7;
        let (_, cache) = net.forward(&[x]).unwrap();
        let (g, _) = net.backward(&cache, &[1.0]).unwrap();
        let s = sigmoid(0.8 * x);
        assert!((g.w1.get(0, 0) - s * (1.0 - s) * x).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let net = random_net(seed);
            let mut rng = SeededRng::new(100 + seed);
            let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let u: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let (_, cache) = net.forward(&x).unwrap();
            let (g, gx) = net.backward(&cache, &u).unwrap();
            let loss = |n: &Mlp, x: &[f64]| {
                let (o, _) = n.forward(x).unwrap();
                crate::numeric::dot(&o, &u)
            };
            let p0 = net.flatten();
            let report = finite_diff_check(
                |p| {
                    let mut n = net.clone();
                    n.assign(p);
                    loss(&n, &x)
                },
                &p0,
                &g.flatten(),
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "seed {seed}: {report:?}");
            let rx = finite_diff_check(|xx| loss(&net, xx), &x, &gx, 1e-5).unwrap();
            assert!(rx.max_rel_error <= 1e-5, "seed {seed} input: {rx:?}");
        }
    }
}
