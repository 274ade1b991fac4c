//! Dense feed-forward network (tanh hidden layers, linear output) with exact
//! reverse-mode gradients, plus the optimizer used by every trainer.
//!
//! Parameters live in one flat vector. Layer `l` stores its `out × in`
//! weight matrix row-major, followed by its `out` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::gaussian;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] })
    }

    /// Weights `N(0, 1/fan_in)`, the output layer additionally scaled by
    /// `out_gain`; biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let layers = net.layers();
        let mut off = 0;
        for (l, (n_in, n_out)) in layers.into_iter().enumerate() {
            let gain = if l + 1 == sizes.len() - 1 { out_gain } else { 1.0 };
            let sd = gain / (n_in as f64).sqrt();
            for w in &mut net.params[off..off + n_in * n_out] {
                *w = sd * gaussian(rng);
            }
            off += n_in * n_out + n_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch { expected: net.params.len(), got: params.len() });
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> Vec<(usize, usize)> {
        self.sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch { expected: self.input_dim(), got: input.len() });
        }
        let mut x = input.to_vec();
        let n_layers = self.sizes.len() - 1;
        let mut off = 0;
        for (l, (n_in, n_out)) in self.layers().into_iter().enumerate() {
            let (w, b) = self.params[off..].split_at(n_in * n_out);
            let mut y: Vec<f64> = (0..n_out)
                .map(|r| b[r] + w[r * n_in..(r + 1) * n_in].iter().zip(&x).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
            off += n_in * n_out + n_out;
        }
        Ok(x)
    }

    /// Adds `∂L/∂θ` into `grad`, where `adjoint = ∂L/∂output` at `input`.
    pub fn accumulate_gradient(&self, adjoint: &[f64], input: &[f64], grad: &mut [f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch { expected: self.input_dim(), got: input.len() });
        }
        if adjoint.len() != self.output_dim() {
            return Err(Error::ShapeMismatch { expected: self.output_dim(), got: adjoint.len() });
        }
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch { expected: self.params.len(), got: grad.len() });
        }
        let layers = self.layers();
        let n_layers = layers.len();

        // Forward, keeping every layer's (post-activation) output.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for (l, &(n_in, n_out)) in layers.iter().enumerate() {
            offsets.push(off);
            let (w, b) = self.params[off..].split_at(n_in * n_out);
            let x = &acts[l];
            let mut y: Vec<f64> = (0..n_out)
                .map(|r| b[r] + w[r * n_in..(r + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
            off += n_in * n_out + n_out;
        }

        // Backward.
        let mut delta = adjoint.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = layers[l];
            let off = offsets[l];
            let x = &acts[l];
            for r in 0..n_out {
                let d = delta[r];
                if d != 0.0 {
                    let row = &mut grad[off + r * n_in..off + (r + 1) * n_in];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
                grad[off + n_in * n_out + r] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for (r, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        for (p, wi) in prev.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
                            *p += d * wi;
                        }
                    }
                }
                // tanh' = 1 - tanh².
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn gradient(&self, adjoint: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.len()];
        self.accumulate_gradient(adjoint, input, &mut g)?;
        Ok(g)
    }

    pub fn to_json(&self) -> NetJson {
        let mut layers = Vec::new();
        let mut off = 0;
        for (n_in, n_out) in self.layers() {
            layers.push(LayerJson {
                inputs: n_in,
                outputs: n_out,
                weights: self.params[off..off + n_in * n_out].to_vec(),
                bias: self.params[off + n_in * n_out..off + n_in * n_out + n_out].to_vec(),
            });
            off += n_in * n_out + n_out;
        }
        NetJson {
            sizes: self.sizes.clone(),
            hidden_activation: "tanh".into(),
            output_activation: "linear".into(),
            layers,
        }
    }

    pub fn from_json(doc: &NetJson) -> Result<Self> {
        if doc.hidden_activation != "tanh" || doc.output_activation != "linear" {
            return Err(Error::Serialization(format!(
                "unsupported activations {}/{}",
                doc.hidden_activation, doc.output_activation
            )));
        }
        let mut net = Self::zeros(&doc.sizes)?;
        if doc.layers.len() != doc.sizes.len() - 1 {
            return Err(Error::Serialization("layer count does not match sizes".into()));
        }
        let mut params = Vec::with_capacity(net.params.len());
        for (layer, (n_in, n_out)) in doc.layers.iter().zip(net.layers()) {
            if layer.inputs != n_in
                || layer.outputs != n_out
                || layer.weights.len() != n_in * n_out
                || layer.bias.len() != n_out
            {
                return Err(Error::Serialization(format!("layer shape mismatch, expected {n_in}->{n_out}")));
            }
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        net.params = params;
        Ok(net)
    }
}

/// Flat JSON form: architecture header plus row-major arrays per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetJson {
    pub sizes: Vec<usize>,
    pub hidden_activation: String,
    pub output_activation: String,
    pub layers: Vec<LayerJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerJson {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Adaptive moment estimation.
    Adam,
    /// Plain gradient step with rate `α / t`.
    InverseTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_schedule() -> Schedule {
    Schedule::Adam
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(3e-4)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self { lr, schedule: Schedule::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state. Steps *ascend*: pass `-∇loss` to minimise.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        Self { config, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch { expected: self.m.len(), got: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            log::warn!("skipping update: non-finite gradient");
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let c = self.config;
        match c.schedule {
            Schedule::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p += c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            }
            Schedule::InverseTime => {
                let rate = c.lr / self.step as f64;
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += rate * g;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    /// Independent forward pass with explicit nested loops over
    /// `(weights, bias)` pairs.
    fn reference_forward(sizes: &[usize], params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let mut y = vec![0.0; n_out];
            for (r, yr) in y.iter_mut().enumerate() {
                let mut acc = params[off + n_in * n_out + r];
                for c in 0..n_in {
                    acc += params[off + r * n_in + c] * x[c];
                }
                *yr = if l + 2 < sizes.len() { acc.tanh() } else { acc };
            }
            off += n_in * n_out + n_out;
            x = y;
        }
        x
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = stream(1, "nn", 0);
        let mut net = DenseNet::new(&[4, 8, 3], 1.0, &mut rng).unwrap();
        let n = net.num_params();
        // Last layer: 8*3 weights + 3 biases.
        net.params_mut()[n - 27..].iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(net.forward(&[0.3, -1.0, 2.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut params = vec![0.0; 12];
        params[0] = 1.0;
        params[4] = 1.0;
        params[8] = 1.0;
        let net = DenseNet::from_params(&[3, 3], params).unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = stream(2, "nn", 0);
        let sizes = [4, 64, 64, 3];
        let net = DenseNet::new(&sizes, 1.0, &mut rng).unwrap();
        let x = [0.2, -0.7, 1.3, 0.05];
        let got = net.forward(&x).unwrap();
        let want = reference_forward(&sizes, net.params(), &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-300));
        }
        assert!(matches!(net.forward(&[1.0]), Err(Error::ShapeMismatch { expected: 4, got: 1 })));
    }

    fn fd_check(sizes: &[usize], seed: u64) {
        let mut rng = stream(seed, "fd", 0);
        let mut net = DenseNet::new(sizes, 1.0, &mut rng).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * gaussian(&mut rng);
        }
        let x: Vec<f64> = (0..sizes[0]).map(|_| gaussian(&mut rng)).collect();
        let adj: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| gaussian(&mut rng)).collect();
        let loss = |n: &DenseNet| n.forward(&x).unwrap().iter().zip(&adj).map(|(o, a)| o * a).sum::<f64>();
        let g = net.gradient(&adj, &x).unwrap();
        let h = 1e-5;
        let n_check = 200.min(net.num_params());
        for k in 0..n_check {
            let idx = rand::Rng::random_range(&mut rng, 0..net.num_params());
            let orig = net.params()[idx];
            net.params_mut()[idx] = orig + h;
            let up = loss(&net);
            net.params_mut()[idx] = orig - h;
            let dn = loss(&net);
            net.params_mut()[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            let scale = fd.abs().max(g[idx].abs()).max(1e-6);
            assert!((fd - g[idx]).abs() / scale < 1e-4, "check {k}, param {idx}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check(&[4, 64, 64, 3], 3);
        fd_check(&[4, 64, 64, 1], 4);
        fd_check(&[2, 5, 1], 5);
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let mut rng = stream(6, "nn", 0);
        let net = DenseNet::new(&[4, 16, 3], 1.0, &mut rng).unwrap();
        let g = net.gradient(&[0.0; 3], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_least_squares_gradient() {
        // L = ½|Wx + b - y|²  ⇒  ∂L/∂W = (Wx+b-y) xᵀ, ∂L/∂b = Wx+b-y.
        let mut rng = stream(7, "nn", 0);
        let net = DenseNet::new(&[3, 2], 1.0, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0];
        let y = [0.1, 0.7];
        let out = net.forward(&x).unwrap();
        let resid: Vec<f64> = out.iter().zip(&y).map(|(o, t)| o - t).collect();
        let g = net.gradient(&resid, &x).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((g[r * 3 + c] - resid[r] * x[c]).abs() < 1e-14);
            }
            assert!((g[6 + r] - resid[r]).abs() < 1e-14);
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = stream(8, "nn", 0);
        let net = DenseNet::new(&[4, 6, 3], 0.5, &mut rng).unwrap();
        let text = serde_json::to_string(&net.to_json()).unwrap();
        let back = DenseNet::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, net);
        let mut bad = net.to_json();
        bad.layers[0].bias.pop();
        assert!(DenseNet::from_json(&bad).is_err());
    }

    #[test]
    fn optimizer_zero_gradient_is_noop() {
        let mut opt = OptimizerState::new(OptimizerConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn optimizer_ascends() {
        let g = [0.3, -2.0, 1e-3];
        for schedule in [Schedule::Adam, Schedule::InverseTime] {
            let cfg = OptimizerConfig { schedule, ..OptimizerConfig::adam(1e-2) };
            let mut opt = OptimizerState::new(cfg, 3);
            let mut p = vec![0.0; 3];
            for _ in 0..50 {
                opt.step(&mut p, &g).unwrap();
            }
            for (pi, gi) in p.iter().zip(&g) {
                assert_eq!(pi.signum(), gi.signum());
            }
        }
    }

    #[test]
    fn optimizer_rejects_non_finite() {
        let mut opt = OptimizerState::new(OptimizerConfig::default(), 2);
        let mut p = vec![1.0, 1.0];
        assert_eq!(opt.step(&mut p, &[f64::NAN, 0.0]), Err(Error::NonFiniteGradient));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn optimizer_finds_bowl_maximum() {
        // f(θ) = -Σ c_i (θ_i - m_i)², maximum at m.
        let m = [1.5, -0.3, 0.8];
        let c = [1.0, 4.0, 0.25];
        let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-2), 3);
        let mut p = vec![0.0; 3];
        for _ in 0..10_000 {
            let g: Vec<f64> = (0..3).map(|i| -2.0 * c[i] * (p[i] - m[i])).collect();
            opt.step(&mut p, &g).unwrap();
        }
        for i in 0..3 {
            assert!((p[i] - m[i]).abs() < 1e-4, "θ{i} = {}", p[i]);
        }
    }

    proptest! {
        #[test]
        fn forward_is_deterministic(seed in 0u64..1000, x in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let mut rng = stream(seed, "nn", 1);
            let net = DenseNet::new(&[4, 8, 8, 3], 1.0, &mut rng).unwrap();
            let a = net.forward(&x).unwrap();
            let b = net.clone().forward(&x).unwrap();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
