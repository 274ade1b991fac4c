//! Controllers and their learning rules.
//!
//! Every learned controller shares [`GaussianPolicy`]. The actors differ only
//! in where the advantage comes from: the closed-form proportional-control
//! value ([`APAgent`]), or a learned critic ([`A2CAgent`], [`PPOAgent`]).
//!
//! Rewards fed to advantages are per-step costs scaled by `dt`, so that they
//! share units with the continuous-time value `V = B s² + C`.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::SeparationState;
use crate::neural::{DenseNet, NetJson, OptimizerConfig, OptimizerState};
use crate::rng::gaussian;
use crate::theory::{physicist_value, BaselineParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `-|a|² - β|s|²`.
pub fn reward(s: &SeparationState, a: &[f64], beta: f64) -> f64 {
    -a.iter().map(|x| x * x).sum::<f64>() - beta * s.norm_sq()
}

/// `a = φ s`.
pub fn prescribed_action(s: &SeparationState, phi: f64) -> Vec<f64> {
    s.as_slice().iter().map(|x| phi * x).collect()
}

/// `r + γ v_next - v_curr`; pass `v_next = 0` on the terminal step.
pub fn td_advantage(r: f64, v_next: f64, v_curr: f64, gamma: f64) -> f64 {
    r + gamma * v_next - v_curr
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrescribedController {
    pub phi: f64,
}

impl PrescribedController {
    pub fn new(phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::InvalidParameter(format!("phi must be > 0, got {phi}")));
        }
        Ok(Self { phi })
    }

    pub fn action(&self, s: &SeparationState) -> Vec<f64> {
        prescribed_action(s, self.phi)
    }
}

/// How a stochastic policy turns its distribution into an action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    /// Deterministic mean, used for evaluation.
    Mean,
}

/// Action drawn from a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    /// Clipped action applied to the environment.
    pub action: Vec<f64>,
    /// Unclipped draw; the log-probability refers to this.
    pub raw: Vec<f64>,
    pub log_prob: f64,
}

/// Diagonal Gaussian over the `d`-component control.
///
/// With observation scale `ℓ` the mean is `ℓ · net(s/ℓ, |s|/ℓ)` and the
/// standard deviation `ℓ · exp(log_std)`. `ℓ = 1` is the plain
/// parameterisation; other values only change units.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub actor: DenseNet,
    pub log_std: Vec<f64>,
    pub obs_scale: f64,
    pub a_max: f64,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_A_MAX: f64 = 20.0;
pub const DEFAULT_INIT_STD: f64 = 0.3;
/// Output-layer gain at initialisation; starts the actor near zero control.
pub const ACTOR_OUT_GAIN: f64 = 0.01;

/// `(s/ℓ, |s|/ℓ)`.
pub fn features(s: &SeparationState, obs_scale: f64) -> Vec<f64> {
    let mut f: Vec<f64> = s.as_slice().iter().map(|x| x / obs_scale).collect();
    f.push(s.norm() / obs_scale);
    f
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], obs_scale: f64, rng: &mut R) -> Result<Self> {
        if !(obs_scale > 0.0 && obs_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("obs_scale must be > 0, got {obs_scale}")));
        }
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Ok(Self {
            actor: DenseNet::new(&sizes, ACTOR_OUT_GAIN, rng)?,
            log_std: vec![DEFAULT_INIT_STD.ln(); dim],
            obs_scale,
            a_max: DEFAULT_A_MAX,
        })
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.actor.num_params() + self.log_std.len()
    }

    /// Actor weights followed by `log_std`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.actor.params().to_vec();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::ShapeMismatch { expected: self.num_params(), got: p.len() });
        }
        let n = self.actor.num_params();
        self.actor.params_mut().copy_from_slice(&p[..n]);
        self.log_std.copy_from_slice(&p[n..]);
        Ok(())
    }

    pub fn mean(&self, s: &SeparationState) -> Result<Vec<f64>> {
        if s.dim() != self.dim() {
            return Err(Error::ShapeMismatch { expected: self.dim(), got: s.dim() });
        }
        let out = self.actor.forward(&features(s, self.obs_scale))?;
        Ok(out.into_iter().map(|m| self.obs_scale * m).collect())
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| self.obs_scale * l.exp()).collect()
    }

    fn clip(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|x| x.clamp(-self.a_max, self.a_max)).collect()
    }

    pub fn log_prob(&self, s: &SeparationState, raw: &[f64]) -> Result<f64> {
        let mu = self.mean(s)?;
        Ok(self.log_prob_given_mean(&mu, raw))
    }

    fn log_prob_given_mean(&self, mu: &[f64], raw: &[f64]) -> f64 {
        let mut lp = 0.0;
        for ((x, m), ls) in raw.iter().zip(mu).zip(&self.log_std) {
            let sd = self.obs_scale * ls.exp();
            let z = (x - m) / sd;
            lp += -0.5 * z * z - sd.ln() - 0.5 * LN_2PI;
        }
        lp
    }

    pub fn act<R: Rng + ?Sized>(&self, s: &SeparationState, mode: ActionMode, rng: &mut R) -> Result<PolicySample> {
        let mu = self.mean(s)?;
        let raw = match mode {
            ActionMode::Mean => mu.clone(),
            ActionMode::Sample => mu
                .iter()
                .zip(self.std())
                .map(|(m, sd)| m + sd * gaussian(rng))
                .collect(),
        };
        let log_prob = self.log_prob_given_mean(&mu, &raw);
        Ok(PolicySample { action: self.clip(&raw), raw, log_prob })
    }

    /// Adds `weight · ∇ log π(raw | s)` into `grad` (layout of
    /// [`Self::flat_params`]).
    pub fn accumulate_log_prob_gradient(
        &self,
        s: &SeparationState,
        raw: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != self.num_params() {
            return Err(Error::ShapeMismatch { expected: self.num_params(), got: grad.len() });
        }
        if weight == 0.0 {
            return Ok(());
        }
        let mu = self.mean(s)?;
        let n = self.actor.num_params();
        let mut adjoint = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            let sd = self.obs_scale * self.log_std[i].exp();
            let z = (raw[i] - mu[i]) / sd;
            // ∂/∂μ = z/σ and μ = ℓ · net.
            adjoint[i] = weight * self.obs_scale * z / sd;
            grad[n + i] += weight * (z * z - 1.0);
        }
        self.actor
            .accumulate_gradient(&adjoint, &features(s, self.obs_scale), &mut grad[..n])
    }

    pub fn to_json(&self) -> PolicyJson {
        PolicyJson {
            actor: self.actor.to_json(),
            log_std: self.log_std.clone(),
            obs_scale: self.obs_scale,
            a_max: self.a_max,
        }
    }

    pub fn from_json(doc: &PolicyJson) -> Result<Self> {
        let actor = DenseNet::from_json(&doc.actor)?;
        if actor.output_dim() != doc.log_std.len() || actor.input_dim() != doc.log_std.len() + 1 {
            return Err(Error::Serialization("actor shape does not match log_std".into()));
        }
        Ok(Self { actor, log_std: doc.log_std.clone(), obs_scale: doc.obs_scale, a_max: doc.a_max })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyJson {
    pub actor: NetJson,
    pub log_std: Vec<f64>,
    pub obs_scale: f64,
    pub a_max: f64,
}

/// One transition as seen by a learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub state: SeparationState,
    pub next_state: SeparationState,
    /// Time of `state`.
    pub t: f64,
    pub raw_action: Vec<f64>,
    /// Log-probability under the policy that generated the sample.
    pub log_prob: f64,
    /// Reward already scaled by `dt`.
    pub reward: f64,
    pub terminal: bool,
}

/// Advantages from a value function of `(t, s)`.
pub fn advantages_from<F>(batch: &[Sample], gamma: f64, dt: f64, value: F) -> Result<Vec<f64>>
where
    F: Fn(f64, &SeparationState) -> Result<f64>,
{
    batch
        .iter()
        .map(|x| {
            let v = value(x.t, &x.state)?;
            let v_next = if x.terminal { 0.0 } else { value(x.t + dt, &x.next_state)? };
            Ok(td_advantage(x.reward, v_next, v, gamma))
        })
        .collect()
}

/// Physicist advantages `rΔ + γ V_φ(t+Δ, s') - V_φ(t, s)`.
pub fn physicist_advantages(batch: &[Sample], baseline: &BaselineParams, gamma: f64, dt: f64) -> Result<Vec<f64>> {
    advantages_from(batch, gamma, dt, |t, s| physicist_value(s.norm(), t.min(baseline.horizon), baseline))
}

/// Batch-mean of `w_k ∇ log π(a_k | s_k)`.
pub fn policy_gradient(policy: &GaussianPolicy, batch: &[Sample], weights: &[f64]) -> Result<Vec<f64>> {
    if batch.len() != weights.len() {
        return Err(Error::ShapeMismatch { expected: batch.len(), got: weights.len() });
    }
    let mut g = vec![0.0; policy.num_params()];
    for (x, &w) in batch.iter().zip(weights) {
        policy.accumulate_log_prob_gradient(&x.state, &x.raw_action, w, &mut g)?;
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

fn apply(policy: &mut GaussianPolicy, opt: &mut OptimizerState, grad: &[f64]) -> Result<()> {
    let mut p = policy.flat_params();
    opt.step(&mut p, grad)?;
    policy.set_flat_params(&p)
}

fn check_batch(batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::InsufficientSamples { needed: 1, got: 0 })
    } else {
        Ok(())
    }
}

/// Actor with the closed-form proportional-control value as its critic.
#[derive(Clone, Debug, PartialEq)]
pub struct APAgent {
    pub policy: GaussianPolicy,
    pub baseline: BaselineParams,
    pub opt: OptimizerState,
}

impl APAgent {
    pub fn new(policy: GaussianPolicy, baseline: BaselineParams, opt: OptimizerConfig) -> Result<Self> {
        baseline.validate()?;
        let opt = OptimizerState::new(opt, policy.num_params());
        Ok(Self { policy, baseline, opt })
    }
}

/// One ascent step on `Σ log π(a|s) A` with the given advantages.
pub fn ap_update(agent: &mut APAgent, batch: &[Sample], advantages: &[f64]) -> Result<()> {
    check_batch(batch)?;
    let g = policy_gradient(&agent.policy, batch, advantages)?;
    apply(&mut agent.policy, &mut agent.opt, &g)
}

/// `½ Σ (r + γ V_w(s') - V_w(s))²` descent with the target held fixed.
pub fn critic_gradient(critic: &DenseNet, batch: &[Sample], targets: &[f64], obs_scale: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; critic.num_params()];
    for (x, &y) in batch.iter().zip(targets) {
        let f = features(&x.state, obs_scale);
        let v = critic.forward(&f)?[0];
        // Ascent on -½(y - v)².
        critic.accumulate_gradient(&[y - v], &f, &mut g)?;
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

fn critic_value(critic: &DenseNet, s: &SeparationState, obs_scale: f64) -> Result<f64> {
    Ok(critic.forward(&features(s, obs_scale))?[0])
}

/// Learned value net with the policy's feature map.
pub fn new_critic<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Result<DenseNet> {
    let mut sizes = vec![dim + 1];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    DenseNet::new(&sizes, 1.0, rng)
}

/// `(V_w(s), V_w(s'))` for each sample, `0` for terminal successors.
pub fn critic_values(critic: &DenseNet, batch: &[Sample], obs_scale: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = Vec::with_capacity(batch.len());
    let mut v_next = Vec::with_capacity(batch.len());
    for x in batch {
        v.push(critic_value(critic, &x.state, obs_scale)?);
        v_next.push(if x.terminal { 0.0 } else { critic_value(critic, &x.next_state, obs_scale)? });
    }
    Ok((v, v_next))
}

#[derive(Clone, Debug, PartialEq)]
pub struct A2CAgent {
    pub policy: GaussianPolicy,
    pub critic: DenseNet,
    pub actor_opt: OptimizerState,
    pub critic_opt: OptimizerState,
}

impl A2CAgent {
    pub fn new(policy: GaussianPolicy, critic: DenseNet, actor: OptimizerConfig, critic_cfg: OptimizerConfig) -> Result<Self> {
        if critic.input_dim() != policy.dim() + 1 || critic.output_dim() != 1 {
            return Err(Error::ShapeMismatch { expected: policy.dim() + 1, got: critic.input_dim() });
        }
        let actor_opt = OptimizerState::new(actor, policy.num_params());
        let critic_opt = OptimizerState::new(critic_cfg, critic.num_params());
        Ok(Self { policy, critic, actor_opt, critic_opt })
    }
}

/// A2C step given precomputed `V(s)` and `V(s')`. Advantages and critic
/// targets come from the same values.
pub fn a2c_update_with_values(agent: &mut A2CAgent, batch: &[Sample], gamma: f64, v: &[f64], v_next: &[f64]) -> Result<()> {
    check_batch(batch)?;
    let targets: Vec<f64> = batch.iter().zip(v_next).map(|(x, vn)| x.reward + gamma * vn).collect();
    let adv: Vec<f64> = targets.iter().zip(v).map(|(y, v)| y - v).collect();
    let ga = policy_gradient(&agent.policy, batch, &adv)?;
    let gc = critic_gradient(&agent.critic, batch, &targets, agent.policy.obs_scale)?;
    apply(&mut agent.policy, &mut agent.actor_opt, &ga)?;
    agent.critic_opt.step(agent.critic.params_mut(), &gc)
}

pub fn a2c_update(agent: &mut A2CAgent, batch: &[Sample], gamma: f64) -> Result<()> {
    let (v, v_next) = critic_values(&agent.critic, batch, agent.policy.obs_scale)?;
    a2c_update_with_values(agent, batch, gamma, &v, &v_next)
}

pub const DEFAULT_CLIP: f64 = 0.2;
pub const DEFAULT_PPO_EPOCHS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PPOAgent {
    pub policy: GaussianPolicy,
    pub critic: DenseNet,
    pub clip: f64,
    pub epochs: usize,
    pub actor_opt: OptimizerState,
    pub critic_opt: OptimizerState,
}

impl PPOAgent {
    pub fn new(
        policy: GaussianPolicy,
        critic: DenseNet,
        clip: f64,
        epochs: usize,
        actor: OptimizerConfig,
        critic_cfg: OptimizerConfig,
    ) -> Result<Self> {
        if !(clip > 0.0) || epochs == 0 {
            return Err(Error::InvalidParameter(format!("need clip > 0 and epochs >= 1, got {clip}, {epochs}")));
        }
        let a2c = A2CAgent::new(policy, critic, actor, critic_cfg)?;
        Ok(Self {
            policy: a2c.policy,
            critic: a2c.critic,
            clip,
            epochs,
            actor_opt: a2c.actor_opt,
            critic_opt: a2c.critic_opt,
        })
    }
}

/// Per-sample weight `∂/∂log π` of `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_weight(ratio: f64, adv: f64, clip: f64) -> f64 {
    if (adv > 0.0 && ratio > 1.0 + clip) || (adv < 0.0 && ratio < 1.0 - clip) {
        0.0
    } else {
        ratio * adv
    }
}

/// Clipped-surrogate ascent over `epochs` full-batch passes. Advantages and
/// critic targets are fixed from the critic before the first pass.
pub fn ppo_update(agent: &mut PPOAgent, batch: &[Sample], gamma: f64) -> Result<()> {
    check_batch(batch)?;
    let ell = agent.policy.obs_scale;
    let (v, v_next) = critic_values(&agent.critic, batch, ell)?;
    let targets: Vec<f64> = batch.iter().zip(&v_next).map(|(x, vn)| x.reward + gamma * vn).collect();
    let adv: Vec<f64> = targets.iter().zip(&v).map(|(y, v)| y - v).collect();
    for _ in 0..agent.epochs {
        let weights = batch
            .iter()
            .zip(&adv)
            .map(|(x, &a)| {
                let lp = agent.policy.log_prob(&x.state, &x.raw_action)?;
                Ok(clipped_weight((lp - x.log_prob).exp(), a, agent.clip))
            })
            .collect::<Result<Vec<f64>>>()?;
        let ga = policy_gradient(&agent.policy, batch, &weights)?;
        let gc = critic_gradient(&agent.critic, batch, &targets, ell)?;
        apply(&mut agent.policy, &mut agent.actor_opt, &ga)?;
        agent.critic_opt.step(agent.critic.params_mut(), &gc)?;
    }
    Ok(())
}

pub const DEFAULT_HYBRID_WINDOW: usize = 10;
pub const DEFAULT_HYBRID_THRESHOLD: f64 = 0.0;

/// AP actor that hands control to proportional control while its recent
/// physicist advantages average below a threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridController {
    pub ap: APAgent,
    pub fallback_phi: f64,
    pub window: usize,
    pub threshold: f64,
    recent: VecDeque<f64>,
}

impl HybridController {
    pub fn new(ap: APAgent, fallback_phi: f64, window: usize, threshold: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidParameter("hybrid window must be >= 1".into()));
        }
        PrescribedController::new(fallback_phi)?;
        Ok(Self { ap, fallback_phi, window, threshold, recent: VecDeque::with_capacity(window) })
    }

    pub fn record_advantage(&mut self, adv: f64) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(adv);
    }

    pub fn reset(&mut self) {
        self.recent.clear();
    }

    pub fn recent_mean(&self) -> Option<f64> {
        if self.recent.is_empty() {
            None
        } else {
            Some(self.recent.iter().sum::<f64>() / self.recent.len() as f64)
        }
    }

    /// An empty ring counts as no evidence against the actor.
    pub fn using_fallback(&self) -> bool {
        self.recent_mean().is_some_and(|m| m < self.threshold)
    }
}

pub fn hybrid_action<R: Rng + ?Sized>(
    ctrl: &HybridController,
    s: &SeparationState,
    mode: ActionMode,
    rng: &mut R,
) -> Result<PolicySample> {
    if ctrl.using_fallback() {
        let a = prescribed_action(s, ctrl.fallback_phi);
        Ok(PolicySample { action: a.clone(), raw: a, log_prob: 0.0 })
    } else {
        ctrl.ap.policy.act(s, mode, rng)
    }
}

/// Serialized agent: policy, critic where present, and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentCheckpoint {
    Ap { policy: PolicyJson, baseline: BaselineParams, optimizer: OptimizerConfig },
    A2c { policy: PolicyJson, critic: NetJson, actor_optimizer: OptimizerConfig, critic_optimizer: OptimizerConfig },
    Ppo {
        policy: PolicyJson,
        critic: NetJson,
        clip: f64,
        epochs: usize,
        actor_optimizer: OptimizerConfig,
        critic_optimizer: OptimizerConfig,
    },
}

impl From<&APAgent> for AgentCheckpoint {
    fn from(a: &APAgent) -> Self {
        AgentCheckpoint::Ap { policy: a.policy.to_json(), baseline: a.baseline, optimizer: a.opt.config }
    }
}

impl From<&A2CAgent> for AgentCheckpoint {
    fn from(a: &A2CAgent) -> Self {
        AgentCheckpoint::A2c {
            policy: a.policy.to_json(),
            critic: a.critic.to_json(),
            actor_optimizer: a.actor_opt.config,
            critic_optimizer: a.critic_opt.config,
        }
    }
}

impl From<&PPOAgent> for AgentCheckpoint {
    fn from(a: &PPOAgent) -> Self {
        AgentCheckpoint::Ppo {
            policy: a.policy.to_json(),
            critic: a.critic.to_json(),
            clip: a.clip,
            epochs: a.epochs,
            actor_optimizer: a.actor_opt.config,
            critic_optimizer: a.critic_opt.config,
        }
    }
}

impl AgentCheckpoint {
    /// Restores the policy (optimizer moments are not checkpointed).
    pub fn policy(&self) -> Result<GaussianPolicy> {
        match self {
            AgentCheckpoint::Ap { policy, .. }
            | AgentCheckpoint::A2c { policy, .. }
            | AgentCheckpoint::Ppo { policy, .. } => GaussianPolicy::from_json(policy),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::theory::integrate;
    use proptest::prelude::*;

    fn st(v: &[f64]) -> SeparationState {
        SeparationState::new(v).unwrap()
    }

    fn small_policy(seed: u64) -> GaussianPolicy {
        let mut rng = stream(seed, "policy", 0);
        GaussianPolicy::new(3, &[8, 8], 1.0, &mut rng).unwrap()
    }

    fn bk_baseline() -> BaselineParams {
        BaselineParams::new(0.574166, 0.4, 0.1, 0.1, 10.0, 1e-4, 3).unwrap()
    }

    fn random_batch(policy: &GaussianPolicy, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = stream(seed, "batch", 0);
        (0..n)
            .map(|k| {
                let s = st(&[gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)]);
                let s2 = s.scaled(0.9);
                let out = policy.act(&s, ActionMode::Sample, &mut rng).unwrap();
                Sample {
                    state: s,
                    next_state: s2,
                    t: k as f64 * 0.01,
                    raw_action: out.raw,
                    log_prob: out.log_prob,
                    reward: 0.01 * reward(&s, &out.action, 0.1),
                    terminal: k + 1 == n,
                }
            })
            .collect()
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&st(&[0.0; 3]), &[0.0; 3], 0.1), 0.0);
        assert!((reward(&st(&[1.0, 0.0, 0.0]), &[0.0; 3], 0.1) + 0.1).abs() < 1e-15);
        assert_eq!(reward(&st(&[0.0; 3]), &[1.0; 3], 0.1), -3.0);
    }

    #[test]
    fn prescribed_examples() {
        assert_eq!(prescribed_action(&st(&[0.0; 3]), 0.574166), vec![0.0; 3]);
        assert_eq!(prescribed_action(&st(&[1.0, 0.0, 0.0]), 0.574166), vec![0.574166, 0.0, 0.0]);
        let s = st(&[0.3, -0.2, 0.7]);
        let a = prescribed_action(&s, 0.9);
        let a2 = prescribed_action(&s.scaled(2.0), 0.9);
        for (x, y) in a.iter().zip(&a2) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
        assert!(PrescribedController::new(0.0).is_err());
    }

    #[test]
    fn td_advantage_examples() {
        assert_eq!(td_advantage(0.0, -2.5, -2.5, 1.0), 0.0);
        assert!((td_advantage(-0.1, -1.0, -1.0, 0.999) + 0.099).abs() < 1e-12);
    }

    #[test]
    fn exact_values_give_zero_advantage_on_a_chain() {
        // Deterministic chain 0 → 1 → 2 → end with rewards r.
        let (r, gamma) = ([-1.0, -0.5, -2.0], 0.9);
        let v2 = r[2];
        let v1 = r[1] + gamma * v2;
        let v0 = r[0] + gamma * v1;
        let v = [v0, v1, v2];
        for k in 0..3 {
            let next = if k == 2 { 0.0 } else { v[k + 1] };
            assert!(td_advantage(r[k], next, v[k], gamma).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_limit_returns_mean() {
        let mut p = small_policy(1);
        p.log_std = vec![-40.0; 3];
        let s = st(&[0.1, 0.2, -0.3]);
        let mut rng = stream(1, "x", 0);
        let out = p.act(&s, ActionMode::Sample, &mut rng).unwrap();
        let mu = p.mean(&s).unwrap();
        for (a, m) in out.action.iter().zip(&mu) {
            assert!((a - m).abs() < 1e-15);
        }
    }

    #[test]
    fn log_prob_at_mean_is_peak_density() {
        let p = small_policy(2);
        let s = st(&[0.5, 0.1, 0.0]);
        let mu = p.mean(&s).unwrap();
        let want: f64 = p.std().iter().map(|sd| -(sd * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        assert!((p.log_prob(&s, &mu).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn sample_moments_match_head() {
        let mut p = small_policy(3);
        p.log_std = vec![(0.3f64).ln(), (0.5f64).ln(), (0.1f64).ln()];
        let s = st(&[0.2, -0.4, 0.9]);
        let mu = p.mean(&s).unwrap();
        let sd = p.std();
        let n = 100_000;
        let mut rng = stream(3, "moments", 0);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let a = p.act(&s, ActionMode::Sample, &mut rng).unwrap().raw;
            for i in 0..3 {
                sum[i] += a[i];
                sq[i] += (a[i] - mu[i]).powi(2);
            }
        }
        for i in 0..3 {
            let m = sum[i] / n as f64;
            let var = sq[i] / n as f64;
            assert!((m - mu[i]).abs() < 3.0 * sd[i] / (n as f64).sqrt());
            // Var of the sample variance of a Gaussian is 2σ⁴/n.
            assert!((var - sd[i] * sd[i]).abs() < 3.0 * sd[i] * sd[i] * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn clipping_keeps_unclipped_log_prob() {
        let mut p = small_policy(4);
        p.a_max = 1e-3;
        let s = st(&[0.1, 0.1, 0.1]);
        let mut rng = stream(4, "clip", 0);
        let out = p.act(&s, ActionMode::Sample, &mut rng).unwrap();
        assert!(out.action.iter().all(|a| a.abs() <= 1e-3));
        assert_eq!(out.log_prob, p.log_prob(&s, &out.raw).unwrap());
    }

    #[test]
    fn gaussian_slices_integrate_to_one() {
        let p = small_policy(5);
        let s = st(&[0.3, 0.3, -0.1]);
        let mu = p.mean(&s).unwrap();
        let sd = p.std();
        // Fix components 1, 2 at the mean; the 1-d slice in component 0
        // integrates to the product of the other two peak densities.
        let peak: f64 = (1..3).map(|i| 1.0 / (sd[i] * (2.0 * std::f64::consts::PI).sqrt())).product();
        let f = |x: f64| (p.log_prob(&s, &[x, mu[1], mu[2]]).unwrap()).exp() / peak;
        let total = integrate(f, mu[0] - 12.0 * sd[0], mu[0] + 12.0 * sd[0], 1e-10);
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut p = small_policy(6);
        p.obs_scale = 0.3;
        let s = st(&[0.1, -0.2, 0.05]);
        let raw = vec![0.2, 0.1, -0.3];
        let mut g = vec![0.0; p.num_params()];
        p.accumulate_log_prob_gradient(&s, &raw, 1.0, &mut g).unwrap();
        let base = p.flat_params();
        let h = 1e-6;
        for idx in (0..base.len()).step_by(7).chain(base.len() - 3..base.len()) {
            let mut q = base.clone();
            q[idx] += h;
            p.set_flat_params(&q).unwrap();
            let up = p.log_prob(&s, &raw).unwrap();
            q[idx] -= 2.0 * h;
            p.set_flat_params(&q).unwrap();
            let dn = p.log_prob(&s, &raw).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn ap_zero_advantages_do_not_move_parameters() {
        let p = small_policy(7);
        let mut agent = APAgent::new(p.clone(), bk_baseline(), OptimizerConfig::default()).unwrap();
        let batch = random_batch(&p, 16, 7);
        ap_update(&mut agent, &batch, &[0.0; 16]).unwrap();
        assert_eq!(agent.policy, p);
    }

    #[test]
    fn ap_positive_advantage_raises_log_prob() {
        let p = small_policy(8);
        let batch = random_batch(&p, 1, 8);
        let before = p.log_prob(&batch[0].state, &batch[0].raw_action).unwrap();
        let mut agent = APAgent::new(p, bk_baseline(), OptimizerConfig::adam(1e-4)).unwrap();
        ap_update(&mut agent, &batch, &[1.0]).unwrap();
        let after = agent.policy.log_prob(&batch[0].state, &batch[0].raw_action).unwrap();
        assert!(after > before);
    }

    #[test]
    fn ap_opposite_advantages_cancel() {
        let p = small_policy(9);
        let one = random_batch(&p, 1, 9);
        let batch = vec![one[0].clone(), one[0].clone()];
        let g = policy_gradient(&p, &batch, &[0.7, -0.7]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let mut agent = APAgent::new(p.clone(), bk_baseline(), OptimizerConfig::default()).unwrap();
        ap_update(&mut agent, &batch, &[0.7, -0.7]).unwrap();
        assert_eq!(agent.policy, p);
    }

    #[test]
    fn ap_step_improves_objective_for_small_rates() {
        let p = small_policy(10);
        let batch = random_batch(&p, 32, 10);
        let adv = physicist_advantages(&batch, &bk_baseline(), 0.999, 0.01).unwrap();
        let objective = |q: &GaussianPolicy| -> f64 {
            batch.iter().zip(&adv).map(|(x, a)| q.log_prob(&x.state, &x.raw_action).unwrap() * a).sum()
        };
        let j0 = objective(&p);
        for lr in [1e-3, 1e-4, 1e-5] {
            let mut agent = APAgent::new(p.clone(), bk_baseline(), OptimizerConfig::adam(lr)).unwrap();
            ap_update(&mut agent, &batch, &adv).unwrap();
            assert!(objective(&agent.policy) > j0, "lr {lr}");
        }
    }

    #[test]
    fn physicist_advantage_uses_scaled_reward() {
        let base = bk_baseline();
        let s = st(&[0.1, 0.0, 0.0]);
        let x = Sample {
            state: s,
            next_state: s,
            t: 1.0,
            raw_action: vec![0.0; 3],
            log_prob: 0.0,
            reward: -0.01,
            terminal: false,
        };
        let a = physicist_advantages(&[x], &base, 0.999, 0.01).unwrap()[0];
        let v0 = physicist_value(0.1, 1.0, &base).unwrap();
        let v1 = physicist_value(0.1, 1.01, &base).unwrap();
        assert!((a - (-0.01 + 0.999 * v1 - v0)).abs() < 1e-15);
    }

    fn chain_batch() -> (Vec<Sample>, [f64; 3]) {
        let states = [st(&[0.5, 0.0, 0.0]), st(&[0.0, 0.5, 0.0]), st(&[0.0, 0.0, 0.5])];
        let r = [-0.3, -0.1, -0.6];
        let gamma = 0.9;
        let v2 = r[2];
        let v1 = r[1] + gamma * v2;
        let v0 = r[0] + gamma * v1;
        let batch = (0..3)
            .map(|k| Sample {
                state: states[k],
                next_state: states[(k + 1).min(2)],
                t: k as f64,
                raw_action: vec![0.0; 3],
                log_prob: 0.0,
                reward: r[k],
                terminal: k == 2,
            })
            .collect();
        (batch, [v0, v1, v2])
    }

    #[test]
    fn critic_learns_chain_values() {
        let (batch, v) = chain_batch();
        let mut rng = stream(11, "critic", 0);
        let mut critic = new_critic(3, &[16], &mut rng).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-2), critic.num_params());
        for _ in 0..3000 {
            let (_, v_next) = critic_values(&critic, &batch, 1.0).unwrap();
            let targets: Vec<f64> = batch.iter().zip(&v_next).map(|(x, vn)| x.reward + 0.9 * vn).collect();
            let g = critic_gradient(&critic, &batch, &targets, 1.0).unwrap();
            opt.step(critic.params_mut(), &g).unwrap();
        }
        let (got, _) = critic_values(&critic, &batch, 1.0).unwrap();
        for k in 0..3 {
            assert!((got[k] - v[k]).abs() < 1e-2, "state {k}: {} vs {}", got[k], v[k]);
        }
    }

    #[test]
    fn a2c_zero_rewards_zero_critic_do_not_move() {
        let p = small_policy(12);
        let mut rng = stream(12, "critic", 0);
        let mut critic = new_critic(3, &[8], &mut rng).unwrap();
        critic.params_mut().iter_mut().for_each(|w| *w = 0.0);
        let mut batch = random_batch(&p, 8, 12);
        batch.iter_mut().for_each(|x| x.reward = 0.0);
        let mut agent = A2CAgent::new(p.clone(), critic.clone(), OptimizerConfig::default(), OptimizerConfig::default()).unwrap();
        a2c_update(&mut agent, &batch, 0.97).unwrap();
        assert_eq!(agent.policy, p);
        assert_eq!(agent.critic, critic);
    }

    #[test]
    fn a2c_with_physicist_values_matches_ap_step() {
        let p = small_policy(13);
        let base = bk_baseline();
        let batch = random_batch(&p, 20, 13);
        let (gamma, dt) = (0.999, 0.01);
        let v: Vec<f64> = batch.iter().map(|x| physicist_value(x.state.norm(), x.t, &base).unwrap()).collect();
        let vn: Vec<f64> = batch
            .iter()
            .map(|x| if x.terminal { 0.0 } else { physicist_value(x.next_state.norm(), x.t + dt, &base).unwrap() })
            .collect();
        let mut rng = stream(13, "critic", 0);
        let critic = new_critic(3, &[8], &mut rng).unwrap();
        let mut a2c = A2CAgent::new(p.clone(), critic, OptimizerConfig::default(), OptimizerConfig::default()).unwrap();
        a2c_update_with_values(&mut a2c, &batch, gamma, &v, &vn).unwrap();
        let adv = physicist_advantages(&batch, &base, gamma, dt).unwrap();
        let mut ap = APAgent::new(p, base, OptimizerConfig::default()).unwrap();
        ap_update(&mut ap, &batch, &adv).unwrap();
        for (x, y) in a2c.policy.flat_params().iter().zip(ap.policy.flat_params()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn clipped_weight_regions() {
        assert_eq!(clipped_weight(1.0, 0.5, 0.2), 0.5);
        assert_eq!(clipped_weight(1.3, 0.5, 0.2), 0.0);
        assert_eq!(clipped_weight(1.3, -0.5, 0.2), -0.65);
        assert_eq!(clipped_weight(0.7, -0.5, 0.2), 0.0);
        assert_eq!(clipped_weight(0.7, 0.5, 0.2), 0.35);
    }

    #[test]
    fn ppo_at_unit_ratio_is_policy_gradient() {
        let p = small_policy(14);
        let batch = random_batch(&p, 12, 14);
        let adv: Vec<f64> = (0..12).map(|k| (k as f64 - 5.5) * 0.1).collect();
        let weights: Vec<f64> = batch
            .iter()
            .zip(&adv)
            .map(|(x, &a)| {
                let lp = p.log_prob(&x.state, &x.raw_action).unwrap();
                clipped_weight((lp - x.log_prob).exp(), a, 0.2)
            })
            .collect();
        let g1 = policy_gradient(&p, &batch, &weights).unwrap();
        let g2 = policy_gradient(&p, &batch, &adv).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn ppo_one_epoch_unclipped_equals_a2c() {
        let p = small_policy(15);
        let batch = random_batch(&p, 24, 15);
        let mut rng = stream(15, "critic", 0);
        let critic = new_critic(3, &[8], &mut rng).unwrap();
        let cfg = OptimizerConfig::default();
        let mut a2c = A2CAgent::new(p.clone(), critic.clone(), cfg, cfg).unwrap();
        let mut ppo = PPOAgent::new(p.clone(), critic, f64::INFINITY, 1, cfg, cfg).unwrap();
        a2c_update(&mut a2c, &batch, 0.99).unwrap();
        ppo_update(&mut ppo, &batch, 0.99).unwrap();
        let p0 = p.flat_params();
        let da: Vec<f64> = a2c.policy.flat_params().iter().zip(&p0).map(|(x, y)| x - y).collect();
        let dp: Vec<f64> = ppo.policy.flat_params().iter().zip(&p0).map(|(x, y)| x - y).collect();
        let num: f64 = da.iter().zip(&dp).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = da.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-6);
        assert_eq!(a2c.critic, ppo.critic);
    }

    #[test]
    fn ppo_rejects_bad_hyperparameters() {
        let p = small_policy(16);
        let mut rng = stream(16, "critic", 0);
        let critic = new_critic(3, &[8], &mut rng).unwrap();
        let cfg = OptimizerConfig::default();
        assert!(PPOAgent::new(p.clone(), critic.clone(), 0.0, 4, cfg, cfg).is_err());
        assert!(PPOAgent::new(p, critic, 0.2, 0, cfg, cfg).is_err());
    }

    fn hybrid(threshold: f64) -> HybridController {
        let ap = APAgent::new(small_policy(17), bk_baseline(), OptimizerConfig::default()).unwrap();
        HybridController::new(ap, 0.574166, DEFAULT_HYBRID_WINDOW, threshold).unwrap()
    }

    #[test]
    fn hybrid_empty_ring_uses_actor() {
        let h = hybrid(0.0);
        let s = st(&[0.2, 0.1, 0.0]);
        let mut r1 = stream(17, "h", 0);
        let mut r2 = stream(17, "h", 0);
        let a = hybrid_action(&h, &s, ActionMode::Sample, &mut r1).unwrap();
        let b = h.ap.policy.act(&s, ActionMode::Sample, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hybrid_switches_on_negative_advantages() {
        let mut h = hybrid(0.0);
        for _ in 0..20 {
            h.record_advantage(-5.0);
        }
        let s = st(&[0.2, 0.1, 0.0]);
        let mut rng = stream(18, "h", 0);
        assert_eq!(hybrid_action(&h, &s, ActionMode::Sample, &mut rng).unwrap().action, prescribed_action(&s, 0.574166));
        // The ring only remembers the last `window` entries.
        for _ in 0..DEFAULT_HYBRID_WINDOW {
            h.record_advantage(1.0);
        }
        assert!(!h.using_fallback());
    }

    #[test]
    fn hybrid_never_switches_at_minus_infinity() {
        let mut h = hybrid(f64::NEG_INFINITY);
        for _ in 0..20 {
            h.record_advantage(-1e300);
        }
        assert!(!h.using_fallback());
        assert!(HybridController::new(h.ap.clone(), 0.5, 0, 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = small_policy(19);
        let agent = APAgent::new(p.clone(), bk_baseline(), OptimizerConfig::default()).unwrap();
        let text = serde_json::to_string(&AgentCheckpoint::from(&agent)).unwrap();
        let back: AgentCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.policy().unwrap(), p);
        assert!(matches!(back, AgentCheckpoint::Ap { .. }));
    }

    proptest! {
        #[test]
        fn reward_is_non_positive(s in proptest::collection::vec(-10.0f64..10.0, 3),
                                  a in proptest::collection::vec(-10.0f64..10.0, 3),
                                  beta in 0.01f64..1.0) {
            let s = st(&s);
            let r = reward(&s, &a, beta);
            prop_assert!(r <= 0.0);
            prop_assert_eq!(r == 0.0, s.norm_sq() == 0.0 && a.iter().all(|x| *x == 0.0));
        }

        #[test]
        fn log_prob_is_finite(seed in 0u64..200, raw in proptest::collection::vec(-50.0f64..50.0, 3)) {
            let p = small_policy(seed);
            prop_assert!(p.log_prob(&st(&[0.1, 0.2, 0.3]), &raw).unwrap().is_finite());
        }
    }
}
