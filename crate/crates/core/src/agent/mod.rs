//! MTR-SAC scheduler: factorized-Bernoulli actor, twin reward critics, a
//! cost critic, a state-conditioned multiplier network and an entropy
//! temperature, trained from a multi-timescale replay buffer.

mod losses;
mod train;

pub use losses::{
    actor_loss, binary_entropy, cost_critic_loss, cost_targets, critic_loss, irm_penalty, log_prob, multiplier_loss,
    policy_entropy, relaxed_actions, reward_targets, ActorLoss, Batch, IrmGroups, IrmPenalty,
};
pub use train::{Agent, BudgetSchedule, EpisodeStats, TrainingReport, UpdateStats};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{sigmoid, Activation, Checkpoint, Mlp, OutputTransform};
use crate::env::{Action, Observation, FEATURES_PER_DEVICE};
use crate::error::{invalid, Result};
use crate::replay::MtrConfig;

/// How the cost critic's targets are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostValueScale {
    /// `c + gamma_C * Q'`: a discounted sum, fixed point `M / (1 - gamma_C)`
    /// for a constant cost `M`.
    Discounted,
    /// `(1 - gamma_C) * c + gamma_C * Q'`: a discounted average on the scale
    /// of a single slot's cost, fixed point `M`.
    Normalized,
    /// `(c - M) + gamma_C * Q'`: discounted RB overshoot, compared against 0.
    /// Same constraint as `Normalized` up to a positive factor, but a freshly
    /// initialized critic already sits at the feasible fixed point instead
    /// of spending ~1/((1 - gamma_C) rho) steps climbing towards `M`.
    Excess,
}

impl CostValueScale {
    /// One slot's contribution to the cost target.
    pub fn immediate(self, cost: f64, budget: f64, gamma_c: f64) -> f64 {
        match self {
            CostValueScale::Discounted => cost,
            CostValueScale::Normalized => (1.0 - gamma_c) * cost,
            CostValueScale::Excess => cost - budget,
        }
    }

    /// Value the cost critic is held below.
    pub fn threshold(self, budget: f64) -> f64 {
        match self {
            CostValueScale::Excess => 0.0,
            _ => budget,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub gamma_c: f64,
    pub alpha_init: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub lr_alpha: f64,
    pub lr_lambda: f64,
    /// Polyak rate for target networks.
    pub rho: f64,
    /// Actor and temperature update every `actor_every` gradient steps.
    pub actor_every: u64,
    /// Multiplier update every `lambda_every` gradient steps.
    pub lambda_every: u64,
    pub lambda_irm: f64,
    pub batch_size: usize,
    /// Relaxation temperature at the start and end of training (linear anneal).
    pub relax_temp: f64,
    pub relax_temp_final: f64,
    /// Entropy target; `None` means `0.4 * N * ln 2`.
    pub target_entropy: Option<f64>,
    pub hidden: Vec<usize>,
    /// Include `-alpha * log pi(a'|S')` in the reward critics' targets.
    pub soft_target: bool,
    pub cost_scale: CostValueScale,
    /// Allowance added to the constraint threshold. With costs floored at
    /// `M` the exact constraint is only ever met with equality, which leaves
    /// the multiplier nothing to settle on.
    pub cost_slack: f64,
    /// Recompute stored costs under the current budget when sampling.
    pub relabel_cost: bool,
    /// Multiplies rewards before they reach the critics.
    pub reward_scale: f64,
    pub buffer: MtrConfig,
    /// Environment steps before the first gradient step.
    pub warmup_steps: u64,
    /// One gradient step every `update_every` environment steps.
    pub update_every: u64,
    /// Initial softplus pre-activation bias of the multiplier output.
    pub lambda_init_bias: f64,
    /// Upper end of the multiplier's range; `None` leaves it unbounded.
    pub lambda_max: Option<f64>,
}

impl Default for AgentConfig {
    /// Table-scale settings: three hidden layers of 256 units, 5000-item
    /// four-stage buffer with promotion 0.8.
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gamma_c: 0.99,
            alpha_init: 0.05,
            lr_q: 3e-4,
            lr_pi: 3e-4,
            lr_alpha: 1e-5,
            lr_lambda: 1e-5,
            rho: 5e-3,
            actor_every: 2,
            lambda_every: 12,
            lambda_irm: 1e-2,
            batch_size: 256,
            relax_temp: 1.0,
            relax_temp_final: 0.5,
            target_entropy: None,
            hidden: vec![256, 256, 256],
            soft_target: true,
            cost_scale: CostValueScale::Excess,
            cost_slack: 0.0,
            relabel_cost: true,
            reward_scale: 1.0,
            buffer: MtrConfig::equal_split(4, 5000, 0.8),
            warmup_steps: 256,
            update_every: 1,
            lambda_init_bias: -2.0,
            lambda_max: None,
        }
    }
}

impl AgentConfig {
    /// The plain-SAC ablation: no IRM penalty and a single FIFO buffer of
    /// the same total size.
    pub fn without_mtr(&self) -> Self {
        Self {
            lambda_irm: 0.0,
            buffer: MtrConfig::fifo(self.buffer.total_cap),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.gamma) || !in_unit(self.gamma_c) {
            return Err(invalid("discounts must lie in (0, 1)"));
        }
        for (name, v) in [
            ("alpha_init", self.alpha_init),
            ("lr_q", self.lr_q),
            ("lr_pi", self.lr_pi),
            ("lr_alpha", self.lr_alpha),
            ("lr_lambda", self.lr_lambda),
            ("relax_temp", self.relax_temp),
            ("relax_temp_final", self.relax_temp_final),
            ("reward_scale", self.reward_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.cost_slack >= 0.0) || !self.cost_slack.is_finite() {
            return Err(invalid("cost_slack must be >= 0"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid("rho must lie in (0, 1]"));
        }
        if self.actor_every == 0 || self.lambda_every == 0 || self.update_every == 0 {
            return Err(invalid("update periods must be >= 1"));
        }
        if let Some(cap) = self.lambda_max {
            if !(cap > 0.0) {
                return Err(invalid("lambda_max must be positive"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        if !(self.lambda_irm >= 0.0) {
            return Err(invalid("lambda_irm must be >= 0"));
        }
        self.buffer.validate()
    }

    /// Value the cost critic is held below under budget `m`.
    pub fn constraint_threshold(&self, m: f64) -> f64 {
        self.cost_scale.threshold(m) + self.cost_slack
    }

    pub fn lambda_cap(&self) -> f64 {
        self.lambda_max.unwrap_or(f64::INFINITY)
    }

    pub fn target_entropy_for(&self, n_devices: usize) -> f64 {
        self.target_entropy
            .unwrap_or(0.4 * n_devices as f64 * std::f64::consts::LN_2)
    }
}

/// Online and target networks.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentNets {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub cost_critic: Mlp,
    pub multiplier: Mlp,
    pub actor_target: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    pub cost_critic_target: Mlp,
}

impl AgentNets {
    pub fn new<R: Rng + ?Sized>(n_devices: usize, hidden: &[usize], lambda_init_bias: f64, rng: &mut R) -> Self {
        let obs_dim = n_devices * FEATURES_PER_DEVICE;
        let sizes = |input: usize, output: usize| -> Vec<usize> {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(output);
            s
        };
        let actor = Mlp::new(&sizes(obs_dim, n_devices), Activation::Relu, OutputTransform::Logits, rng);
        let critic1 = Mlp::new(&sizes(obs_dim + n_devices, 1), Activation::Relu, OutputTransform::Identity, rng);
        let critic2 = Mlp::new(&sizes(obs_dim + n_devices, 1), Activation::Relu, OutputTransform::Identity, rng);
        let cost_critic = Mlp::new(&sizes(obs_dim + n_devices, 1), Activation::Relu, OutputTransform::Identity, rng);
        let mut multiplier = Mlp::new(&sizes(obs_dim, 1), Activation::Relu, OutputTransform::Softplus, rng);
        multiplier.biases.last_mut().expect("layers")[0] = lambda_init_bias;
        Self {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            cost_critic_target: cost_critic.clone(),
            actor,
            critic1,
            critic2,
            cost_critic,
            multiplier,
        }
    }

    pub fn n_devices(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn all(&self) -> [(&'static str, &Mlp); 9] {
        [
            ("actor", &self.actor),
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("cost_critic", &self.cost_critic),
            ("multiplier", &self.multiplier),
            ("actor_target", &self.actor_target),
            ("critic1_target", &self.critic1_target),
            ("critic2_target", &self.critic2_target),
            ("cost_critic_target", &self.cost_critic_target),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.all().iter().all(|(_, n)| n.is_finite())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, net) in self.all() {
            ck.insert(name, net);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            actor: ck.network("actor")?,
            critic1: ck.network("critic1")?,
            critic2: ck.network("critic2")?,
            cost_critic: ck.network("cost_critic")?,
            multiplier: ck.network("multiplier")?,
            actor_target: ck.network("actor_target")?,
            critic1_target: ck.network("critic1_target")?,
            critic2_target: ck.network("critic2_target")?,
            cost_critic_target: ck.network("cost_critic_target")?,
        })
    }

    pub fn logits(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.actor.forward_vec(&obs.features())
    }

    /// State-conditioned multiplier value.
    pub fn lambda(&self, obs: &Observation) -> Result<f64> {
        Ok(self.multiplier.forward_vec(&obs.features())?[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Draws or thresholds a scheduling vector from Bernoulli logits.
/// Greedy ties at probability 0.5 go to "idle".
pub fn action_from_logits<R: Rng + ?Sized>(logits: &[f64], mode: ActMode, rng: &mut R) -> Action {
    Action(
        logits
            .iter()
            .map(|&l| match mode {
                ActMode::Greedy => l > 0.0,
                ActMode::Sample => rng.random::<f64>() < sigmoid(l),
            })
            .collect(),
    )
}

pub fn act<R: Rng + ?Sized>(nets: &AgentNets, obs: &Observation, mode: ActMode, rng: &mut R) -> Result<Action> {
    Ok(action_from_logits(&nets.logits(obs)?, mode, rng))
}
