//! The interaction and update loop.

use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{adam_update, polyak_blend, sigmoid, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::env::{cost, weighted_mismatch, Observation, TwinEnv};
use crate::error::{invalid, Error, Result};
use crate::replay::{Experience, MtrBuffer, Provenance};

use super::losses::{
    actor_loss, cost_critic_loss, critic_loss, multiplier_loss, policy_entropy, reward_targets, Batch, IrmGroups,
};
use super::{action_from_logits, ActMode, AgentConfig, AgentNets};

/// Budget changes as `(first episode, M)`, sorted by episode.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule(pub Vec<(usize, u32)>);

impl BudgetSchedule {
    pub fn constant(budget: u32) -> Self {
        Self(vec![(0, budget)])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&(first, _)) = self.0.first() {
            if first != 0 {
                return Err(invalid("budget schedule must start at episode 0"));
            }
        }
        if self.0.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(invalid("budget schedule episodes must be strictly increasing"));
        }
        if self.0.iter().any(|&(_, m)| m < 1) {
            return Err(invalid("scheduled budgets must be >= 1"));
        }
        Ok(())
    }

    /// Budget in force at `episode`; `None` for an empty schedule.
    pub fn budget_at(&self, episode: usize) -> Option<u32> {
        self.0.iter().take_while(|&&(e, _)| e <= episode).last().map(|&(_, m)| m)
    }

    /// Episodes at which the budget changes (excluding the start).
    pub fn change_episodes(&self) -> Vec<usize> {
        self.0.iter().skip(1).map(|&(e, _)| e).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub budget: u32,
    pub slots: usize,
    pub mean_reward: f64,
    pub mean_cost: f64,
    /// Fraction of slots with `b^T u > M`.
    pub violation_rate: f64,
    pub weighted_mismatch: f64,
    pub mean_rb: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub episodes: Vec<EpisodeStats>,
    pub budget_changes: Vec<usize>,
    pub grad_steps: u64,
}

impl TrainingReport {
    pub fn rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.mean_reward).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows of `episode,variant,seed,reward,cost,violation_rate,weighted_mismatch`.
    pub fn write_csv<W: Write>(&self, writer: W, variant: &str, seed: u64, header: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if header {
            w.write_record([
                "episode",
                "variant",
                "seed",
                "reward",
                "cost",
                "violation_rate",
                "weighted_mismatch",
            ])?;
        }
        for e in &self.episodes {
            w.write_record([
                e.episode.to_string(),
                variant.to_string(),
                seed.to_string(),
                e.mean_reward.to_string(),
                e.mean_cost.to_string(),
                e.violation_rate.to_string(),
                e.weighted_mismatch.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Losses of one gradient step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic1: f64,
    pub critic2: f64,
    pub cost_critic: f64,
    pub actor: Option<f64>,
    pub irm: Option<f64>,
    pub entropy: Option<f64>,
    pub multiplier: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
    lr: f64,
}

impl ScalarAdam {
    fn new(lr: f64) -> Self {
        Self { m: 0.0, v: 0.0, t: 0, lr }
    }

    fn step(&mut self, p: &mut f64, g: f64) {
        self.t += 1;
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * g;
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * g * g;
        let mhat = self.m / (1.0 - ADAM_BETA1.powi(self.t));
        let vhat = self.v / (1.0 - ADAM_BETA2.powi(self.t));
        *p -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

#[derive(Clone, Debug)]
struct Optimizers {
    actor: Adam,
    critic1: Adam,
    critic2: Adam,
    cost_critic: Adam,
    multiplier: Adam,
    log_alpha: ScalarAdam,
}

/// Owns networks, optimizers, replay and the training RNG.
#[derive(Clone, Debug)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub nets: AgentNets,
    opt: Optimizers,
    log_alpha: f64,
    buffer: MtrBuffer<Experience>,
    rng: ChaCha8Rng,
    grad_steps: u64,
    env_steps: u64,
    /// Position in the relaxation-temperature anneal, in `[0, 1]`.
    progress: f64,
    diagnostic_dir: Option<PathBuf>,
}

fn logistic_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
        u.ln() - (-u).ln_1p()
    })
}

impl Agent {
    pub fn new(n_devices: usize, cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_devices == 0 {
            return Err(invalid("agent needs at least one device"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = AgentNets::new(n_devices, &cfg.hidden, cfg.lambda_init_bias, &mut rng);
        let opt = Optimizers {
            actor: Adam::new(&nets.actor, cfg.lr_pi),
            critic1: Adam::new(&nets.critic1, cfg.lr_q),
            critic2: Adam::new(&nets.critic2, cfg.lr_q),
            cost_critic: Adam::new(&nets.cost_critic, cfg.lr_q),
            multiplier: Adam::new(&nets.multiplier, cfg.lr_lambda),
            log_alpha: ScalarAdam::new(cfg.lr_alpha),
        };
        Ok(Self {
            log_alpha: cfg.alpha_init.ln(),
            buffer: MtrBuffer::new(cfg.buffer.clone())?,
            cfg,
            nets,
            opt,
            rng,
            grad_steps: 0,
            env_steps: 0,
            progress: 0.0,
            diagnostic_dir: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn buffer(&self) -> &MtrBuffer<Experience> {
        &self.buffer
    }

    /// Where a checkpoint is written if training hits a non-finite value.
    /// Defaults to the system temp directory.
    pub fn set_diagnostic_dir(&mut self, dir: impl Into<PathBuf>) {
        self.diagnostic_dir = Some(dir.into());
    }

    pub fn relax_temp(&self) -> f64 {
        self.cfg.relax_temp + (self.cfg.relax_temp_final - self.cfg.relax_temp) * self.progress
    }

    pub fn act(&mut self, obs: &Observation, mode: ActMode) -> Result<crate::env::Action> {
        let logits = self.nets.logits(obs)?;
        Ok(action_from_logits(&logits, mode, &mut self.rng))
    }

    fn hard_sample(&mut self, logits: &Array2<f64>) -> Array2<f64> {
        let rng = &mut self.rng;
        logits.mapv(|l| if rng.random::<f64>() < sigmoid(l) { 1.0 } else { 0.0 })
    }

    fn sample_batch(&mut self, budget: u32) -> Result<(Batch, IrmGroups)> {
        let bs = self.cfg.batch_size;
        let n = self.nets.n_devices();
        let obs_dim = self.nets.actor.input_dim();
        let drawn = self.buffer.sample_batch(bs, &mut self.rng)?;
        let mut obs = Array2::zeros((bs, obs_dim));
        let mut next_obs = Array2::zeros((bs, obs_dim));
        let mut actions = Array2::zeros((bs, n));
        let mut rewards = Array1::zeros(bs);
        let mut costs = Array1::zeros(bs);
        let mut rows = Vec::with_capacity(bs);
        for (k, (prov, e)) in drawn.iter().enumerate() {
            obs.row_mut(k).assign(&ndarray::ArrayView1::from(&e.obs[..]));
            next_obs.row_mut(k).assign(&ndarray::ArrayView1::from(&e.next_obs[..]));
            actions.row_mut(k).assign(&ndarray::ArrayView1::from(&e.action[..]));
            rewards[k] = e.reward;
            costs[k] = if self.cfg.relabel_cost { cost(e.rb_used, budget) } else { e.cost };
            rows.push(match prov {
                Provenance::Sub(i) => Some(*i),
                Provenance::Overflow => None,
            });
        }
        let total = self.buffer.len() as f64;
        let weights = self.buffer.sub_lens().iter().map(|&l| l as f64 / total).collect();
        Ok((
            Batch {
                obs,
                actions,
                rewards,
                costs,
                next_obs,
            },
            IrmGroups { rows, weights },
        ))
    }

    /// One gradient step against budget `budget`.
    pub fn update(&mut self, budget: u32) -> Result<UpdateStats> {
        let result = self.update_inner(budget);
        if let Err(Error::NonFinite(what)) = &result {
            let path = self.write_diagnostic()?;
            return Err(Error::NonFinite(format!(
                "{what} at gradient step {}; diagnostic checkpoint at {}",
                self.grad_steps,
                path.display()
            )));
        }
        result
    }

    fn write_diagnostic(&self) -> Result<PathBuf> {
        let dir = self.diagnostic_dir.clone().unwrap_or_else(std::env::temp_dir);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("twinsync-diagnostic-{}.json", self.grad_steps));
        let mut ck = self.nets.to_checkpoint();
        ck.scalars.insert("log_alpha".into(), self.log_alpha);
        ck.scalars.insert("grad_steps".into(), self.grad_steps as f64);
        ck.save(&path)?;
        Ok(path)
    }

    fn update_inner(&mut self, budget: u32) -> Result<UpdateStats> {
        let (batch, groups) = self.sample_batch(budget)?;
        let alpha = self.alpha();
        let m = budget as f64;
        let mut stats = UpdateStats::default();

        let next_logits = self.nets.actor.forward(batch.next_obs.view())?;
        let next_actions = self.hard_sample(&next_logits);
        let (y1, y2) = reward_targets(&self.nets, &batch, &next_actions, alpha, &self.cfg)?;
        let (l1, g1) = critic_loss(&self.nets.critic1, batch.obs.view(), batch.actions.view(), &y1)?;
        let (l2, g2) = critic_loss(&self.nets.critic2, batch.obs.view(), batch.actions.view(), &y2)?;
        let (lc, gc) = cost_critic_loss(&self.nets, &batch, &next_actions, m, &self.cfg)?;
        let threshold = self.cfg.constraint_threshold(m);
        for (name, v) in [("critic loss", l1), ("critic loss", l2), ("cost critic loss", lc)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        adam_update(&mut self.nets.critic1, &g1, &mut self.opt.critic1)?;
        adam_update(&mut self.nets.critic2, &g2, &mut self.opt.critic2)?;
        adam_update(&mut self.nets.cost_critic, &gc, &mut self.opt.cost_critic)?;
        stats.critic1 = l1;
        stats.critic2 = l2;
        stats.cost_critic = lc;
        self.grad_steps += 1;

        if self.grad_steps % self.cfg.actor_every == 0 {
            let n = self.nets.n_devices();
            let noise = logistic_noise(batch.len(), n, &mut self.rng);
            let use_irm = self.cfg.lambda_irm > 0.0;
            let loss = actor_loss(
                &self.nets,
                batch.obs.view(),
                &noise,
                alpha,
                self.relax_temp(),
                threshold,
                self.cfg.lambda_cap(),
                use_irm.then_some(&groups),
                self.cfg.lambda_irm,
            )?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("actor loss".into()));
            }
            adam_update(&mut self.nets.actor, &loss.grads, &mut self.opt.actor)?;
            let entropy = policy_entropy(&loss.logits);
            // dJ/d(log alpha) = alpha * (H - H_target): alpha grows when the
            // policy is less random than the target.
            let target = self.cfg.target_entropy_for(n);
            let g = alpha * (entropy - target);
            if !g.is_finite() {
                return Err(Error::NonFinite("temperature gradient".into()));
            }
            self.opt.log_alpha.step(&mut self.log_alpha, g);
            stats.actor = Some(loss.sac);
            stats.irm = Some(loss.irm);
            stats.entropy = Some(entropy);
        }

        if self.grad_steps % self.cfg.lambda_every == 0 {
            let logits = self.nets.actor.forward(batch.obs.view())?;
            let actions = self.hard_sample(&logits);
            let (j, mut g) = multiplier_loss(
                &self.nets.multiplier,
                &self.nets.cost_critic,
                batch.obs.view(),
                actions.view(),
                threshold,
                self.cfg.lambda_cap(),
            )?;
            if !j.is_finite() {
                return Err(Error::NonFinite("multiplier objective".into()));
            }
            // ascent
            g.scale(-1.0);
            adam_update(&mut self.nets.multiplier, &g, &mut self.opt.multiplier)?;
            stats.multiplier = Some(j);
        }

        let rho = self.cfg.rho;
        polyak_blend(&mut self.nets.critic1_target, &self.nets.critic1, rho)?;
        polyak_blend(&mut self.nets.critic2_target, &self.nets.critic2, rho)?;
        polyak_blend(&mut self.nets.cost_critic_target, &self.nets.cost_critic, rho)?;
        polyak_blend(&mut self.nets.actor_target, &self.nets.actor, rho)?;
        if !self.nets.is_finite() {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(stats)
    }

    /// Runs one training episode in `env` under `budget`.
    pub fn run_episode(&mut self, env: &mut TwinEnv, budget: u32, episode: usize) -> Result<EpisodeStats> {
        env.set_rb_budget(budget)?;
        let w: Vec<f64> = env.profiles().iter().map(|p| p.priority_w).collect();
        let mut obs = env.observation().clone();
        let mut rewards = 0.0;
        let mut costs = 0.0;
        let mut violations = 0usize;
        let mut rbs = 0.0;
        let mut traj = Vec::new();
        loop {
            let action = self.act(&obs, ActMode::Sample)?;
            let Some(out) = env.step(&action, &mut self.rng)? else { break };
            self.buffer.push(
                Experience {
                    obs: obs.features(),
                    action: action.as_f64(),
                    reward: out.reward,
                    cost: out.cost,
                    next_obs: out.next_observation.features(),
                    rb_used: out.rb_used,
                    born_step: self.env_steps,
                },
                &mut self.rng,
            );
            self.env_steps += 1;
            rewards += out.reward;
            costs += out.cost;
            rbs += out.rb_used as f64;
            violations += usize::from(out.rb_used > budget);
            traj.push(out.truth.mismatch);
            if self.env_steps >= self.cfg.warmup_steps && self.env_steps % self.cfg.update_every == 0 {
                self.update(budget)?;
            }
            obs = out.next_observation;
            if out.done {
                break;
            }
        }
        let t = traj.len();
        if t == 0 {
            return Err(invalid("episode environment has no steps left"));
        }
        Ok(EpisodeStats {
            episode,
            budget,
            slots: t,
            mean_reward: rewards / t as f64,
            mean_cost: costs / t as f64,
            violation_rate: violations as f64 / t as f64,
            weighted_mismatch: weighted_mismatch(&traj, &w)?,
            mean_rb: rbs / t as f64,
            alpha: self.alpha(),
        })
    }

    /// Trains for `episodes` episodes. `make_env(episode)` supplies a fresh
    /// environment per episode; the schedule's budget is applied to it.
    pub fn train<F>(&mut self, mut make_env: F, episodes: usize, schedule: &BudgetSchedule) -> Result<TrainingReport>
    where
        F: FnMut(usize) -> Result<TwinEnv>,
    {
        schedule.validate()?;
        let mut report = TrainingReport {
            budget_changes: schedule.change_episodes().into_iter().filter(|&e| e < episodes).collect(),
            ..Default::default()
        };
        for ep in 0..episodes {
            self.progress = if episodes > 1 { ep as f64 / (episodes - 1) as f64 } else { 1.0 };
            let mut env = make_env(ep)?;
            let budget = schedule.budget_at(ep).unwrap_or(env.rb_budget());
            if report.budget_changes.contains(&ep) {
                log::info!("episode {ep}: RB budget -> {budget}");
            }
            let stats = self.run_episode(&mut env, budget, ep)?;
            log::debug!(
                "episode {ep}: reward {:.5} cost {:.3} violations {:.3}",
                stats.mean_reward,
                stats.mean_cost,
                stats.violation_rate
            );
            report.episodes.push(stats);
        }
        report.grad_steps = self.grad_steps;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_lookup() {
        let s = BudgetSchedule(vec![(0, 30), (200, 10), (400, 26)]);
        s.validate().unwrap();
        assert_eq!(s.budget_at(0), Some(30));
        assert_eq!(s.budget_at(199), Some(30));
        assert_eq!(s.budget_at(200), Some(10));
        assert_eq!(s.budget_at(1000), Some(26));
        assert_eq!(s.change_episodes(), vec![200, 400]);
        assert!(BudgetSchedule(vec![(5, 3)]).validate().is_err());
        assert_eq!(BudgetSchedule::default().budget_at(3), None);
    }

    #[test]
    fn scalar_adam_moves_against_gradient() {
        let mut a = ScalarAdam::new(0.1);
        let mut p = 0.0;
        a.step(&mut p, 2.0);
        assert!((p + 0.1).abs() < 1e-6);
    }

    #[test]
    fn logistic_noise_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = logistic_noise(200, 50, &mut rng);
        let mean = g.mean().unwrap();
        // logistic variance pi^2/3
        assert!(mean.abs() < 4.0 * (std::f64::consts::PI.powi(2) / 3.0 / 1e4).sqrt());
    }
}
