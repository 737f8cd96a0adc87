//! Losses and their analytic gradients.
//!
//! Every function here is deterministic given its inputs: sampled next
//! actions and relaxation noise are passed in, so each loss can be checked
//! against finite differences with the randomness held fixed.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::approx::{log_sigmoid, sigmoid, Gradients, Mlp};
use crate::error::Result;

use super::{AgentConfig, AgentNets};

/// A training minibatch in matrix form.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub costs: Array1<f64>,
    pub next_obs: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }
}

/// Sub-buffer membership of each batch row for the IRM penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct IrmGroups {
    /// Sub-buffer index per row; `None` for overflow items.
    pub rows: Vec<Option<usize>>,
    /// `|D_i| / |D_MTR|` per sub-buffer.
    pub weights: Vec<f64>,
}

fn critic_input(obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[obs, actions]).expect("row counts match")
}

fn scalar_column(out: Array2<f64>) -> Array1<f64> {
    out.column(0).to_owned()
}

/// `log pi(a|S)` of the factorized Bernoulli policy, extended linearly to
/// relaxed actions in `[0, 1]`.
pub fn log_prob(logits: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(logits.nrows());
    for ((k, n), &l) in logits.indexed_iter() {
        let a = actions[[k, n]];
        out[k] += a * log_sigmoid(l) + (1.0 - a) * log_sigmoid(-l);
    }
    out
}

pub fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    h(p) + h(1.0 - p)
}

/// Batch-mean of the summed per-device binary entropies.
pub fn policy_entropy(logits: &Array2<f64>) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().map(|&l| binary_entropy(sigmoid(l))).sum::<f64>() / logits.nrows() as f64
}

/// Binary-concrete relaxation `sigma((l + g) / temp)` with logistic noise `g`.
pub fn relaxed_actions(logits: &Array2<f64>, noise: &Array2<f64>, temp: f64) -> Array2<f64> {
    let mut out = logits.clone();
    out.zip_mut_with(noise, |l, &g| *l = sigmoid((*l + g) / temp));
    out
}

/// Reward-critic TD targets `scale*r + gamma*(Q'_i(S',a') - alpha*log pi(a'|S'))`
/// for each critic's own target network.
pub fn reward_targets(
    nets: &AgentNets,
    batch: &Batch,
    next_actions: &Array2<f64>,
    alpha: f64,
    cfg: &AgentConfig,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let x = critic_input(batch.next_obs.view(), next_actions.view());
    let q1 = scalar_column(nets.critic1_target.forward(x.view())?);
    let q2 = scalar_column(nets.critic2_target.forward(x.view())?);
    let entropy = if cfg.soft_target {
        let logits = nets.actor.forward(batch.next_obs.view())?;
        log_prob(&logits, next_actions) * alpha
    } else {
        Array1::zeros(batch.len())
    };
    let r = &batch.rewards * cfg.reward_scale;
    let y1 = &r + &((q1 - &entropy) * cfg.gamma);
    let y2 = &r + &((q2 - &entropy) * cfg.gamma);
    Ok((y1, y2))
}

/// Cost-critic TD targets.
pub fn cost_targets(
    nets: &AgentNets,
    batch: &Batch,
    next_actions: &Array2<f64>,
    budget: f64,
    cfg: &AgentConfig,
) -> Result<Array1<f64>> {
    let x = critic_input(batch.next_obs.view(), next_actions.view());
    let q = scalar_column(nets.cost_critic_target.forward(x.view())?);
    let c = batch.costs.mapv(|c| cfg.cost_scale.immediate(c, budget, cfg.gamma_c));
    Ok(c + q * cfg.gamma_c)
}

/// `mean 1/2 (Q(S,a) - y)^2` and its parameter gradient.
pub fn critic_loss(
    critic: &Mlp,
    obs: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    targets: &Array1<f64>,
) -> Result<(f64, Gradients)> {
    let b = obs.nrows() as f64;
    let x = critic_input(obs, actions);
    let (q, cache) = critic.forward_cached(x.view())?;
    let td = &q.column(0) - targets;
    let loss = 0.5 * td.iter().map(|d| d * d).sum::<f64>() / b;
    let upstream = (td / b).insert_axis(Axis(1));
    let (grads, _) = critic.backward(&cache, upstream.view())?;
    Ok((loss, grads))
}

/// Cost-critic loss; same form as [`critic_loss`] on cost targets.
pub fn cost_critic_loss(
    nets: &AgentNets,
    batch: &Batch,
    next_actions: &Array2<f64>,
    budget: f64,
    cfg: &AgentConfig,
) -> Result<(f64, Gradients)> {
    let y = cost_targets(nets, batch, next_actions, budget, cfg)?;
    critic_loss(&nets.cost_critic, batch.obs.view(), batch.actions.view(), &y)
}

/// IRM penalty and its partial derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct IrmPenalty {
    pub value: f64,
    /// With the actions held fixed.
    pub d_logits: Array2<f64>,
    pub d_actions: Array2<f64>,
}

/// IRM penalty with the dummy scale applied to the logits:
/// `g_i = mean_k alpha * sum_n l_kn (a_kn - sigma(l_kn))` per sub-buffer,
/// penalty `lambda_irm * sum_i w_i g_i^2`.
pub fn irm_penalty(
    logits: &Array2<f64>,
    actions: &Array2<f64>,
    groups: &IrmGroups,
    alpha: f64,
    lambda_irm: f64,
) -> IrmPenalty {
    let n_groups = groups.weights.len();
    let mut sums = vec![0.0; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (k, g) in groups.rows.iter().enumerate() {
        let Some(i) = *g else { continue };
        let row: f64 = logits
            .row(k)
            .iter()
            .zip(actions.row(k))
            .map(|(&l, &a)| l * (a - sigmoid(l)))
            .sum();
        sums[i] += alpha * row;
        counts[i] += 1;
    }
    let mut out = IrmPenalty {
        value: 0.0,
        d_logits: Array2::zeros(logits.raw_dim()),
        d_actions: Array2::zeros(logits.raw_dim()),
    };
    if counts.iter().all(|&c| c == 0) {
        log::warn!("IRM penalty: no rows from any sub-buffer in this batch");
        return out;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    out.value = lambda_irm
        * means
            .iter()
            .zip(&groups.weights)
            .zip(&counts)
            .filter(|(_, &c)| c > 0)
            .map(|((g, w), _)| w * g * g)
            .sum::<f64>();
    for (k, g) in groups.rows.iter().enumerate() {
        let Some(i) = *g else { continue };
        let coef = lambda_irm * groups.weights[i] * 2.0 * means[i] * alpha / counts[i] as f64;
        for n in 0..logits.ncols() {
            let l = logits[[k, n]];
            let a = actions[[k, n]];
            let sg = sigmoid(l);
            out.d_logits[[k, n]] = coef * ((a - sg) - l * sg * (1.0 - sg));
            out.d_actions[[k, n]] = coef * l;
        }
    }
    out
}

/// Result of [`actor_loss`].
#[derive(Clone, Debug)]
pub struct ActorLoss {
    /// SAC term plus IRM penalty.
    pub total: f64,
    pub sac: f64,
    pub irm: f64,
    pub grads: Gradients,
    pub logits: Array2<f64>,
    pub relaxed: Array2<f64>,
}

/// Actor objective
/// `mean[alpha log pi(a~|S) - min_i Q_i(S,a~) + lambda(S) (Q_C(S,a~) - threshold)]`
/// with `a~` the relaxed sample for `noise`, plus the IRM penalty when
/// `irm` is given. The multiplier is held constant and capped at
/// `lambda_max`.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    nets: &AgentNets,
    obs: ArrayView2<f64>,
    noise: &Array2<f64>,
    alpha: f64,
    temp: f64,
    threshold: f64,
    lambda_max: f64,
    irm: Option<&IrmGroups>,
    lambda_irm: f64,
) -> Result<ActorLoss> {
    let b = obs.nrows() as f64;
    let n = nets.n_devices();
    let obs_dim = obs.ncols();
    let (logits, actor_cache) = nets.actor.forward_cached(obs)?;
    let relaxed = relaxed_actions(&logits, noise, temp);
    let lambda = scalar_column(nets.multiplier.forward(obs)?).mapv(|l| l.min(lambda_max));

    let x = critic_input(obs, relaxed.view());
    let (q1, c1) = nets.critic1.forward_cached(x.view())?;
    let (q2, c2) = nets.critic2.forward_cached(x.view())?;
    let (qc, cc) = nets.cost_critic.forward_cached(x.view())?;
    let logp = log_prob(&logits, &relaxed);

    let rows = obs.nrows();
    let mut up1 = Array2::zeros((rows, 1));
    let mut up2 = Array2::zeros((rows, 1));
    let mut sac = 0.0;
    for k in 0..rows {
        let (a, bq) = (q1[[k, 0]], q2[[k, 0]]);
        let qmin = a.min(bq);
        if a <= bq {
            up1[[k, 0]] = -1.0 / b;
        } else {
            up2[[k, 0]] = -1.0 / b;
        }
        sac += alpha * logp[k] - qmin + lambda[k] * (qc[[k, 0]] - threshold);
    }
    sac /= b;
    let upc = (&lambda / b).insert_axis(Axis(1));

    let (_, g1) = nets.critic1.backward(&c1, up1.view())?;
    let (_, g2) = nets.critic2.backward(&c2, up2.view())?;
    let (_, gc) = nets.cost_critic.backward(&cc, upc.view())?;
    let mut d_action = g1.slice(s![.., obs_dim..]).to_owned();
    d_action += &g2.slice(s![.., obs_dim..]);
    d_action += &gc.slice(s![.., obs_dim..]);

    let mut d_logits = Array2::zeros((rows, n));
    for k in 0..rows {
        for j in 0..n {
            let l = logits[[k, j]];
            let at = relaxed[[k, j]];
            // d logp / d a~ = l ; d logp / d l (a~ fixed) = a~ - sigma(l)
            let da = d_action[[k, j]] + alpha * l / b;
            let direct = alpha * (at - sigmoid(l)) / b;
            d_logits[[k, j]] = direct + da * at * (1.0 - at) / temp;
        }
    }

    let mut irm_value = 0.0;
    if let Some(groups) = irm {
        // the penalty is evaluated at the relaxed sample, which moves with
        // the logits too
        let p = irm_penalty(&logits, &relaxed, groups, alpha, lambda_irm);
        irm_value = p.value;
        d_logits += &p.d_logits;
        d_logits += &(&p.d_actions * &relaxed.mapv(|a| a * (1.0 - a) / temp));
    }

    let (grads, _) = nets.actor.backward(&actor_cache, d_logits.view())?;
    Ok(ActorLoss {
        total: sac + irm_value,
        sac,
        irm: irm_value,
        grads,
        logits,
        relaxed,
    })
}

/// `J = mean min(lambda(S), lambda_max) (Q_C(S,a) - threshold)` and
/// dJ/dzeta. The caller ascends. A state whose multiplier sits at the cap
/// contributes no upward push, which keeps the ascent inside `[0, lambda_max]`.
pub fn multiplier_loss(
    multiplier: &Mlp,
    cost_critic: &Mlp,
    obs: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    threshold: f64,
    lambda_max: f64,
) -> Result<(f64, Gradients)> {
    let b = obs.nrows() as f64;
    let qc = scalar_column(cost_critic.forward(critic_input(obs, actions).view())?);
    let (lambda, cache) = multiplier.forward_cached(obs)?;
    let excess = qc - threshold;
    let j = lambda.column(0).iter().zip(&excess).map(|(l, e)| l.min(lambda_max) * e).sum::<f64>() / b;
    let upstream = Array1::from_iter(
        lambda
            .column(0)
            .iter()
            .zip(&excess)
            .map(|(&l, &e)| if l >= lambda_max { 0.0 } else { e / b }),
    )
    .insert_axis(Axis(1));
    let (grads, _) = multiplier.backward(&cache, upstream.view())?;
    Ok((j, grads))
}
