//! Helpers shared by the integration suites and the acceptance binary.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twinsync::agent::{
    actor_loss, cost_critic_loss, critic_loss, multiplier_loss, AgentConfig, AgentNets, Batch, CostValueScale,
    IrmGroups,
};
use twinsync::approx::{Gradients, Mlp};

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn batch(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Batch {
    let obs_dim = 3 * n;
    let mut m = |r: usize, c: usize, lo: f64, hi: f64| Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi));
    let obs = m(rows, obs_dim, 0.0, 1.0);
    let next_obs = m(rows, obs_dim, 0.0, 1.0);
    let actions = m(rows, n, 0.0, 1.0).mapv(|x| (x > 0.5) as u8 as f64);
    let rewards = m(rows, 1, -1.0, 0.0).column(0).to_owned();
    let costs = m(rows, 1, 10.0, 14.0).column(0).to_owned();
    Batch {
        obs,
        actions,
        rewards,
        costs,
        next_obs,
    }
}

/// Standard logistic draws, the difference of two Gumbels.
pub fn noise(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, n), |_| {
        let u: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        (u / (1.0 - u)).ln()
    })
}

/// Largest relative error between `grads` and central differences of
/// `loss` over `probes` random parameters of the network selected by
/// `pick`. Parameters whose gradient is too small for the difference
/// quotient's round-off to resolve a `TOL` relative error are redrawn.
pub fn fd_check<F, P>(
    nets: &AgentNets,
    pick: P,
    grads: &Gradients,
    probes: usize,
    seed: u64,
    loss: F,
) -> Result<f64, String>
where
    F: Fn(&AgentNets) -> f64,
    P: Fn(&mut AgentNets) -> &mut Mlp,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe_nets = nets.clone();
    let count = pick(&mut probe_nets).num_params();
    let mut counted = 0;
    let mut worst = 0.0f64;
    for _ in 0..probes * 50 {
        let idx = rng.random_range(0..count);
        let orig = *pick(&mut probe_nets).param_mut(idx);
        *pick(&mut probe_nets).param_mut(idx) = orig + H;
        let up = loss(&probe_nets);
        *pick(&mut probe_nets).param_mut(idx) = orig - H;
        let down = loss(&probe_nets);
        *pick(&mut probe_nets).param_mut(idx) = orig;
        let numeric = (up - down) / (2.0 * H);
        let analytic = grads.get(idx);
        let roundoff = f64::EPSILON * up.abs().max(down.abs()).max(1.0) / H;
        let scale = analytic.abs().max(numeric.abs());
        if scale < roundoff / TOL {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        if rel >= TOL {
            return Err(format!("param {idx}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"));
        }
        worst = worst.max(rel);
        counted += 1;
        if counted == probes {
            return Ok(worst);
        }
    }
    Err(format!("only {counted} of {probes} probes had resolvable gradients"))
}

pub fn setup(n: usize, hidden: &[usize], seed: u64) -> (AgentNets, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = AgentNets::new(n, hidden, 0.3, &mut rng);
    // distinct targets so the bootstrap terms are not copies of the online nets
    let other = AgentNets::new(n, hidden, 0.3, &mut rng);
    nets.critic1_target = other.critic1;
    nets.critic2_target = other.critic2;
    nets.cost_critic_target = other.cost_critic;
    (nets, rng)
}

pub fn groups(rows: usize) -> IrmGroups {
    IrmGroups {
        rows: (0..rows).map(|k| if k % 5 == 4 { None } else { Some(k % 3) }).collect(),
        weights: vec![0.5, 0.3, 0.2],
    }
}

pub fn reward_critic_case(hidden: &[usize], seed: u64, probes: usize) -> Result<f64, String> {
    let (nets, mut rng) = setup(4, hidden, seed);
    let b = batch(&mut rng, 32, 4);
    let targets = Array1::from_shape_fn(32, |_| rng.random_range(-3.0..0.0));
    let (_, g) = critic_loss(&nets.critic1, b.obs.view(), b.actions.view(), &targets).unwrap();
    fd_check(&nets, |n| &mut n.critic1, &g, probes, seed + 10, |n| {
        critic_loss(&n.critic1, b.obs.view(), b.actions.view(), &targets).unwrap().0
    })
}

pub fn cost_critic_case(scale: CostValueScale, seed: u64, probes: usize) -> Result<f64, String> {
    let (nets, mut rng) = setup(4, &[16, 16], seed);
    let b = batch(&mut rng, 32, 4);
    let next = batch(&mut rng, 32, 4).actions;
    let cfg = AgentConfig {
        cost_scale: scale,
        ..AgentConfig::default()
    };
    let (_, g) = cost_critic_loss(&nets, &b, &next, 12.0, &cfg).unwrap();
    // targets come from the target network, so only the online critic moves
    fd_check(&nets, |n| &mut n.cost_critic, &g, probes, seed + 10, |n| {
        cost_critic_loss(n, &b, &next, 12.0, &cfg).unwrap().0
    })
}

pub fn actor_case(hidden: &[usize], seed: u64, probes: usize) -> Result<f64, String> {
    let n = 5;
    let (nets, mut rng) = setup(n, hidden, seed);
    let b = batch(&mut rng, 30, n);
    let eps = noise(&mut rng, 30, n);
    let g = groups(30);
    let f = |nets: &AgentNets| actor_loss(nets, b.obs.view(), &eps, 0.2, 0.7, 0.5, 1.2, Some(&g), 0.3).unwrap();
    let loss = f(&nets);
    fd_check(&nets, |n| &mut n.actor, &loss.grads, probes, seed + 10, |n| f(n).total)
}

pub fn multiplier_case(seed: u64, probes: usize) -> Result<f64, String> {
    let (nets, mut rng) = setup(4, &[16, 16], seed);
    let b = batch(&mut rng, 32, 4);
    let f = |n: &AgentNets| {
        multiplier_loss(&n.multiplier, &n.cost_critic, b.obs.view(), b.actions.view(), 0.1, 1.5).unwrap()
    };
    let (_, g) = f(&nets);
    fd_check(&nets, |n| &mut n.multiplier, &g, probes, seed + 10, |n| f(n).0)
}

/// Shannon rate written out independently of the crate.
pub fn shannon(b: f64, w: f64, p: f64, n0: f64, h: f64) -> f64 {
    b * w * (1.0 + p * h / (n0 * b * w)).ln() / std::f64::consts::LN_2
}

/// `1 - exp(-m N0 b W / (P h))` with `m` converted from dB.
pub fn waterfall_error(m_db: f64, b: f64, w: f64, p: f64, n0: f64, h: f64) -> f64 {
    let m = 10f64.powf(m_db / 10.0);
    -(-m * n0 * b * w / (p * h)).exp_m1()
}
