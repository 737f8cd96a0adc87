//! Analytic gradients of every training loss against central differences.

mod common;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use twinsync::agent::{critic_loss, irm_penalty, CostValueScale};

#[test]
fn reward_critic_gradient() {
    reward_critic_case(&[16, 16], 1, 64).unwrap();
}

#[test]
fn critic_gradient_at_table_width() {
    reward_critic_case(&[256, 256, 256], 5, 64).unwrap();
}

#[test]
fn twin_critic_uses_its_own_parameters() {
    let (nets, mut rng) = setup(3, &[8], 9);
    let b = batch(&mut rng, 8, 3);
    let targets = Array1::from_elem(8, -1.0);
    let (l1, _) = critic_loss(&nets.critic1, b.obs.view(), b.actions.view(), &targets).unwrap();
    let (l2, _) = critic_loss(&nets.critic2, b.obs.view(), b.actions.view(), &targets).unwrap();
    assert_ne!(l1, l2);
}

#[test]
fn cost_critic_gradient_every_scale() {
    for (k, scale) in [CostValueScale::Discounted, CostValueScale::Normalized, CostValueScale::Excess]
        .into_iter()
        .enumerate()
    {
        cost_critic_case(scale, 2 + k as u64, 64).unwrap();
    }
}

#[test]
fn actor_gradient_with_irm() {
    actor_case(&[16, 16], 3, 96).unwrap();
}

#[test]
fn actor_gradient_at_table_width() {
    actor_case(&[256, 256, 256], 4, 64).unwrap();
}

#[test]
fn multiplier_gradient() {
    multiplier_case(6, 64).unwrap();
}

#[test]
fn irm_penalty_partials() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = Array2::from_shape_fn((20, 3), |_| rng.random_range(-2.0..2.0));
    let actions = Array2::from_shape_fn((20, 3), |_| rng.random_range(0.0..1.0));
    let g = groups(20);
    let p = irm_penalty(&logits, &actions, &g, 0.4, 0.5);
    let value = |l: &Array2<f64>, a: &Array2<f64>| irm_penalty(l, a, &g, 0.4, 0.5).value;
    let close = |numeric: f64, analytic: f64, what: &str| {
        let scale = numeric.abs().max(analytic.abs());
        if scale > 1e-8 {
            assert!((numeric - analytic).abs() / scale < TOL, "{what}: {numeric} vs {analytic}");
        }
    };
    for k in 0..20 {
        for j in 0..3 {
            let (mut up, mut down) = (logits.clone(), logits.clone());
            up[[k, j]] += H;
            down[[k, j]] -= H;
            close((value(&up, &actions) - value(&down, &actions)) / (2.0 * H), p.d_logits[[k, j]], "logit");
            let (mut up, mut down) = (actions.clone(), actions.clone());
            up[[k, j]] += H;
            down[[k, j]] -= H;
            close((value(&logits, &up) - value(&logits, &down)) / (2.0 * H), p.d_actions[[k, j]], "action");
        }
    }
}
