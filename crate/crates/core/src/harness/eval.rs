//! Scheduler rollouts and the metrics reported for them.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Scheduler;
use crate::env::{nrmse, weighted_mismatch, TwinEnv};
use crate::error::{invalid, Error, Result};
use crate::traces::State;

/// Per-slot record of one episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub rewards: Vec<f64>,
    pub rb_used: Vec<u32>,
    pub mismatch: Vec<Vec<f64>>,
    /// `physical[n][t]`, `virtual_[n][t]`.
    pub physical: Vec<Vec<State>>,
    pub virtual_: Vec<Vec<State>>,
}

/// Drives `env` to the end of its traces with `scheduler`.
pub fn rollout<S: Scheduler + ?Sized, R: Rng + ?Sized>(env: &mut TwinEnv, scheduler: &mut S, rng: &mut R) -> Result<Rollout> {
    let n = env.num_devices();
    let budget = env.rb_budget();
    let mut out = Rollout {
        physical: vec![Vec::new(); n],
        virtual_: vec![Vec::new(); n],
        ..Default::default()
    };
    scheduler.reset();
    let mut obs = env.observation().clone();
    while let Some(step) = env.step(&scheduler.schedule(&obs, budget)?, rng)? {
        out.rewards.push(step.reward);
        out.rb_used.push(step.rb_used);
        for i in 0..n {
            out.physical[i].push(step.truth.physical[i]);
            out.virtual_[i].push(step.truth.virtual_[i]);
        }
        out.mismatch.push(step.truth.mismatch);
        obs = step.next_observation;
        if step.done {
            break;
        }
    }
    if out.rewards.is_empty() {
        return Err(invalid("rollout environment has no steps left"));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub weighted_mismatch: f64,
    /// Mean over devices of the per-device NRMSE.
    pub nrmse: f64,
    pub rb_mean: f64,
    pub rb_std: f64,
    pub violation_rate: f64,
    pub slots: usize,
}

/// Per-device NRMSE averaged uniformly; devices whose physical series is
/// constant over the window have no normalizer and are left out.
pub fn mean_nrmse(r: &Rollout) -> Result<f64> {
    let mut vals = Vec::new();
    for (p, v) in r.physical.iter().zip(&r.virtual_) {
        match nrmse(p, v) {
            Ok(x) => vals.push(x),
            Err(Error::UndefinedNormalizer(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(Error::UndefinedNormalizer("every device trace is constant".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn metrics(r: &Rollout, w: &[f64], budget: u32) -> Result<EvalMetrics> {
    let t = r.rb_used.len() as f64;
    let mean = r.rb_used.iter().map(|&x| x as f64).sum::<f64>() / t;
    let var = r.rb_used.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / t;
    Ok(EvalMetrics {
        weighted_mismatch: weighted_mismatch(&r.mismatch, w)?,
        nrmse: mean_nrmse(r)?,
        rb_mean: mean,
        rb_std: var.sqrt(),
        violation_rate: r.rb_used.iter().filter(|&&x| x > budget).count() as f64 / t,
        slots: r.rb_used.len(),
    })
}

/// Averages metrics over episodes, weighting each by its slot count.
pub fn pool(ms: &[EvalMetrics]) -> EvalMetrics {
    let total: usize = ms.iter().map(|m| m.slots).sum();
    if total == 0 {
        return EvalMetrics::default();
    }
    let avg = |f: fn(&EvalMetrics) -> f64| ms.iter().map(|m| f(m) * m.slots as f64).sum::<f64>() / total as f64;
    EvalMetrics {
        weighted_mismatch: avg(|m| m.weighted_mismatch),
        nrmse: avg(|m| m.nrmse),
        rb_mean: avg(|m| m.rb_mean),
        rb_std: avg(|m| m.rb_std),
        violation_rate: avg(|m| m.violation_rate),
        slots: total,
    }
}

/// Counts of per-slot RB consumption.
pub fn histogram(rb_used: &[u32]) -> BTreeMap<u32, usize> {
    let mut h = BTreeMap::new();
    for &x in rb_used {
        *h.entry(x).or_insert(0) += 1;
    }
    h
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
