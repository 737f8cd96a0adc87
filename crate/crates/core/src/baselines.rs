//! Comparison schedulers: round-robin polling and fixed-interval
//! scheduling with periods chosen by a small dynamic program.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{act, ActMode, AgentNets};
use crate::env::{Action, Observation};
use crate::error::{invalid, Error, Result};
use crate::traces::DeviceProfile;

/// Common interface: one action per slot from the observation and budget.
pub trait Scheduler {
    fn name(&self) -> &str;

    fn schedule(&mut self, obs: &Observation, budget: u32) -> Result<Action>;

    /// Called before each episode.
    fn reset(&mut self) {}
}

/// Cyclic greedy: walk the devices from `pointer`, taking each one whose
/// RB cost still fits.
pub fn polling_schedule(profiles: &[DeviceProfile], budget: u32, pointer: usize) -> (Action, usize) {
    let n = profiles.len();
    let mut u = vec![false; n];
    if n == 0 {
        return (Action(u), 0);
    }
    // The pointer moves to the first device left out, so an expensive device
    // that misses a slot leads the next one instead of being starved by the
    // cheap devices that fill the remainder.
    let mut left = budget;
    let mut next = None;
    for k in 0..n {
        let i = (pointer + k) % n;
        let b = profiles[i].rb_cost_b;
        if b <= left {
            u[i] = true;
            left -= b;
        } else if next.is_none() && b <= budget {
            next = Some(i);
        }
    }
    (Action(u), next.unwrap_or(pointer % n))
}

#[derive(Clone, Debug)]
pub struct Polling {
    profiles: Vec<DeviceProfile>,
    pointer: usize,
}

impl Polling {
    pub fn new(profiles: Vec<DeviceProfile>) -> Self {
        Self { profiles, pointer: 0 }
    }
}

impl Scheduler for Polling {
    fn name(&self) -> &str {
        "polling"
    }

    fn schedule(&mut self, _obs: &Observation, budget: u32) -> Result<Action> {
        let (a, p) = polling_schedule(&self.profiles, budget, self.pointer);
        self.pointer = p;
        Ok(a)
    }

    fn reset(&mut self) {
        self.pointer = 0;
    }
}

/// Period assignment from [`fixed_interval_schedule`].
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalPlan {
    pub periods: Vec<usize>,
    /// `sum_n w_n * change_n * T_n / 2`.
    pub objective: f64,
    /// Average RBs per slot, `sum_n b_n / T_n`.
    pub consumption: f64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Linear-drift proxy of one device's mismatch at period `t`.
pub fn interval_cost(profile: &DeviceProfile, change: f64, t: usize) -> f64 {
    profile.priority_w * change * t as f64 / 2.0
}

/// Chooses `T_n` from `candidates` minimizing `sum_n w_n c_n T_n / 2`
/// subject to `sum_n b_n / T_n <= M`. Exact: budget is counted in units of
/// `1 / lcm(candidates)`. Ties go to the cheaper assignment.
pub fn fixed_interval_schedule(
    profiles: &[DeviceProfile],
    budget: u32,
    change_stats: &[f64],
    candidates: &[usize],
) -> Result<IntervalPlan> {
    if profiles.len() != change_stats.len() {
        return Err(Error::Dimension {
            expected: profiles.len(),
            got: change_stats.len(),
        });
    }
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(invalid("period candidates must be nonempty and positive"));
    }
    if change_stats.iter().any(|c| !(*c >= 0.0)) {
        return Err(invalid("change statistics must be >= 0"));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    let lcm = cands.iter().fold(1usize, |acc, &t| acc / gcd(acc, t) * t);
    let cap = budget as usize * lcm;
    let t_max = *cands.last().expect("nonempty");

    let min_use: usize = profiles.iter().map(|p| p.rb_cost_b as usize * lcm / t_max).sum();
    if min_use > cap {
        let binding: Vec<String> = profiles.iter().map(|p| p.id.to_string()).collect();
        return Err(Error::Infeasible(format!(
            "{:.3} RBs per slot needed at the longest period {t_max} exceeds M = {budget}; binding devices: {}",
            min_use as f64 / lcm as f64,
            binding.join(",")
        )));
    }

    // best[u] = (objective, choices) using exactly u budget units so far
    let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; cap + 1];
    best[0] = Some((0.0, Vec::new()));
    for (p, &c) in profiles.iter().zip(change_stats) {
        let mut next: Vec<Option<(f64, Vec<usize>)>> = vec![None; cap + 1];
        for (used, entry) in best.iter().enumerate() {
            let Some((obj, picks)) = entry else { continue };
            for &t in &cands {
                let u = used + p.rb_cost_b as usize * lcm / t;
                if u > cap {
                    continue;
                }
                let o = obj + interval_cost(p, c, t);
                if next[u].as_ref().is_none_or(|(bo, _)| o < *bo) {
                    let mut picks = picks.clone();
                    picks.push(t);
                    next[u] = Some((o, picks));
                }
            }
        }
        best = next;
    }
    // lowest objective; ties to lower consumption
    let (used, (objective, periods)) = best
        .into_iter()
        .enumerate()
        .filter_map(|(u, e)| e.map(|e| (u, e)))
        .min_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)))
        .expect("feasible checked");
    Ok(IntervalPlan {
        periods,
        objective,
        consumption: used as f64 / lcm as f64,
    })
}

/// Executes an [`IntervalPlan`]: device `n` is due when
/// `t mod T_n == n mod T_n`; if the due set exceeds the budget, devices are
/// taken by decreasing `w_n * change_n`, then lower index. A device that
/// misses its slot stays owed and goes ahead of the on-time ones next slot;
/// dropping it instead lets fixed offset collisions starve it indefinitely.
#[derive(Clone, Debug)]
pub struct FixedInterval {
    profiles: Vec<DeviceProfile>,
    plan: IntervalPlan,
    order: Vec<usize>,
    owed: Vec<bool>,
    slot: usize,
}

impl FixedInterval {
    pub fn new(profiles: Vec<DeviceProfile>, plan: IntervalPlan, change_stats: &[f64]) -> Result<Self> {
        if plan.periods.len() != profiles.len() || change_stats.len() != profiles.len() {
            return Err(Error::Dimension {
                expected: profiles.len(),
                got: plan.periods.len(),
            });
        }
        let mut order: Vec<usize> = (0..profiles.len()).collect();
        let key = |i: usize| profiles[i].priority_w * change_stats[i];
        order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        Ok(Self {
            owed: vec![false; profiles.len()],
            profiles,
            plan,
            order,
            slot: 0,
        })
    }

    pub fn plan(&self) -> &IntervalPlan {
        &self.plan
    }
}

impl Scheduler for FixedInterval {
    fn name(&self) -> &str {
        "dp"
    }

    fn schedule(&mut self, _obs: &Observation, budget: u32) -> Result<Action> {
        let t = self.slot;
        self.slot += 1;
        let mut u = vec![false; self.profiles.len()];
        let mut left = budget;
        for late in [true, false] {
            for &i in &self.order {
                let period = self.plan.periods[i];
                let due = if late { self.owed[i] } else { !self.owed[i] && t % period == i % period };
                if !due {
                    continue;
                }
                let b = self.profiles[i].rb_cost_b;
                if b <= left {
                    u[i] = true;
                    left -= b;
                }
                self.owed[i] = !u[i];
            }
        }
        Ok(Action(u))
    }

    fn reset(&mut self) {
        self.slot = 0;
        self.owed.fill(false);
    }
}

/// A trained policy behind the scheduler interface.
#[derive(Clone, Debug)]
pub struct PolicyScheduler {
    nets: AgentNets,
    mode: ActMode,
    rng: ChaCha8Rng,
}

impl PolicyScheduler {
    pub fn new(nets: AgentNets, mode: ActMode, seed: u64) -> Self {
        Self {
            nets,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Scheduler for PolicyScheduler {
    fn name(&self) -> &str {
        "crl"
    }

    fn schedule(&mut self, obs: &Observation, _budget: u32) -> Result<Action> {
        act(&self.nets, obs, self.mode, &mut self.rng)
    }
}
