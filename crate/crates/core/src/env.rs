//! Twin environment: physical and virtual states, scheduling, mismatch,
//! the base station's observation, reward and RB cost.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelParams};
use crate::error::{invalid, Error, Result};
use crate::traces::{DeviceKind, DeviceProfile, PhysicalTrace, State};

/// Features per device in [`Observation::features`].
pub const FEATURES_PER_DEVICE: usize = 3;

/// Relative (just-noticeable-difference) mismatch for scalar sensors.
///
/// A zero twin value has no relative scale; the absolute error is used
/// instead.
pub fn mismatch_jnd(x: f64, xhat: f64, xi: f64) -> f64 {
    if xhat == 0.0 {
        log::warn!("relative mismatch with zero twin value; using absolute error");
        return (x.abs() - xi).max(0.0);
    }
    ((x - xhat).abs() / xhat.abs() - xi).max(0.0)
}

/// Euclidean mismatch for positioning sensors.
pub fn mismatch_positioning(x: [f64; 2], xhat: [f64; 2], xi: f64) -> f64 {
    ((x[0] - xhat[0]).hypot(x[1] - xhat[1]) - xi).max(0.0)
}

pub fn mismatch(x: &State, xhat: &State, xi: f64) -> f64 {
    match (x, xhat) {
        (State::Scalar(a), State::Scalar(b)) => mismatch_jnd(*a, *b, xi),
        (State::Point(a), State::Point(b)) => mismatch_positioning(*a, *b, xi),
        _ => panic!("mismatch between states of different kinds"),
    }
}

/// `r = -(1/N) * sum_n w_n Z_n`.
pub fn reward(mismatch: &[f64], profiles: &[DeviceProfile]) -> f64 {
    let n = mismatch.len() as f64;
    -mismatch
        .iter()
        .zip(profiles)
        .map(|(z, p)| p.priority_w * z)
        .sum::<f64>()
        / n
}

/// RB cost: `M` while `b^T u <= M`, else `b^T u`.
pub fn cost(rb_used: u32, budget: u32) -> f64 {
    rb_used.max(budget) as f64
}

/// `(1 / (T N)) * sum_t w^T Z_t`.
pub fn weighted_mismatch(trajectory: &[Vec<f64>], w: &[f64]) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(invalid("weighted mismatch of an empty trajectory"));
    }
    let n = w.len();
    let mut total = 0.0;
    for z in trajectory {
        if z.len() != n {
            return Err(Error::Dimension { expected: n, got: z.len() });
        }
        total += z.iter().zip(w).map(|(z, w)| z * w).sum::<f64>();
    }
    Ok(total / (trajectory.len() * n) as f64)
}

/// Root-mean-square twin error divided by the range of the physical series
/// (bounding-box diagonal for 2-D series).
pub fn nrmse(physical: &[State], virtual_: &[State]) -> Result<f64> {
    if physical.len() != virtual_.len() {
        return Err(Error::Dimension {
            expected: physical.len(),
            got: virtual_.len(),
        });
    }
    if physical.len() < 2 {
        return Err(invalid("nrmse needs at least 2 samples"));
    }
    let mse = physical
        .iter()
        .zip(virtual_)
        .map(|(x, y)| x.distance(y).powi(2))
        .sum::<f64>()
        / physical.len() as f64;
    let range = match physical[0] {
        State::Scalar(_) => {
            let (lo, hi) = physical.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| match s {
                State::Scalar(x) => (lo.min(*x), hi.max(*x)),
                _ => (lo, hi),
            });
            hi - lo
        }
        State::Point(_) => {
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for s in physical {
                if let State::Point(p) = s {
                    for k in 0..2 {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                }
            }
            (hi[0] - lo[0]).hypot(hi[1] - lo[1])
        }
    };
    if !(range > 0.0) {
        return Err(Error::UndefinedNormalizer("physical series is constant".into()));
    }
    Ok(mse.sqrt() / range)
}

/// Device scheduling vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action(pub Vec<bool>);

impl Action {
    pub fn idle(n: usize) -> Self {
        Action(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn rb_used(&self, profiles: &[DeviceProfile]) -> u32 {
        self.0
            .iter()
            .zip(profiles)
            .filter(|(u, _)| **u)
            .map(|(_, p)| p.rb_cost_b)
            .sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect()
    }
}

/// What the base station sees about each device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Slots since the last correct reception.
    pub staleness: Vec<u64>,
    /// Mismatch reported with the last correctly received packet.
    pub last_mismatch: Vec<f64>,
    /// Outcome of the most recent delivery attempt.
    pub last_gamma: Vec<bool>,
}

impl Observation {
    pub fn initial(n: usize) -> Self {
        Self {
            staleness: vec![0; n],
            last_mismatch: vec![0.0; n],
            last_gamma: vec![true; n],
        }
    }

    pub fn num_devices(&self) -> usize {
        self.staleness.len()
    }

    /// Network input, `[ln(1 + phi), Y, gamma]` per device. The log keeps
    /// one- and three-slot staleness apart while a device left alone for
    /// hundreds of slots still lands in a small range.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_devices() * FEATURES_PER_DEVICE);
        for n in 0..self.num_devices() {
            out.push((self.staleness[n] as f64).ln_1p());
            out.push(self.last_mismatch[n]);
            out.push(if self.last_gamma[n] { 1.0 } else { 0.0 });
        }
        out
    }
}

/// A transmission launched but not yet resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub sample: State,
    pub launch_slot: usize,
    /// Mismatch the device computed when sampling; carried in the packet.
    pub reported_mismatch: f64,
    pub due_slot: usize,
    pub error_prob: f64,
}

/// Full simulator truth at a slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub slot: usize,
    pub physical: Vec<State>,
    pub virtual_: Vec<State>,
    pub mismatch: Vec<f64>,
    pub in_flight: Vec<Option<Pending>>,
    pub rb_budget: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub cost: f64,
    pub rb_used: u32,
    pub next_observation: Observation,
    pub truth: EnvSnapshot,
    /// Devices whose packet was correctly received this step.
    pub received: Vec<bool>,
    /// No further step is possible after this one.
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct LogRow {
    slot: usize,
    device_id: usize,
    x: String,
    xhat: String,
    z: f64,
    u: u8,
    gamma: u8,
    rb_used: u32,
}

fn fmt_state(s: &State) -> String {
    match s {
        State::Scalar(x) => x.to_string(),
        State::Point([x, y]) => format!("{x};{y}"),
    }
}

/// Single-owner environment instance.
#[derive(Clone, Debug)]
pub struct TwinEnv {
    profiles: Vec<DeviceProfile>,
    traces: Vec<PhysicalTrace>,
    channel: ChannelParams,
    slot_duration_s: f64,
    state: EnvSnapshot,
    obs: Observation,
    log: Option<Vec<LogRow>>,
}

impl TwinEnv {
    /// Builds an environment at slot 0 with the twin equal to the physical
    /// state. `traces[n]` drives `profiles[n]`.
    pub fn new(
        profiles: Vec<DeviceProfile>,
        traces: Vec<PhysicalTrace>,
        channel: ChannelParams,
        rb_budget: u32,
    ) -> Result<Self> {
        if profiles.is_empty() {
            return Err(invalid("environment needs at least one device"));
        }
        if profiles.len() != traces.len() {
            return Err(Error::Dimension {
                expected: profiles.len(),
                got: traces.len(),
            });
        }
        if rb_budget < 1 {
            return Err(invalid("RB budget must be >= 1"));
        }
        channel.validate()?;
        for (p, tr) in profiles.iter().zip(&traces) {
            p.validate()?;
            tr.validate()?;
            if tr.is_empty() {
                return Err(invalid(format!("device {}: empty trace", p.id)));
            }
            if tr.kind() != Some(p.kind) {
                return Err(invalid(format!("device {}: trace kind does not match profile", p.id)));
            }
        }
        let len = traces[0].len();
        if traces.iter().any(|t| t.len() != len) {
            return Err(invalid("all traces must have the same length"));
        }
        let slot_duration_s = traces[0].slot_duration_s;
        let n = profiles.len();
        let physical: Vec<State> = traces.iter().map(|t| t.samples[0]).collect();
        let state = EnvSnapshot {
            slot: 0,
            virtual_: physical.clone(),
            physical,
            mismatch: vec![0.0; n],
            in_flight: vec![None; n],
            rb_budget,
        };
        Ok(Self {
            profiles,
            traces,
            channel,
            slot_duration_s,
            state,
            obs: Observation::initial(n),
            log: None,
        })
    }

    pub fn enable_log(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn num_devices(&self) -> usize {
        self.profiles.len()
    }

    pub fn profiles(&self) -> &[DeviceProfile] {
        &self.profiles
    }

    pub fn traces(&self) -> &[PhysicalTrace] {
        &self.traces
    }

    pub fn snapshot(&self) -> &EnvSnapshot {
        &self.state
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn rb_budget(&self) -> u32 {
        self.state.rb_budget
    }

    /// Slots remaining before the traces run out.
    pub fn remaining(&self) -> usize {
        self.traces[0].len() - 1 - self.state.slot
    }

    pub fn set_rb_budget(&mut self, budget: u32) -> Result<()> {
        if budget < 1 {
            return Err(invalid("RB budget must be >= 1"));
        }
        self.state.rb_budget = budget;
        Ok(())
    }

    /// Applies `action` at the current slot and advances one slot. Returns
    /// `Ok(None)` once the traces are exhausted.
    pub fn step<R: Rng + ?Sized>(&mut self, action: &Action, rng: &mut R) -> Result<Option<StepOutcome>> {
        let n = self.num_devices();
        if action.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: action.len(),
            });
        }
        if self.remaining() == 0 {
            return Ok(None);
        }
        let t = self.state.slot;
        let rb_used = action.rb_used(&self.profiles);
        let cost = cost(rb_used, self.state.rb_budget);

        for (i, &u) in action.0.iter().enumerate() {
            if !u {
                continue;
            }
            let p = &self.profiles[i];
            let gain = channel::draw_gain(&self.channel, p, rng);
            let rate = channel::uplink_rate(true, p.rb_cost_b, gain, &self.channel, p);
            let delay = channel::uplink_delay(rate, p.payload_bits);
            let (due, error_prob) = match channel::delivery_slots(delay, self.slot_duration_s) {
                Some(k) => (t + k, channel::packet_error_prob(gain, p.rb_cost_b, &self.channel, p)),
                None => (t + 1, 1.0),
            };
            // a newer sample supersedes one still in flight
            self.state.in_flight[i] = Some(Pending {
                sample: self.state.physical[i],
                launch_slot: t,
                reported_mismatch: self.state.mismatch[i],
                due_slot: due,
                error_prob,
            });
        }

        let t = t + 1;
        self.state.slot = t;
        for (i, tr) in self.traces.iter().enumerate() {
            self.state.physical[i] = tr.samples[t];
        }

        let mut received = vec![false; n];
        for i in 0..n {
            let due = matches!(&self.state.in_flight[i], Some(p) if p.due_slot <= t);
            if due {
                let pending = self.state.in_flight[i].take().expect("checked");
                let ok = channel::draw_reception(pending.error_prob, rng);
                self.obs.last_gamma[i] = ok;
                if ok {
                    self.state.virtual_[i] = pending.sample;
                    self.obs.last_mismatch[i] = pending.reported_mismatch;
                    received[i] = true;
                }
            }
            if received[i] {
                self.obs.staleness[i] = 0;
            } else {
                self.obs.staleness[i] += 1;
            }
            self.state.mismatch[i] = mismatch(
                &self.state.physical[i],
                &self.state.virtual_[i],
                self.profiles[i].threshold_xi,
            );
        }
        let reward = reward(&self.state.mismatch, &self.profiles);

        if let Some(log) = self.log.as_mut() {
            for i in 0..n {
                log.push(LogRow {
                    slot: t,
                    device_id: self.profiles[i].id,
                    x: fmt_state(&self.state.physical[i]),
                    xhat: fmt_state(&self.state.virtual_[i]),
                    z: self.state.mismatch[i],
                    u: action.0[i] as u8,
                    gamma: received[i] as u8,
                    rb_used,
                });
            }
        }

        Ok(Some(StepOutcome {
            reward,
            cost,
            rb_used,
            next_observation: self.obs.clone(),
            truth: self.state.clone(),
            received,
            done: self.remaining() == 0,
        }))
    }

    /// Writes the episode log (`slot,device_id,X,Xhat,Z,u,gamma,rb_used`).
    /// 2-D states are written as `x;y`.
    pub fn write_log<W: Write>(&self, writer: W) -> Result<()> {
        let rows = self
            .log
            .as_ref()
            .ok_or_else(|| invalid("episode logging was not enabled"))?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["slot", "device_id", "X", "Xhat", "Z", "u", "gamma", "rb_used"])?;
        for r in rows {
            w.write_record([
                r.slot.to_string(),
                r.device_id.to_string(),
                r.x.clone(),
                r.xhat.clone(),
                r.z.to_string(),
                r.u.to_string(),
                r.gamma.to_string(),
                r.rb_used.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Splits a fleet into the thermo-hygrometer and positioning index sets.
pub fn device_sets(profiles: &[DeviceProfile]) -> (Vec<usize>, Vec<usize>) {
    let mut jnd = Vec::new();
    let mut pos = Vec::new();
    for (i, p) in profiles.iter().enumerate() {
        match p.kind {
            DeviceKind::ThermoHygro => jnd.push(i),
            DeviceKind::Positioning => pos.push(i),
        }
    }
    (jnd, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::{generate_scalar_trace, DEFAULT_SLOT_DURATION_S};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_profile(id: usize, w: f64, b: u32) -> DeviceProfile {
        DeviceProfile {
            id,
            kind: DeviceKind::ThermoHygro,
            priority_w: w,
            rb_cost_b: b,
            threshold_xi: 0.01,
            payload_bits: 2000,
            tx_power_w: 0.5,
            distance_m: 100.0,
        }
    }

    fn trace(samples: Vec<f64>) -> PhysicalTrace {
        PhysicalTrace {
            device_id: 0,
            samples: samples.into_iter().map(State::Scalar).collect(),
            slot_duration_s: DEFAULT_SLOT_DURATION_S,
        }
    }

    #[test]
    fn jnd_examples() {
        assert_eq!(mismatch_jnd(20.0, 20.0, 0.01), 0.0);
        assert!((mismatch_jnd(21.0, 20.0, 0.01) - 0.04).abs() < 1e-12);
        assert_eq!(mismatch_jnd(20.1, 20.0, 0.01), 0.0);
        // zero twin value falls back to absolute error
        assert!((mismatch_jnd(0.5, 0.0, 0.01) - 0.49).abs() < 1e-12);
    }

    #[test]
    fn positioning_examples() {
        assert_eq!(mismatch_positioning([1.0, 2.0], [1.0, 2.0], 0.01), 0.0);
        assert!((mismatch_positioning([3.0, 4.0], [0.0, 0.0], 0.01) - 4.99).abs() < 1e-12);
        assert_eq!(mismatch_positioning([3.0, 4.0], [0.0, 0.0], 5.0), 0.0);
    }

    #[test]
    fn reward_example() {
        let profiles = vec![scalar_profile(0, 0.15, 1), scalar_profile(1, 0.05, 1)];
        let r = reward(&[0.04, 4.99], &profiles);
        assert!((r + 0.12775).abs() < 1e-12);
    }

    #[test]
    fn cost_branches() {
        let b = [1u32, 1, 5];
        let used: u32 = b.iter().sum();
        assert_eq!(cost(used, 18), 18.0);
        assert_eq!(cost(36, 18), 36.0);
        assert_eq!(cost(36, 36), 36.0);
    }

    #[test]
    fn weighted_mismatch_examples() {
        assert!((weighted_mismatch(&[vec![2.0], vec![4.0]], &[1.0]).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(weighted_mismatch(&[vec![0.0, 0.0]], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(weighted_mismatch(&[], &[1.0]).is_err());
    }

    #[test]
    fn nrmse_examples() {
        let x: Vec<State> = [0.0, 1.0, 2.0, 3.0].map(State::Scalar).to_vec();
        let y: Vec<State> = [0.0, 1.0, 2.0, 5.0].map(State::Scalar).to_vec();
        assert_eq!(nrmse(&x, &x).unwrap(), 0.0);
        assert!((nrmse(&x, &y).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let c = vec![State::Scalar(2.0); 4];
        assert!(matches!(nrmse(&c, &y), Err(Error::UndefinedNormalizer(_))));
    }

    #[test]
    fn idle_env_is_free_and_costs_budget() {
        let profiles = vec![scalar_profile(0, 1.0, 1), scalar_profile(1, 1.0, 1)];
        let traces = vec![trace(vec![20.0; 4]), trace(vec![30.0; 4])];
        let mut env = TwinEnv::new(profiles, traces, ChannelParams::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = env.step(&Action::idle(2), &mut rng).unwrap().unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.cost, 5.0);
        assert_eq!(out.next_observation.staleness, vec![1, 1]);
    }

    #[test]
    fn delivery_updates_twin_and_observation() {
        let profiles = vec![scalar_profile(0, 1.0, 1)];
        let traces = vec![trace(vec![20.0, 22.0, 24.0, 24.0])];
        let mut env = TwinEnv::new(profiles, traces, ChannelParams::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idle = Action::idle(1);
        let go = Action(vec![true]);
        let o1 = env.step(&idle, &mut rng).unwrap().unwrap();
        assert!((o1.truth.mismatch[0] - 0.09).abs() < 1e-12);
        // launch at slot 1 carries X=22 and the mismatch seen then
        let o2 = env.step(&go, &mut rng).unwrap().unwrap();
        assert!(o2.received[0]);
        assert_eq!(o2.truth.virtual_[0], State::Scalar(22.0));
        assert_eq!(o2.next_observation.staleness[0], 0);
        assert!((o2.next_observation.last_mismatch[0] - 0.09).abs() < 1e-12);
        let o3 = env.step(&idle, &mut rng).unwrap().unwrap();
        assert!(o3.done);
        assert_eq!(o3.next_observation.staleness[0], 1);
        assert!(env.step(&idle, &mut rng).unwrap().is_none());
    }

    #[test]
    fn budget_validation() {
        let tr = generate_scalar_trace(0, 3, 20.0, 0.0, 0.0, 0.0).unwrap();
        let mut env = TwinEnv::new(vec![scalar_profile(0, 1.0, 1)], vec![tr], ChannelParams::default(), 3).unwrap();
        assert!(env.set_rb_budget(0).is_err());
        env.set_rb_budget(10).unwrap();
        assert_eq!(env.rb_budget(), 10);
    }
}
