//! Experiment configuration, fleet construction, drivers and oracles.

pub mod eval;
pub mod experiments;
pub mod oracles;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, BudgetSchedule};
use crate::channel::ChannelParams;
use crate::env::TwinEnv;
use crate::error::{invalid, Result};
use crate::replay::MtrConfig;
use crate::traces::{
    generate_bursty_trace, generate_trajectory_trace, BurstyProcess, DeviceKind, DeviceProfile, PhysicalTrace,
};

/// Device counts and per-kind parameters. Kinds are ordered
/// thermometer, hygrometer, positioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetSpec {
    pub counts: [usize; 3],
    /// `w_n = priority[kind] / N`.
    pub priority: [f64; 3],
    pub rb_cost: [u32; 3],
    pub threshold_xi: f64,
    pub payload_bits: u32,
    pub tx_power_w: f64,
    pub distance_m: (f64, f64),
}

impl Default for FleetSpec {
    /// 8 thermometers, 8 hygrometers and 4 positioning sensors.
    fn default() -> Self {
        Self {
            counts: [8, 8, 4],
            priority: [3.0, 2.0, 1.0],
            rb_cost: [1, 1, 5],
            threshold_xi: 0.01,
            payload_bits: 2000,
            tx_power_w: 0.5,
            distance_m: (50.0, 150.0),
        }
    }
}

impl FleetSpec {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `n` devices in the default 2:2:1 mix, one RB each.
    pub fn scaled(&self, n: usize) -> Self {
        let thermo = (2 * n).div_ceil(5);
        let hygro = ((2 * n) / 5).min(n - thermo);
        Self {
            counts: [thermo, hygro, n - thermo - hygro],
            rb_cost: [1, 1, 1],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(invalid("fleet has no devices"));
        }
        if self.rb_cost.contains(&0) {
            return Err(invalid("RB costs must be >= 1"));
        }
        if !(self.distance_m.0 > 0.0 && self.distance_m.1 >= self.distance_m.0) {
            return Err(invalid("distance range must be positive and ordered"));
        }
        Ok(())
    }
}

/// Parameters of the synthetic signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSpec {
    pub temperature: BurstyProcess,
    pub humidity: BurstyProcess,
    /// Per-device multiplier on the scalar noise, drawn log-uniformly.
    pub volatility_range: (f64, f64),
    /// Walker speed per slot, drawn uniformly per device.
    pub speed_range: (f64, f64),
    pub max_dwell: usize,
    pub waypoints: usize,
    /// Side of the square the waypoints are drawn from.
    pub area: f64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            temperature: BurstyProcess {
                base: 20.0,
                active_sigma: 0.4,
                quiet_sigma: 0.01,
                switch_prob: 0.01,
            },
            humidity: BurstyProcess {
                base: 45.0,
                active_sigma: 0.9,
                quiet_sigma: 0.02,
                switch_prob: 0.01,
            },
            volatility_range: (0.5, 2.0),
            speed_range: (0.05, 0.2),
            max_dwell: 150,
            waypoints: 4,
            area: 20.0,
        }
    }
}

/// What drives one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Signal {
    Scalar(BurstyProcess),
    Walk {
        waypoints: Vec<[f64; 2]>,
        speed: f64,
        max_dwell: usize,
    },
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags for [`mix_seed`].
pub const STREAM_FLEET: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_CALIBRATE: u64 = 4;
pub const STREAM_AGENT: u64 = 5;

/// A concrete fleet: profiles plus the per-device signal parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub profiles: Vec<DeviceProfile>,
    pub signals: Vec<Signal>,
    pub channel: ChannelParams,
}

impl Scenario {
    /// Draws per-device distances, volatilities, speeds and routes from `seed`.
    pub fn build(fleet: &FleetSpec, traces: &TraceSpec, channel: &ChannelParams, seed: u64) -> Result<Self> {
        fleet.validate()?;
        let n = fleet.total();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_FLEET, n as u64));
        let mut profiles = Vec::with_capacity(n);
        let mut signals = Vec::with_capacity(n);
        let (vlo, vhi) = traces.volatility_range;
        if !(vlo > 0.0 && vhi >= vlo) {
            return Err(invalid("volatility range must be positive and ordered"));
        }
        for (k, kind_count) in fleet.counts.iter().enumerate() {
            for _ in 0..*kind_count {
                let id = profiles.len();
                let kind = if k == 2 { DeviceKind::Positioning } else { DeviceKind::ThermoHygro };
                let (dlo, dhi) = fleet.distance_m;
                profiles.push(DeviceProfile {
                    id,
                    kind,
                    priority_w: fleet.priority[k] / n as f64,
                    rb_cost_b: fleet.rb_cost[k],
                    threshold_xi: fleet.threshold_xi,
                    payload_bits: fleet.payload_bits,
                    tx_power_w: fleet.tx_power_w,
                    distance_m: if dhi > dlo { rng.random_range(dlo..dhi) } else { dlo },
                });
                signals.push(match k {
                    0 | 1 => {
                        let base = if k == 0 { &traces.temperature } else { &traces.humidity };
                        let f = (vlo.ln() + rng.random::<f64>() * (vhi.ln() - vlo.ln())).exp();
                        Signal::Scalar(BurstyProcess {
                            active_sigma: base.active_sigma * f,
                            quiet_sigma: base.quiet_sigma * f,
                            ..base.clone()
                        })
                    }
                    _ => {
                        let (slo, shi) = traces.speed_range;
                        let waypoints = (0..traces.waypoints.max(2))
                            .map(|_| [rng.random::<f64>() * traces.area, rng.random::<f64>() * traces.area])
                            .collect();
                        Signal::Walk {
                            waypoints,
                            speed: if shi > slo { rng.random_range(slo..shi) } else { slo },
                            max_dwell: traces.max_dwell,
                        }
                    }
                });
            }
        }
        Ok(Self {
            profiles,
            signals,
            channel: channel.clone(),
        })
    }

    pub fn n_devices(&self) -> usize {
        self.profiles.len()
    }

    /// One trace per device of `len` samples; device `n` uses stream `seed, n`.
    pub fn traces(&self, seed: u64, len: usize) -> Result<Vec<PhysicalTrace>> {
        self.signals
            .iter()
            .enumerate()
            .map(|(n, sig)| {
                let s = mix_seed(seed, 0, n as u64);
                let mut tr = match sig {
                    Signal::Scalar(p) => generate_bursty_trace(s, len, p)?,
                    Signal::Walk {
                        waypoints,
                        speed,
                        max_dwell,
                    } => {
                        // start at a seeded point along the route
                        let skip = (s % 997) as usize;
                        let mut tr = generate_trajectory_trace(s, len + skip, waypoints, *speed, *max_dwell)?;
                        tr.samples.drain(..skip);
                        tr
                    }
                };
                tr.device_id = self.profiles[n].id;
                Ok(tr)
            })
            .collect()
    }

    /// Fresh environment over `slots` steps.
    pub fn env(&self, seed: u64, slots: usize, budget: u32) -> Result<TwinEnv> {
        TwinEnv::new(
            self.profiles.clone(),
            self.traces(seed, slots + 1)?,
            self.channel.clone(),
            budget,
        )
    }

    /// Mean absolute per-slot change per device, from a calibration trace.
    pub fn change_stats(&self, seed: u64, len: usize) -> Result<Vec<f64>> {
        Ok(self.traces(seed, len)?.iter().map(PhysicalTrace::mean_abs_change).collect())
    }
}

/// Everything an experiment needs. Missing JSON fields take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub fleet: FleetSpec,
    pub traces: TraceSpec,
    pub channel: ChannelParams,
    pub agent: AgentConfig,
    /// Budget used when training at a single `M`.
    pub budget: u32,
    pub budget_schedule: BudgetSchedule,
    pub episodes: usize,
    pub slots_per_episode: usize,
    pub eval_episodes: usize,
    pub eval_slots: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub sweep_budgets: Vec<u32>,
    pub device_counts: Vec<usize>,
    pub scaling_budget: u32,
    pub consumption_budgets: Vec<u32>,
    pub period_candidates: Vec<usize>,
    /// Slots of calibration trace used for the interval planner's statistics.
    pub calibration_slots: usize,
}

/// Agent settings sized for a single CPU core.
pub fn desk_agent() -> AgentConfig {
    AgentConfig {
        hidden: vec![64, 64],
        batch_size: 64,
        gamma: 0.9,
        gamma_c: 0.9,
        lr_q: 1e-3,
        lr_pi: 1e-3,
        lr_alpha: 1e-3,
        // a slow, nearly fixed price: faster multiplier rates oscillate
        // against the cost critic at this training length
        lr_lambda: 1e-5,
        lambda_every: 12,
        cost_slack: 0.5,
        // per-slot rewards are O(1e-3); without this the entropy term
        // swamps them
        reward_scale: 300.0,
        buffer: MtrConfig::equal_split(4, 20_000, 0.8),
        warmup_steps: 500,
        update_every: 3,
        ..AgentConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "default".into(),
            fleet: FleetSpec::default(),
            traces: TraceSpec::default(),
            channel: ChannelParams::default(),
            agent: desk_agent(),
            budget: 15,
            budget_schedule: BudgetSchedule(vec![(0, 30), (70, 10), (140, 26)]),
            episodes: 200,
            slots_per_episode: 300,
            eval_episodes: 4,
            eval_slots: 300,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
            sweep_budgets: vec![9, 15, 27, 36],
            device_counts: vec![10, 15, 20, 25, 30],
            scaling_budget: 10,
            consumption_budgets: vec![9, 18, 27],
            period_candidates: vec![1, 2, 3, 4, 6, 8, 12, 16, 24, 48],
            calibration_slots: 20_000,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fleet.validate()?;
        self.channel.validate()?;
        self.agent.validate()?;
        self.budget_schedule.validate()?;
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.slots_per_episode == 0 || self.eval_slots < 2 || self.eval_episodes == 0 {
            return Err(invalid("episode lengths and evaluation counts must be positive"));
        }
        if self.period_candidates.is_empty() || self.period_candidates.contains(&0) {
            return Err(invalid("period candidates must be positive"));
        }
        if self.budget < 1 || self.scaling_budget < 1 {
            return Err(invalid("budgets must be >= 1"));
        }
        Ok(())
    }
}
