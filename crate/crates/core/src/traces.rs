//! Physical-state signals that drive the twin.
//!
//! Seeded synthetic generators (scalar random walks, with jumps or with
//! bursts of activity, for thermo-hygrometers; a waypoint walker for
//! positioning sensors) plus a CSV reader/writer with the schema `slot,device_id,value_x,value_y`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default seconds per slot.
pub const DEFAULT_SLOT_DURATION_S: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    /// Thermometers and hygrometers (scalar state, relative mismatch).
    ThermoHygro,
    /// Positioning sensors (2-D state, Euclidean mismatch).
    Positioning,
}

/// Static per-device parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: usize,
    pub kind: DeviceKind,
    pub priority_w: f64,
    /// RBs consumed by one transmission.
    pub rb_cost_b: u32,
    pub threshold_xi: f64,
    pub payload_bits: u32,
    /// Transmit power in watts.
    pub tx_power_w: f64,
    /// Distance to the base station in meters.
    pub distance_m: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.priority_w >= 0.0) {
            return Err(invalid(format!("device {}: priority must be >= 0", self.id)));
        }
        if self.rb_cost_b < 1 {
            return Err(invalid(format!("device {}: rb cost must be >= 1", self.id)));
        }
        if !(self.threshold_xi >= 0.0) {
            return Err(invalid(format!("device {}: threshold must be >= 0", self.id)));
        }
        if self.payload_bits < 1 {
            return Err(invalid(format!("device {}: payload must be >= 1 bit", self.id)));
        }
        if !(self.tx_power_w > 0.0) || !(self.distance_m > 0.0) {
            return Err(invalid(format!(
                "device {}: power and distance must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// One physical (or virtual) state sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum State {
    Scalar(f64),
    Point([f64; 2]),
}

impl State {
    pub fn is_finite(&self) -> bool {
        match *self {
            State::Scalar(x) => x.is_finite(),
            State::Point([x, y]) => x.is_finite() && y.is_finite(),
        }
    }

    pub fn kind(&self) -> DeviceKind {
        match self {
            State::Scalar(_) => DeviceKind::ThermoHygro,
            State::Point(_) => DeviceKind::Positioning,
        }
    }

    /// Euclidean distance for points, absolute difference for scalars.
    /// Mixed kinds are a programming error.
    pub fn distance(&self, other: &State) -> f64 {
        match (self, other) {
            (State::Scalar(a), State::Scalar(b)) => (a - b).abs(),
            (State::Point(a), State::Point(b)) => (a[0] - b[0]).hypot(a[1] - b[1]),
            _ => panic!("distance between states of different kinds"),
        }
    }
}

/// Per-device time series of physical states, one sample per slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalTrace {
    pub device_id: usize,
    pub samples: Vec<State>,
    pub slot_duration_s: f64,
}

impl PhysicalTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn kind(&self) -> Option<DeviceKind> {
        self.samples.first().map(State::kind)
    }

    /// Checks the trace invariants: finite samples of a single arity.
    pub fn validate(&self) -> Result<()> {
        if !(self.slot_duration_s > 0.0) {
            return Err(invalid("slot duration must be positive"));
        }
        let Some(kind) = self.kind() else {
            return Ok(());
        };
        for (t, s) in self.samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!(
                    "device {} sample at slot {t}",
                    self.device_id
                )));
            }
            if s.kind() != kind {
                return Err(invalid(format!(
                    "device {} mixes scalar and 2-D samples at slot {t}",
                    self.device_id
                )));
            }
        }
        Ok(())
    }

    /// Mean absolute per-slot change, in the units the mismatch uses:
    /// relative change for scalar traces, Euclidean step for positioning.
    pub fn mean_abs_change(&self) -> f64 {
        if self.samples.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .samples
            .windows(2)
            .map(|w| match (w[0], w[1]) {
                (State::Scalar(a), State::Scalar(b)) => {
                    if a == 0.0 {
                        (b - a).abs()
                    } else {
                        (b - a).abs() / a.abs()
                    }
                }
                (a, b) => a.distance(&b),
            })
            .sum();
        total / (self.samples.len() - 1) as f64
    }
}

/// Parameters of the scalar random-walk-with-jumps process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarProcess {
    pub base: f64,
    pub walk_sigma: f64,
    pub jump_prob: f64,
    pub jump_scale: f64,
}

impl Default for ScalarProcess {
    fn default() -> Self {
        Self {
            base: 20.0,
            walk_sigma: 0.05,
            jump_prob: 0.01,
            jump_scale: 2.0,
        }
    }
}

/// Random walk `X_{t+1} = X_t + N(0, walk_sigma)` plus, with probability
/// `jump_prob`, an extra `N(0, jump_scale)` jump.
pub fn generate_scalar_trace(
    seed: u64,
    length: usize,
    base: f64,
    walk_sigma: f64,
    jump_prob: f64,
    jump_scale: f64,
) -> Result<PhysicalTrace> {
    if length == 0 {
        return Err(invalid("trace length must be >= 1"));
    }
    if !(walk_sigma >= 0.0) || !(jump_scale >= 0.0) {
        return Err(invalid("noise scales must be >= 0"));
    }
    if !(0.0..=1.0).contains(&jump_prob) {
        return Err(invalid("jump probability must lie in [0, 1]"));
    }
    if !base.is_finite() {
        return Err(invalid("base must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walk = Normal::new(0.0, walk_sigma).expect("sigma checked");
    let jump = Normal::new(0.0, jump_scale).expect("scale checked");
    let mut x = base;
    let mut samples = Vec::with_capacity(length);
    samples.push(State::Scalar(x));
    for _ in 1..length {
        x += walk.sample(&mut rng);
        if rng.random::<f64>() < jump_prob {
            x += jump.sample(&mut rng);
        }
        samples.push(State::Scalar(x));
    }
    Ok(PhysicalTrace {
        device_id: 0,
        samples,
        slot_duration_s: DEFAULT_SLOT_DURATION_S,
    })
}

pub fn generate_scalar_from(seed: u64, length: usize, p: &ScalarProcess) -> Result<PhysicalTrace> {
    generate_scalar_trace(seed, length, p.base, p.walk_sigma, p.jump_prob, p.jump_scale)
}

/// Two-regime scalar walk: the per-slot noise is `active_sigma` while the
/// sensor is active and `quiet_sigma` otherwise; the regime flips with
/// probability `switch_prob` per slot. Models signals with bursts of
/// activity (HVAC cycles, occupancy) whose timing a scheduler can only
/// infer from reported values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstyProcess {
    pub base: f64,
    pub active_sigma: f64,
    pub quiet_sigma: f64,
    pub switch_prob: f64,
}

pub fn generate_bursty_trace(seed: u64, length: usize, p: &BurstyProcess) -> Result<PhysicalTrace> {
    if length == 0 {
        return Err(invalid("trace length must be >= 1"));
    }
    if !(p.active_sigma >= 0.0) || !(p.quiet_sigma >= 0.0) {
        return Err(invalid("noise scales must be >= 0"));
    }
    if !(0.0..=1.0).contains(&p.switch_prob) {
        return Err(invalid("switch probability must lie in [0, 1]"));
    }
    if !p.base.is_finite() {
        return Err(invalid("base must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut active = rng.random::<bool>();
    let mut x = p.base;
    let mut samples = Vec::with_capacity(length);
    samples.push(State::Scalar(x));
    for _ in 1..length {
        if rng.random::<f64>() < p.switch_prob {
            active = !active;
        }
        let sigma = if active { p.active_sigma } else { p.quiet_sigma };
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        x += sigma * z;
        samples.push(State::Scalar(x));
    }
    Ok(PhysicalTrace {
        device_id: 0,
        samples,
        slot_duration_s: DEFAULT_SLOT_DURATION_S,
    })
}

/// Piecewise-linear motion along a closed loop of waypoints at `speed`
/// units per slot. On reaching a waypoint the walker stops there for the
/// rest of the slot and then dwells for a seeded number of slots drawn
/// uniformly from `0..=max_dwell`. With `max_dwell = 0` the trace does not
/// depend on the seed.
pub fn generate_trajectory_trace(
    seed: u64,
    length: usize,
    waypoints: &[[f64; 2]],
    speed: f64,
    max_dwell: usize,
) -> Result<PhysicalTrace> {
    if waypoints.len() < 2 {
        return Err(invalid("trajectory needs at least 2 waypoints"));
    }
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(invalid("speed must be positive"));
    }
    if length == 0 {
        return Err(invalid("trace length must be >= 1"));
    }
    if waypoints.iter().any(|w| !w[0].is_finite() || !w[1].is_finite()) {
        return Err(invalid("waypoints must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = waypoints[0];
    let mut next = 1 % waypoints.len();
    let mut dwell = 0usize;
    let mut samples = Vec::with_capacity(length);
    samples.push(State::Point(pos));
    while samples.len() < length {
        if dwell > 0 {
            dwell -= 1;
        } else {
            let target = waypoints[next];
            let dx = target[0] - pos[0];
            let dy = target[1] - pos[1];
            let dist = dx.hypot(dy);
            if dist <= speed {
                pos = target;
                next = (next + 1) % waypoints.len();
                if max_dwell > 0 {
                    dwell = rng.random_range(0..=max_dwell);
                }
            } else {
                pos = [pos[0] + dx / dist * speed, pos[1] + dy / dist * speed];
            }
        }
        samples.push(State::Point(pos));
    }
    Ok(PhysicalTrace {
        device_id: 0,
        samples,
        slot_duration_s: DEFAULT_SLOT_DURATION_S,
    })
}

/// Reads traces in the `slot,device_id,value_x,value_y` schema. Rows of one
/// device must appear in slot order starting at 0 with no gaps; rows of
/// different devices may interleave.
pub fn load_csv_traces(path: impl AsRef<Path>, slot_duration_s: f64) -> Result<Vec<PhysicalTrace>> {
    let file = std::fs::File::open(path)?;
    read_csv_traces(file, slot_duration_s)
}

pub fn read_csv_traces<R: std::io::Read>(reader: R, slot_duration_s: f64) -> Result<Vec<PhysicalTrace>> {
    if !(slot_duration_s > 0.0) {
        return Err(invalid("slot duration must be positive"));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        row: 1,
        msg: e.to_string(),
    })?;
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            row: 1,
            msg: format!("missing column `{name}`"),
        })
    };
    let (c_slot, c_dev, c_x, c_y) = (col("slot")?, col("device_id")?, col("value_x")?, col("value_y")?);

    let mut by_device: BTreeMap<usize, Vec<State>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let parse_num = |c: usize, what: &str| -> Result<f64> {
            field(c).parse::<f64>().map_err(|_| Error::Parse {
                row,
                msg: format!("bad {what} `{}`", field(c)),
            })
        };
        let slot: usize = field(c_slot).parse().map_err(|_| Error::Parse {
            row,
            msg: format!("bad slot `{}`", field(c_slot)),
        })?;
        let device: usize = field(c_dev).parse().map_err(|_| Error::Parse {
            row,
            msg: format!("bad device_id `{}`", field(c_dev)),
        })?;
        let x = parse_num(c_x, "value_x")?;
        let state = if field(c_y).is_empty() {
            State::Scalar(x)
        } else {
            State::Point([x, parse_num(c_y, "value_y")?])
        };
        if !state.is_finite() {
            return Err(Error::Parse { row, msg: "non-finite value".into() });
        }
        let samples = by_device.entry(device).or_default();
        if slot != samples.len() {
            return Err(Error::Parse {
                row,
                msg: format!(
                    "device {device}: expected slot {} but found {slot}",
                    samples.len()
                ),
            });
        }
        if let Some(first) = samples.first() {
            if first.kind() != state.kind() {
                return Err(Error::Parse {
                    row,
                    msg: format!("device {device}: mixed scalar and 2-D rows"),
                });
            }
        }
        samples.push(state);
    }
    Ok(by_device
        .into_iter()
        .map(|(device_id, samples)| PhysicalTrace {
            device_id,
            samples,
            slot_duration_s,
        })
        .collect())
}

/// Writes traces in the loader's schema. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv_traces<W: std::io::Write>(writer: W, traces: &[PhysicalTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["slot", "device_id", "value_x", "value_y"])?;
    for tr in traces {
        for (t, s) in tr.samples.iter().enumerate() {
            let (x, y) = match *s {
                State::Scalar(x) => (x.to_string(), String::new()),
                State::Point([x, y]) => (x.to_string(), y.to_string()),
            };
            w.write_record([t.to_string(), tr.device_id.to_string(), x, y])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv_traces(path: impl AsRef<Path>, traces: &[PhysicalTrace]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_traces(file, traces)
}
