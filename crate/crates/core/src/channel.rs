//! Uplink model: Rayleigh power fading, Shannon rate, transmission delay,
//! exponential packet-error model and Bernoulli reception.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::traces::DeviceProfile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    /// Bandwidth of one RB in Hz.
    pub rb_bandwidth_w: f64,
    /// Noise power spectral density in W/Hz.
    pub noise_psd_n0: f64,
    /// Waterfall threshold in dB.
    pub waterfall_m_db: f64,
    /// Mean of the exponential power-fading factor.
    pub fading_mean: f64,
    /// Replaces the random fading factor with a constant (test hook).
    #[serde(default)]
    pub fixed_fading: Option<f64>,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            rb_bandwidth_w: 180e3,
            // -175 dBm/Hz
            noise_psd_n0: 10f64.powf(-20.5),
            waterfall_m_db: 0.023,
            fading_mean: 1.0,
            fixed_fading: None,
        }
    }
}

impl ChannelParams {
    pub fn waterfall_linear(&self) -> f64 {
        10f64.powf(self.waterfall_m_db / 10.0)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.rb_bandwidth_w > 0.0) || !(self.noise_psd_n0 > 0.0) {
            return Err(crate::error::invalid("bandwidth and noise PSD must be positive"));
        }
        if self.fixed_fading.is_none() && !(self.fading_mean > 0.0) {
            return Err(crate::error::invalid("fading mean must be positive"));
        }
        Ok(())
    }
}

/// One slot's link outcome for one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkRealization {
    pub gain_h: f64,
    pub rate_bps: f64,
    /// Seconds; infinite when the device is not scheduled.
    pub delay_s: f64,
    pub error_prob: f64,
    pub received: bool,
}

/// Channel gain `o * d^-2` with `o ~ Exp(mean = fading_mean)`.
pub fn draw_gain<R: Rng + ?Sized>(params: &ChannelParams, profile: &DeviceProfile, rng: &mut R) -> f64 {
    let o = match params.fixed_fading {
        Some(o) => o,
        None => Exp::new(1.0 / params.fading_mean)
            .expect("fading mean positive")
            .sample(rng),
    };
    o / (profile.distance_m * profile.distance_m)
}

/// Uplink rate in bits/s for schedule flag `u` over `b` RBs.
pub fn uplink_rate(u: bool, b: u32, gain_h: f64, params: &ChannelParams, profile: &DeviceProfile) -> f64 {
    if !u {
        return 0.0;
    }
    let bw = b as f64 * params.rb_bandwidth_w;
    let snr = profile.tx_power_w * gain_h / (params.noise_psd_n0 * bw);
    bw * (1.0 + snr).log2()
}

/// Transmission delay `L / r` in seconds; infinite for a zero rate.
pub fn uplink_delay(rate_bps: f64, payload_bits: u32) -> f64 {
    if rate_bps <= 0.0 {
        f64::INFINITY
    } else {
        payload_bits as f64 / rate_bps
    }
}

/// Instantaneous packet-error probability at gain `gain_h`.
pub fn packet_error_prob(gain_h: f64, b: u32, params: &ChannelParams, profile: &DeviceProfile) -> f64 {
    if gain_h <= 0.0 {
        return 1.0;
    }
    let m = params.waterfall_linear();
    let x = m * params.noise_psd_n0 * b as f64 * params.rb_bandwidth_w / (profile.tx_power_w * gain_h);
    (1.0 - (-x).exp()).clamp(0.0, 1.0)
}

/// True with probability `1 - error_prob`.
pub fn draw_reception<R: Rng + ?Sized>(error_prob: f64, rng: &mut R) -> bool {
    debug_assert!((0.0..=1.0).contains(&error_prob));
    if error_prob <= 0.0 {
        return true;
    }
    if error_prob >= 1.0 {
        return false;
    }
    rng.random::<f64>() >= error_prob
}

/// Slots until a packet launched now is delivered: `max(1, ceil(D / slot))`.
pub fn delivery_slots(delay_s: f64, slot_duration_s: f64) -> Option<usize> {
    if !delay_s.is_finite() {
        return None;
    }
    let slots = (delay_s / slot_duration_s).ceil();
    Some((slots as usize).max(1))
}

/// Draws the link for one scheduled transmission of `profile`.
pub fn realize_link<R: Rng + ?Sized>(params: &ChannelParams, profile: &DeviceProfile, rng: &mut R) -> LinkRealization {
    let gain_h = draw_gain(params, profile, rng);
    let b = profile.rb_cost_b;
    let rate_bps = uplink_rate(true, b, gain_h, params, profile);
    let delay_s = uplink_delay(rate_bps, profile.payload_bits);
    let error_prob = packet_error_prob(gain_h, b, params, profile);
    let received = draw_reception(error_prob, rng);
    LinkRealization {
        gain_h,
        rate_bps,
        delay_s,
        error_prob,
        received,
    }
}
