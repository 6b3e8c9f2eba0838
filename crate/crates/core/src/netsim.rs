//! Wireless edge-network model.
//!
//! Links are FDMA channels with Shannon rates: noise power grows with the
//! allocated bandwidth (`N0 · B`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, SimRng};

pub const DEFAULT_SLOT_DURATION: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: u32,
    /// FLOP/s
    pub compute_rate: f64,
    /// bytes
    pub memory_capacity: f64,
    pub channel_gain: f64,
    /// W
    pub tx_power: f64,
    #[serde(default = "default_rank")]
    pub local_rank: usize,
}

fn default_rank() -> usize {
    1
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| {
            Err(Error::Domain(format!("device {}: {field} {why}", self.id)))
        };
        if !(self.compute_rate > 0.0 && self.compute_rate.is_finite()) {
            return bad("compute_rate", "must be positive");
        }
        if !(self.memory_capacity > 0.0) {
            return bad("memory_capacity", "must be positive");
        }
        if !(self.channel_gain >= 0.0 && self.channel_gain.is_finite()) {
            return bad("channel_gain", "must be nonnegative");
        }
        if !(self.tx_power >= 0.0 && self.tx_power.is_finite()) {
            return bad("tx_power", "must be nonnegative");
        }
        if self.local_rank < 1 {
            return bad("local_rank", "must be at least 1");
        }
        Ok(())
    }

    /// Uplink rate to the edge server over `bandwidth` Hz.
    pub fn uplink_rate(&self, bandwidth: f64, noise_density: f64) -> Result<f64> {
        shannon_rate(bandwidth, self.channel_gain, self.tx_power, noise_density)
    }
}

/// Per-device bandwidth shares of a common FDMA band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAllocation {
    /// Hz, aligned with the device list the allocation was made for.
    pub bandwidth: Vec<f64>,
    /// W/Hz
    pub noise_density: f64,
    /// Hz
    pub total_bandwidth: f64,
}

impl ChannelAllocation {
    pub fn new(bandwidth: Vec<f64>, noise_density: f64, total_bandwidth: f64) -> Result<Self> {
        let alloc = Self { bandwidth, noise_density, total_bandwidth };
        alloc.validate()?;
        Ok(alloc)
    }

    pub fn equal_split(n: usize, noise_density: f64, total_bandwidth: f64) -> Result<Self> {
        let share = if n == 0 { 0.0 } else { total_bandwidth / n as f64 };
        Self::new(vec![share; n], noise_density, total_bandwidth)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_density > 0.0) {
            return Err(Error::Domain("noise density must be positive".into()));
        }
        if self.bandwidth.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Domain("negative bandwidth share".into()));
        }
        let used: f64 = self.bandwidth.iter().sum();
        if used > self.total_bandwidth {
            return Err(Error::Constraint(format!(
                "allocated {used} Hz exceeds the {} Hz band",
                self.total_bandwidth
            )));
        }
        Ok(())
    }

    pub fn used(&self) -> f64 {
        self.bandwidth.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotClock {
    slot_index: u64,
    slot_duration: f64,
}

impl SlotClock {
    pub fn new(slot_duration: f64) -> Result<Self> {
        if !(slot_duration > 0.0 && slot_duration.is_finite()) {
            return Err(Error::Domain(format!("slot duration must be positive, got {slot_duration}")));
        }
        Ok(Self { slot_index: 0, slot_duration })
    }

    pub fn slot(&self) -> u64 {
        self.slot_index
    }

    pub fn duration(&self) -> f64 {
        self.slot_duration
    }

    pub fn now(&self) -> f64 {
        self.slot_index as f64 * self.slot_duration
    }

    pub fn tick(&mut self) -> u64 {
        self.slot_index += 1;
        self.slot_index
    }
}

impl Default for SlotClock {
    fn default() -> Self {
        Self { slot_index: 0, slot_duration: DEFAULT_SLOT_DURATION }
    }
}

/// Shannon rate in bit/s of a link with `bandwidth` Hz, received power
/// `gain · power` and noise `noise_density · bandwidth`.
pub fn shannon_rate(bandwidth: f64, gain: f64, power: f64, noise_density: f64) -> Result<f64> {
    if bandwidth < 0.0 || gain < 0.0 || power < 0.0 {
        return Err(Error::Domain(format!(
            "negative channel input (B={bandwidth}, gain={gain}, power={power})"
        )));
    }
    if !(noise_density > 0.0) {
        return Err(Error::Domain(format!("noise density must be positive, got {noise_density}")));
    }
    let received = gain * power;
    if bandwidth == 0.0 || received == 0.0 {
        return Ok(0.0);
    }
    let snr = received / (noise_density * bandwidth);
    Ok(bandwidth * snr.ln_1p() / std::f64::consts::LN_2)
}

/// Supremum of `shannon_rate` as bandwidth grows without bound.
pub fn shannon_rate_limit(gain: f64, power: f64, noise_density: f64) -> f64 {
    gain * power / (noise_density * std::f64::consts::LN_2)
}

/// Smallest bandwidth in `[0, max_bandwidth]` whose Shannon rate reaches
/// `required_rate`, or `None` if even `max_bandwidth` falls short.
///
/// The returned value always satisfies the rate requirement (it is the upper
/// end of the final bisection bracket).
pub fn min_bandwidth_for_rate(
    required_rate: f64,
    gain: f64,
    power: f64,
    noise_density: f64,
    max_bandwidth: f64,
) -> Result<Option<f64>> {
    if required_rate <= 0.0 {
        return Ok(Some(0.0));
    }
    if shannon_rate(max_bandwidth, gain, power, noise_density)? < required_rate {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0f64, max_bandwidth);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if shannon_rate(mid, gain, power, noise_density)? >= required_rate {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Seconds to push `bits` over a link of `rate` bit/s.
pub fn comm_latency(bits: f64, rate: f64) -> f64 {
    if bits <= 0.0 {
        0.0
    } else if rate <= 0.0 {
        f64::INFINITY
    } else {
        bits / rate
    }
}

pub fn comp_latency(flops: f64, compute_rate: f64) -> f64 {
    debug_assert!(compute_rate > 0.0);
    flops / compute_rate
}

/// Joules spent drawing `power` watts for `duration` seconds.
pub fn energy(power: f64, duration: f64) -> f64 {
    power * duration
}

/// Channel variation across slots.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FadingModel {
    #[default]
    Static,
    /// Unit-mean exponential power gains (Rayleigh amplitude), i.i.d. per
    /// slot and device.
    Rayleigh { seed: u64 },
}

/// Precomputed multiplicative gain sequence, slot-major.
#[derive(Clone, Debug)]
pub struct FadingSequence {
    n_devices: usize,
    gains: Vec<f64>,
}

impl FadingSequence {
    pub fn new(model: &FadingModel, n_devices: usize, n_slots: usize) -> Self {
        let gains = match model {
            FadingModel::Static => Vec::new(),
            FadingModel::Rayleigh { seed } => {
                let mut rng = SimRng::new(*seed, streams::FADING);
                (0..n_devices * n_slots).map(|_| -(1.0 - rng.uniform()).ln()).collect()
            }
        };
        Self { n_devices, gains }
    }

    pub fn multiplier(&self, slot: usize, device: usize) -> f64 {
        if self.gains.is_empty() {
            1.0
        } else {
            self.gains[slot * self.n_devices + device]
        }
    }
}
