//! Joint device selection and uplink bandwidth allocation.
//!
//! For a fixed subset, the smallest achievable round latency (slowest device's
//! compute + upload time) is found by bisection on a target latency `τ`: each
//! device needs the least bandwidth whose Shannon rate uploads its adapter
//! within `τ − compute time`, and `τ` is feasible when those shares fit in the
//! band. Subsets are searched exhaustively for up to [`MAX_EXHAUSTIVE_DEVICES`]
//! devices.

use crate::error::{Error, Result};
use crate::netsim::{
    comm_latency, comp_latency, min_bandwidth_for_rate, shannon_rate, shannon_rate_limit,
    ChannelAllocation, DeviceProfile,
};

pub const MAX_EXHAUSTIVE_DEVICES: usize = 12;

const TAU_ITERS: usize = 200;

/// Per-round workload each candidate device would carry.
#[derive(Clone, Debug)]
pub struct SelectionProblem<'a> {
    pub profiles: &'a [DeviceProfile],
    pub total_bandwidth: f64,
    pub noise_density: f64,
    pub upload_bits: &'a [f64],
    pub local_flops: &'a [f64],
    /// Round latency budget in seconds.
    pub deadline: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Indices into the profile list, ascending.
    pub selected: Vec<usize>,
    /// Bandwidth per profile (zero for devices left out).
    pub allocation: ChannelAllocation,
    /// Max over selected devices of compute + upload time, in seconds.
    pub round_latency: f64,
}

impl Selection {
    pub fn selected_ids(&self, profiles: &[DeviceProfile]) -> Vec<u32> {
        self.selected.iter().map(|&i| profiles[i].id).collect()
    }
}

impl SelectionProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.profiles.len();
        if n == 0 {
            return Err(Error::Input("device selection needs at least one device".into()));
        }
        if self.upload_bits.len() != n || self.local_flops.len() != n {
            return Err(Error::Input("per-device workload lists must match the device list".into()));
        }
        if !(self.total_bandwidth > 0.0) {
            return Err(Error::Domain("total bandwidth must be positive".into()));
        }
        if !(self.noise_density > 0.0) {
            return Err(Error::Domain("noise density must be positive".into()));
        }
        for p in self.profiles {
            p.validate()?;
        }
        if self.upload_bits.iter().chain(self.local_flops).any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("workloads must be nonnegative".into()));
        }
        Ok(())
    }

    /// Minimal bandwidth shares that let every device in `subset` finish by
    /// `tau`, or `None` if they do not fit in the band.
    fn shares_for(&self, subset: &[usize], tau: f64) -> Result<Option<Vec<f64>>> {
        let mut shares = Vec::with_capacity(subset.len());
        let mut used = 0.0;
        for &i in subset {
            let p = &self.profiles[i];
            let slack = tau - comp_latency(self.local_flops[i], p.compute_rate);
            let bits = self.upload_bits[i];
            if bits == 0.0 {
                if slack < 0.0 {
                    return Ok(None);
                }
                shares.push(0.0);
                continue;
            }
            if slack <= 0.0 {
                return Ok(None);
            }
            let required = bits / slack;
            if required >= shannon_rate_limit(p.channel_gain, p.tx_power, self.noise_density) {
                return Ok(None);
            }
            let Some(b) = min_bandwidth_for_rate(
                required,
                p.channel_gain,
                p.tx_power,
                self.noise_density,
                self.total_bandwidth,
            )?
            else {
                return Ok(None);
            };
            used += b;
            if used > self.total_bandwidth {
                return Ok(None);
            }
            shares.push(b);
        }
        Ok(Some(shares))
    }

    fn latency_of(&self, i: usize, bandwidth: f64) -> Result<f64> {
        let p = &self.profiles[i];
        let rate = shannon_rate(bandwidth, p.channel_gain, p.tx_power, self.noise_density)?;
        Ok(comp_latency(self.local_flops[i], p.compute_rate) + comm_latency(self.upload_bits[i], rate))
    }

    /// Min-max latency allocation for one subset: `(latency, shares)`.
    pub fn solve_subset(&self, subset: &[usize]) -> Result<Option<(f64, Vec<f64>)>> {
        if subset.is_empty() {
            return Ok(None);
        }
        let equal = self.total_bandwidth / subset.len() as f64;
        let mut hi = 0.0f64;
        for &i in subset {
            hi = hi.max(self.latency_of(i, equal)?);
        }
        if !hi.is_finite() {
            return Ok(None);
        }
        let mut lo = subset
            .iter()
            .map(|&i| comp_latency(self.local_flops[i], self.profiles[i].compute_rate))
            .fold(0.0, f64::max);

        // The equal split is feasible; nudge past bisection round-off if needed.
        let mut best = None;
        for _ in 0..60 {
            if let Some(s) = self.shares_for(subset, hi)? {
                best = Some(s);
                break;
            }
            hi *= 1.0 + 1e-12;
        }
        let Some(mut shares) = best else {
            return Ok(None);
        };

        if let Some(s) = self.shares_for(subset, lo)? {
            shares = s;
        } else {
            for _ in 0..TAU_ITERS {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                match self.shares_for(subset, mid)? {
                    Some(s) => {
                        hi = mid;
                        shares = s;
                    }
                    None => lo = mid,
                }
            }
        }

        // Hand leftover band to the devices in proportion to their shares;
        // more bandwidth never slows a device down.
        let used: f64 = shares.iter().sum();
        if used > 0.0 {
            let factor = self.total_bandwidth / used;
            for s in shares.iter_mut() {
                *s *= factor;
            }
            for _ in 0..8 {
                let over = shares.iter().sum::<f64>() - self.total_bandwidth;
                if over <= 0.0 {
                    break;
                }
                let (imax, _) = shares
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
                shares[imax] = (shares[imax] - over.max(shares[imax] * f64::EPSILON)).max(0.0);
            }
        }

        let mut latency = 0.0f64;
        for (&i, &b) in subset.iter().zip(&shares) {
            latency = latency.max(self.latency_of(i, b)?);
        }
        Ok(Some((latency, shares)))
    }

    fn make_selection(&self, subset: Vec<usize>, latency: f64, shares: Vec<f64>) -> Result<Selection> {
        let mut bandwidth = vec![0.0; self.profiles.len()];
        for (&i, b) in subset.iter().zip(shares) {
            bandwidth[i] = b;
        }
        Ok(Selection {
            selected: subset,
            allocation: ChannelAllocation::new(bandwidth, self.noise_density, self.total_bandwidth)?,
            round_latency: latency,
        })
    }
}

fn ids_of(profiles: &[DeviceProfile], subset: &[usize]) -> Vec<u32> {
    subset.iter().map(|&i| profiles[i].id).collect()
}

/// Exhaustive search: the largest subset meeting the deadline, ties broken by
/// lower latency and then by the lexicographically smaller id list.
pub fn select_devices_and_bandwidth(problem: &SelectionProblem<'_>) -> Result<Selection> {
    problem.validate()?;
    let n = problem.profiles.len();
    if n > MAX_EXHAUSTIVE_DEVICES {
        return Err(Error::Size(format!(
            "{n} devices exceed the exhaustive limit of {MAX_EXHAUSTIVE_DEVICES}; \
             enable the greedy selection fallback"
        )));
    }
    for size in (1..=n).rev() {
        let mut best: Option<(Vec<usize>, f64, Vec<f64>)> = None;
        for mask in 1u32..(1u32 << n) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let Some((latency, shares)) = problem.solve_subset(&subset)? else {
                continue;
            };
            if latency > problem.deadline {
                continue;
            }
            let better = match &best {
                None => true,
                Some((b_subset, b_lat, _)) => {
                    latency < *b_lat
                        || (latency == *b_lat
                            && ids_of(problem.profiles, &subset) < ids_of(problem.profiles, b_subset))
                }
            };
            if better {
                best = Some((subset, latency, shares));
            }
        }
        if let Some((subset, latency, shares)) = best {
            return problem.make_selection(subset, latency, shares);
        }
    }
    Err(Error::Infeasible(format!(
        "no device subset meets the {} s round deadline",
        problem.deadline
    )))
}

/// Fallback for large device pools: start from everyone and repeatedly drop
/// the device that is slowest under the current min-max allocation.
pub fn select_devices_greedy(problem: &SelectionProblem<'_>) -> Result<Selection> {
    problem.validate()?;
    let mut subset: Vec<usize> = (0..problem.profiles.len()).collect();
    while !subset.is_empty() {
        match problem.solve_subset(&subset)? {
            Some((latency, shares)) if latency <= problem.deadline => {
                return problem.make_selection(subset, latency, shares);
            }
            Some((_, shares)) => {
                let mut worst = 0;
                let mut worst_lat = f64::MIN;
                for (pos, (&i, &b)) in subset.iter().zip(&shares).enumerate() {
                    let lat = problem.latency_of(i, b)?;
                    if lat > worst_lat {
                        worst_lat = lat;
                        worst = pos;
                    }
                }
                subset.remove(worst);
            }
            None => {
                // some device can never upload; drop the one with the weakest link
                let pos = subset
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let pa = &problem.profiles[*a.1];
                        let pb = &problem.profiles[*b.1];
                        (pa.channel_gain * pa.tx_power)
                            .partial_cmp(&(pb.channel_gain * pb.tx_power))
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .map(|(pos, _)| pos)
                    .unwrap_or(0);
                subset.remove(pos);
            }
        }
    }
    Err(Error::Infeasible(format!(
        "no device subset meets the {} s round deadline",
        problem.deadline
    )))
}
