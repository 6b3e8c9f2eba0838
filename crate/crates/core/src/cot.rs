//! Placement of chain-of-thought step microservices on edge devices.
//!
//! A chain of reasoning steps is mapped one step per device slot; the cost is
//! compute time plus handoff time between consecutive steps on different
//! devices, subject to per-device memory capacity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{comm_latency, comp_latency, shannon_rate, DeviceProfile};
use crate::rng::{streams, SimRng};

/// Enumeration guard for [`solve_exact`].
pub const MAX_EXACT_PLACEMENTS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotStep {
    /// FLOPs
    pub workload: f64,
    /// bits passed to the next step
    pub handoff_size: f64,
    /// bytes of model shard hosted with the step
    #[serde(default)]
    pub shard_bytes: f64,
}

impl CotStep {
    /// Bytes the step occupies on its device.
    pub fn memory_footprint(&self) -> f64 {
        self.handoff_size / 8.0 + self.shard_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CotChain {
    steps: Vec<CotStep>,
}

impl CotChain {
    pub fn new(steps: Vec<CotStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Input("chain needs at least one step".into()));
        }
        for (i, s) in steps.iter().enumerate() {
            if !(s.workload >= 0.0 && s.handoff_size >= 0.0 && s.shard_bytes >= 0.0)
                || !(s.workload + s.handoff_size + s.shard_bytes).is_finite()
            {
                return Err(Error::Input(format!("step {i} has a negative or non-finite size")));
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[CotStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step flow edges `(s, s + 1)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (1..self.steps.len()).map(|s| (s - 1, s)).collect()
    }
}

/// True iff the undirected graph on `n` nodes is connected, acyclic, and has
/// no node of degree above 2.
pub fn path_graph_check(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    // a tree has exactly n - 1 edges
    if edges.len() != n - 1 {
        return false;
    }
    let mut degree = vec![0usize; n];
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        if a >= n || b >= n || a == b {
            return false;
        }
        degree[a] += 1;
        degree[b] += 1;
        if degree[a] > 2 || degree[b] > 2 {
            return false;
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return false;
        }
        parent[ra] = rb;
    }
    true
}

/// Full-mesh link rates in bit/s; `rate[i][j]` is the rate from device `i`
/// to device `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkRates {
    pub rate: Vec<Vec<f64>>,
}

impl LinkRates {
    /// Shannon rates from a gain matrix, transmitting at each sender's power.
    pub fn from_gains(
        devices: &[DeviceProfile],
        gains: &[Vec<f64>],
        bandwidth: f64,
        noise_density: f64,
    ) -> Result<Self> {
        let n = devices.len();
        if gains.len() != n || gains.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("gain matrix must be {n}x{n}")));
        }
        let mut rate = vec![vec![f64::INFINITY; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    rate[i][j] = shannon_rate(bandwidth, gains[i][j], devices[i].tx_power, noise_density)?;
                }
            }
        }
        Ok(Self { rate })
    }

    pub fn uniform(n: usize, rate: f64) -> Self {
        Self { rate: vec![vec![rate; n]; n] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CotInstance {
    pub chain: CotChain,
    pub devices: Vec<DeviceProfile>,
    pub links: LinkRates,
}

impl CotInstance {
    pub fn new(chain: CotChain, devices: Vec<DeviceProfile>, links: LinkRates) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::Input("placement needs at least one device".into()));
        }
        for d in &devices {
            d.validate()?;
        }
        let n = devices.len();
        if links.rate.len() != n || links.rate.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("link matrix must be {n}x{n}")));
        }
        Ok(Self { chain, devices, links })
    }

    fn steps(&self) -> usize {
        self.chain.len()
    }

    fn n_devices(&self) -> usize {
        self.devices.len()
    }

    fn step_cost(&self, s: usize, d: usize, prev: Option<usize>) -> f64 {
        let step = &self.chain.steps[s];
        let mut c = comp_latency(step.workload, self.devices[d].compute_rate);
        if let Some(p) = prev {
            if p != d {
                c += comm_latency(self.chain.steps[s - 1].handoff_size, self.links.rate[p][d]);
            }
        }
        c
    }
}

/// Step to device index map.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement(pub Vec<usize>);

impl Placement {
    /// Binary indicator `x[s][d]`.
    pub fn indicator(&self, n_devices: usize) -> Vec<Vec<u8>> {
        self.0
            .iter()
            .map(|&d| (0..n_devices).map(|j| u8::from(j == d)).collect())
            .collect()
    }

    pub fn from_indicator(x: &[Vec<u8>]) -> Result<Self> {
        x.iter()
            .enumerate()
            .map(|(s, row)| {
                let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1).map(|(d, _)| d).collect();
                if ones.len() != 1 || row.iter().any(|&v| v > 1) {
                    return Err(Error::Constraint(format!("step {s} is not placed on exactly one device")));
                }
                Ok(ones[0])
            })
            .collect::<Result<Vec<_>>>()
            .map(Placement)
    }
}

/// Bytes hosted on each device.
pub fn memory_load(inst: &CotInstance, placement: &Placement) -> Vec<f64> {
    let mut load = vec![0.0; inst.n_devices()];
    for (step, &d) in inst.chain.steps.iter().zip(&placement.0) {
        if d < load.len() {
            load[d] += step.memory_footprint();
        }
    }
    load
}

/// Checks one device per step and memory capacity.
pub fn validate_placement(inst: &CotInstance, placement: &Placement) -> Result<()> {
    if placement.0.len() != inst.steps() {
        return Err(Error::Constraint(format!(
            "placement has {} entries for {} steps",
            placement.0.len(),
            inst.steps()
        )));
    }
    if let Some(&d) = placement.0.iter().find(|&&d| d >= inst.n_devices()) {
        return Err(Error::Constraint(format!("device index {d} out of range")));
    }
    let x = placement.indicator(inst.n_devices());
    if x.iter().any(|row| row.iter().map(|&v| v as u32).sum::<u32>() != 1) {
        return Err(Error::Constraint("step not placed exactly once".into()));
    }
    for (d, load) in memory_load(inst, placement).iter().enumerate() {
        if *load > inst.devices[d].memory_capacity {
            return Err(Error::Constraint(format!(
                "device {} holds {load} bytes over capacity {}",
                inst.devices[d].id, inst.devices[d].memory_capacity
            )));
        }
    }
    Ok(())
}

/// End-to-end latency in seconds.
pub fn placement_cost(inst: &CotInstance, placement: &Placement) -> Result<f64> {
    validate_placement(inst, placement)?;
    Ok(unchecked_cost(inst, &placement.0))
}

fn unchecked_cost(inst: &CotInstance, p: &[usize]) -> f64 {
    let mut total = 0.0;
    for (s, &d) in p.iter().enumerate() {
        total += inst.step_cost(s, d, s.checked_sub(1).map(|q| p[q]));
    }
    total
}

fn fits(inst: &CotInstance, p: &[usize]) -> bool {
    let load = memory_load(inst, &Placement(p.to_vec()));
    load.iter().zip(&inst.devices).all(|(l, d)| *l <= d.memory_capacity)
}

/// Minimal-cost feasible placement by full enumeration.
pub fn solve_exact(inst: &CotInstance) -> Result<Placement> {
    let (s, d) = (inst.steps(), inst.n_devices());
    if (d as f64).powi(s as i32) > MAX_EXACT_PLACEMENTS {
        return Err(Error::Size(format!("{d}^{s} placements exceeds the enumeration guard")));
    }
    let mut p = vec![0usize; s];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if fits(inst, &p) {
            let c = unchecked_cost(inst, &p);
            // enumeration is lexicographic, so strict improvement keeps the smallest vector on ties
            if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                best = Some((c, p.clone()));
            }
        }
        let mut pos = s;
        loop {
            if pos == 0 {
                return best
                    .map(|(_, v)| Placement(v))
                    .ok_or_else(|| Error::Infeasible("no placement fits device memory".into()));
            }
            pos -= 1;
            p[pos] += 1;
            if p[pos] < d {
                break;
            }
            p[pos] = 0;
        }
    }
}

/// Each step in order to the device with the lowest marginal cost that still
/// has room.
pub fn greedy_placement(inst: &CotInstance) -> Result<Placement> {
    let mut remaining: Vec<f64> = inst.devices.iter().map(|d| d.memory_capacity).collect();
    let mut p: Vec<usize> = Vec::with_capacity(inst.steps());
    for s in 0..inst.steps() {
        let need = inst.chain.steps[s].memory_footprint();
        let prev = p.last().copied();
        let mut best: Option<(usize, f64)> = None;
        for d in 0..inst.n_devices() {
            if need > remaining[d] {
                continue;
            }
            let c = inst.step_cost(s, d, prev);
            if best.is_none_or(|(_, bc)| c < bc) {
                best = Some((d, c));
            }
        }
        let (d, _) = best.ok_or_else(|| Error::Infeasible(format!("greedy start finds no room for step {s}")))?;
        remaining[d] -= need;
        p.push(d);
    }
    Ok(Placement(p))
}

/// Greedy start, then strict-improvement single-step moves in a seeded
/// order. Once a local optimum is reached, remaining iterations restart from
/// a random perturbation of the best placement. `iters == 1` returns the
/// greedy placement.
pub fn solve_local_search(inst: &CotInstance, seed: u64, iters: usize) -> Result<Placement> {
    if iters == 0 {
        return Err(Error::Input("local search needs iters >= 1".into()));
    }
    let start = greedy_placement(inst)?;
    let mut rng = SimRng::new(seed, streams::COT_SEARCH);
    let mut best = start.0.clone();
    let mut best_cost = unchecked_cost(inst, &best);
    let mut cur = best.clone();
    let mut cur_cost = best_cost;
    let (s_n, d_n) = (inst.steps(), inst.n_devices());
    let mut moves: Vec<(usize, usize)> = (0..s_n).flat_map(|s| (0..d_n).map(move |d| (s, d))).collect();

    for _ in 1..iters {
        rng.shuffle(&mut moves);
        let mut improved = false;
        for &(s, d) in &moves {
            if cur[s] == d {
                continue;
            }
            let old = cur[s];
            cur[s] = d;
            if fits(inst, &cur) {
                let c = unchecked_cost(inst, &cur);
                if c < cur_cost {
                    cur_cost = c;
                    improved = true;
                    break;
                }
            }
            cur[s] = old;
        }
        if cur_cost < best_cost {
            best_cost = cur_cost;
            best = cur.clone();
        }
        if !improved {
            // local optimum: perturb the incumbent
            let mut trial = best.clone();
            let kicks = 1 + rng.index(s_n.max(2) / 2 + 1);
            for _ in 0..kicks {
                let s = rng.index(s_n);
                trial[s] = rng.index(d_n);
            }
            if fits(inst, &trial) {
                cur_cost = unchecked_cost(inst, &trial);
                cur = trial;
            } else {
                cur = best.clone();
                cur_cost = best_cost;
            }
            if cur_cost < best_cost {
                best_cost = cur_cost;
                best = cur.clone();
            }
        }
    }
    Ok(Placement(best))
}

/// Relative gap `(heuristic − exact) / exact`, 0 when both are 0.
pub fn optimality_gap(heuristic: f64, exact: f64) -> f64 {
    if exact == 0.0 {
        if heuristic == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (heuristic - exact) / exact
    }
}

/// On-disk instance description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotInstanceSpec {
    pub steps: Vec<CotStep>,
    pub devices: Vec<DeviceProfile>,
    /// Full-mesh channel gains, sender-major.
    pub gains: Vec<Vec<f64>>,
    /// Hz per link
    pub link_bandwidth: f64,
    /// W/Hz
    pub noise_density: f64,
}

impl CotInstanceSpec {
    pub fn build(&self) -> Result<CotInstance> {
        for d in &self.devices {
            d.validate()?;
        }
        let links = LinkRates::from_gains(&self.devices, &self.gains, self.link_bandwidth, self.noise_density)?;
        CotInstance::new(CotChain::new(self.steps.clone())?, self.devices.clone(), links)
    }

    /// Seeded instance with `steps` steps and `devices` devices.
    pub fn random(rng: &mut SimRng, steps: usize, devices: usize) -> Self {
        let steps = (0..steps)
            .map(|_| CotStep {
                workload: rng.range(1e9, 1e10),
                handoff_size: rng.range(1e6, 1e7),
                shard_bytes: rng.range(1e8, 6e8),
            })
            .collect();
        let devices = (0..devices)
            .map(|i| DeviceProfile {
                id: i as u32,
                compute_rate: rng.range(1e9, 5e9),
                memory_capacity: rng.range(8e8, 2e9),
                channel_gain: 1.0,
                tx_power: rng.range(0.2, 1.0),
                local_rank: 1,
            })
            .collect::<Vec<_>>();
        let n = devices.len();
        let gains = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.range(2e-5, 2e-3) }).collect())
            .collect();
        Self { steps, devices, gains, link_bandwidth: 1e6, noise_density: 1e-12 }
    }
}

/// Seeded batch of feasible random instances with `S, D` drawn from
/// `1..=max_steps` and `1..=max_devices`.
pub fn random_instances(seed: u64, count: usize, max_steps: usize, max_devices: usize) -> Result<Vec<CotInstanceSpec>> {
    let mut rng = SimRng::new(seed, streams::COT_INSTANCE);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = 1 + rng.index(max_steps);
        let d = 1 + rng.index(max_devices);
        let spec = CotInstanceSpec::random(&mut rng, s, d);
        let inst = spec.build()?;
        if greedy_placement(&inst).is_ok() {
            out.push(spec);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CotResult {
    pub solver: String,
    pub placement: Vec<u32>,
    pub cost_s: f64,
    pub gap_to_exact: Option<f64>,
}
