//! Online scheduling of MoE expert microservices with drift-plus-penalty.
//!
//! Each device keeps a virtual queue of admitted work in FLOPs. Every slot the
//! gate picks experts for the arriving tasks, and the scheduler sends each
//! expert call to one of its live replicas by minimizing
//! `Σᵢ Qᵢ(t)·aᵢ + V·cost` over the candidate assignments.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{comm_latency, energy, shannon_rate, DeviceProfile, FadingModel, FadingSequence};
use crate::rng::{streams, SimRng};

/// Exhaustive candidate enumeration limit per slot.
pub const MAX_CANDIDATES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertMicroservice {
    pub id: u32,
    /// FLOPs per call.
    pub workload_per_call: f64,
    /// bits returned to the server per call.
    pub output_size: f64,
    /// Device indices hosting a replica.
    pub replicas: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeLayer {
    pub experts: Vec<ExpertMicroservice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeNode {
    pub profile: DeviceProfile,
    /// Hz of dedicated uplink.
    pub bandwidth: f64,
    /// A corrupted node is never scheduled.
    #[serde(default)]
    pub failed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VirtualQueue {
    pub device_id: u32,
    /// FLOPs
    pub backlog: f64,
}

/// `Q(t+1) = max(Q(t) + a − b, 0)`.
pub fn queue_update(q: VirtualQueue, arrival: f64, service: f64) -> VirtualQueue {
    VirtualQueue { device_id: q.device_id, backlog: (q.backlog + arrival - service).max(0.0) }
}

/// Indices of the `k` largest scores, lower index first on ties, returned in
/// ascending order.
pub fn gate_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Input(format!("top-{k} of {} experts", scores.len())));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut taken = vec![false; scores.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k <= len");
        taken[b] = true;
        chosen.push(b);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Task graph of expert microservices: each gated expert of layer `l` feeds
/// every gated expert of layer `l + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroserviceDag {
    /// `(layer, expert index)`
    pub nodes: Vec<(usize, usize)>,
    pub edges: Vec<(usize, usize)>,
}

impl MicroserviceDag {
    pub fn from_gating(gated: &[Vec<usize>]) -> Self {
        let mut nodes = Vec::new();
        let mut layer_nodes: Vec<Vec<usize>> = Vec::new();
        for (l, experts) in gated.iter().enumerate() {
            let ids = experts
                .iter()
                .map(|&e| {
                    nodes.push((l, e));
                    nodes.len() - 1
                })
                .collect();
            layer_nodes.push(ids);
        }
        let mut edges = Vec::new();
        for w in layer_nodes.windows(2) {
            for &a in &w[0] {
                for &b in &w[1] {
                    edges.push((a, b));
                }
            }
        }
        Self { nodes, edges }
    }

    /// Kahn's algorithm; `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            indeg[b] += 1;
            out[a].push(b);
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).rev().collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop() {
            order.push(v);
            for &w in out[v].iter().rev() {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    ready.push(w);
                }
            }
        }
        (order.len() == n).then_some(order)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTask {
    pub arrival_slot: usize,
    /// Gate-selected expert indices per layer.
    pub gated: Vec<Vec<usize>>,
    pub dag: MicroserviceDag,
}

impl InferenceTask {
    pub fn new(arrival_slot: usize, gated: Vec<Vec<usize>>) -> Result<Self> {
        let dag = MicroserviceDag::from_gating(&gated);
        if dag.topological_order().is_none() {
            return Err(Error::Input("task graph is cyclic".into()));
        }
        Ok(Self { arrival_slot, gated, dag })
    }
}

/// One expert invocation to be placed this slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertCall {
    pub layer: usize,
    pub expert: usize,
    pub workload: f64,
    pub output_bits: f64,
    /// Live replica device indices, ascending.
    pub replicas: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffKnob(pub f64);

impl TradeoffKnob {
    pub fn new(v: f64) -> Result<Self> {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("V must be finite and nonnegative, got {v}")));
        }
        Ok(Self(v))
    }
}

/// Per-slot cost: `w_lat · latency + w_energy · energy` of returning each
/// expert output over the device uplink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    #[serde(default = "one")]
    pub w_lat: f64,
    #[serde(default)]
    pub w_energy: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w_lat: 1.0, w_energy: 0.0 }
    }
}

/// Cost of sending one call's output from `device` in a given slot.
pub fn call_cost(
    node: &EdgeNode,
    output_bits: f64,
    fading: f64,
    noise_density: f64,
    weights: &CostWeights,
) -> Result<f64> {
    let p = &node.profile;
    let rate = shannon_rate(node.bandwidth, p.channel_gain * fading, p.tx_power, noise_density)?;
    let latency = comm_latency(output_bits, rate);
    Ok(weights.w_lat * latency + weights.w_energy * energy(p.tx_power, latency))
}

/// Work each device would admit under `assignment`.
pub fn arrivals_for(calls: &[ExpertCall], assignment: &[usize], n_devices: usize) -> Vec<f64> {
    let mut a = vec![0.0; n_devices];
    for (call, &d) in calls.iter().zip(assignment) {
        a[d] += call.workload;
    }
    a
}

/// Picks the candidate minimizing `Σᵢ Qᵢ·aᵢ(c) + V·cost(c)`. Ties go to the
/// lexicographically smallest device-id vector. Returns the winning index
/// and its objective value.
pub fn drift_plus_penalty_decision(
    queues: &[VirtualQueue],
    calls: &[ExpertCall],
    candidates: &[Vec<usize>],
    v: TradeoffKnob,
    mut cost: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::Scheduling("no candidate assignments".into()));
    }
    let ids = |c: &[usize]| -> Vec<u32> { c.iter().map(|&d| queues[d].device_id).collect() };
    let mut best: Option<(usize, f64)> = None;
    for (idx, cand) in candidates.iter().enumerate() {
        if cand.len() != calls.len() {
            return Err(Error::Scheduling(format!(
                "candidate covers {} of {} calls",
                cand.len(),
                calls.len()
            )));
        }
        let drift: f64 = arrivals_for(calls, cand, queues.len())
            .iter()
            .zip(queues)
            .map(|(a, q)| q.backlog * a)
            .sum();
        let objective = drift + v.0 * cost(cand)?;
        let better = match best {
            None => true,
            Some((b_idx, b_obj)) => {
                objective < b_obj
                    || (objective == b_obj && ids(cand) < ids(&candidates[b_idx]))
            }
        };
        if better {
            best = Some((idx, objective));
        }
    }
    Ok(best.expect("nonempty"))
}

/// All assignments of calls to live replicas in lexicographic order, or
/// `None` if there are more than [`MAX_CANDIDATES`].
pub fn enumerate_candidates(calls: &[ExpertCall]) -> Option<Vec<Vec<usize>>> {
    let mut count: usize = 1;
    for c in calls {
        count = count.checked_mul(c.replicas.len())?;
        if count > MAX_CANDIDATES {
            return None;
        }
    }
    let mut out = Vec::with_capacity(count);
    let mut digits = vec![0usize; calls.len()];
    loop {
        out.push(calls.iter().zip(&digits).map(|(c, &i)| c.replicas[i]).collect());
        let mut pos = calls.len();
        loop {
            if pos == 0 {
                return Some(out);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < calls[pos].replicas.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ArrivalModel {
    /// Exactly `tasks` tasks per slot.
    Fixed { tasks: usize },
    /// Each of `tasks` potential tasks arrives independently with `prob`.
    Bernoulli { tasks: usize, prob: f64 },
}

impl ArrivalModel {
    pub fn mean_tasks(&self) -> f64 {
        match *self {
            ArrivalModel::Fixed { tasks } => tasks as f64,
            ArrivalModel::Bernoulli { tasks, prob } => tasks as f64 * prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSystem {
    pub nodes: Vec<EdgeNode>,
    pub layers: Vec<MoeLayer>,
    pub top_k: usize,
    /// W/Hz
    pub noise_density: f64,
    #[serde(default = "default_slot")]
    pub slot_duration: f64,
    #[serde(default)]
    pub cost: CostWeights,
    #[serde(default)]
    pub fading: FadingModel,
}

fn default_slot() -> f64 {
    crate::netsim::DEFAULT_SLOT_DURATION
}

impl MoeSystem {
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Config("moe needs at least one device".into()));
        }
        for n in &self.nodes {
            n.profile.validate()?;
            if !(n.bandwidth >= 0.0) {
                return Err(Error::Config(format!("device {} bandwidth must be >= 0", n.profile.id)));
            }
        }
        if self.layers.is_empty() {
            return Err(Error::Config("moe needs at least one layer".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if self.top_k == 0 || self.top_k > layer.experts.len() {
                return Err(Error::Config(format!(
                    "top_k = {} but layer {l} has {} experts",
                    self.top_k,
                    layer.experts.len()
                )));
            }
            for e in &layer.experts {
                if !(e.workload_per_call > 0.0) || e.replicas.is_empty() {
                    return Err(Error::Config(format!(
                        "expert {} needs positive workload and at least one replica",
                        e.id
                    )));
                }
                if let Some(&r) = e.replicas.iter().find(|&&r| r >= self.nodes.len()) {
                    return Err(Error::Config(format!("expert {} replica {r} is not a device", e.id)));
                }
            }
        }
        if !(self.noise_density > 0.0) || !(self.slot_duration > 0.0) {
            return Err(Error::Config("noise_density and slot_duration must be positive".into()));
        }
        Ok(())
    }

    pub fn service_per_slot(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.profile.compute_rate * self.slot_duration).collect()
    }

    /// Expected FLOPs arriving per task: top-k experts per layer, averaged
    /// over experts (scores are exchangeable).
    pub fn mean_task_work(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                let mean = l.experts.iter().map(|e| e.workload_per_call).sum::<f64>() / l.experts.len() as f64;
                mean * self.top_k as f64
            })
            .sum()
    }

    /// Expert calls generated by `tasks`, each restricted to live replicas.
    pub fn expert_calls(&self, tasks: &[InferenceTask]) -> Result<Vec<ExpertCall>> {
        let mut calls = Vec::new();
        for task in tasks {
            for (l, experts) in task.gated.iter().enumerate() {
                for &e in experts {
                    let ex = &self.layers[l].experts[e];
                    let mut replicas: Vec<usize> =
                        ex.replicas.iter().copied().filter(|&d| !self.nodes[d].failed).collect();
                    replicas.sort_unstable();
                    replicas.dedup();
                    if replicas.is_empty() {
                        return Err(Error::Scheduling(format!(
                            "expert {} has no live replica",
                            ex.id
                        )));
                    }
                    calls.push(ExpertCall {
                        layer: l,
                        expert: e,
                        workload: ex.workload_per_call,
                        output_bits: ex.output_size,
                        replicas,
                    });
                }
            }
        }
        Ok(calls)
    }
}

/// Seeded task stream: arrivals from `arrivals`, gate scores uniform in [0, 1).
pub fn generate_task_stream(
    system: &MoeSystem,
    arrivals: &ArrivalModel,
    slots: usize,
    seed: u64,
) -> Result<Vec<Vec<InferenceTask>>> {
    let mut gate_rng = SimRng::new(seed, streams::MOE_GATE);
    let mut arrival_rng = SimRng::new(seed, streams::MOE_ARRIVALS);
    let mut stream = Vec::with_capacity(slots);
    for t in 0..slots {
        let n = match *arrivals {
            ArrivalModel::Fixed { tasks } => tasks,
            ArrivalModel::Bernoulli { tasks, prob } => {
                (0..tasks).filter(|_| arrival_rng.uniform() < prob).count()
            }
        };
        let mut tasks = Vec::with_capacity(n);
        for _ in 0..n {
            let gated = system
                .layers
                .iter()
                .map(|l| {
                    let scores: Vec<f64> = (0..l.experts.len()).map(|_| gate_rng.uniform()).collect();
                    gate_select(&scores, system.top_k)
                })
                .collect::<Result<Vec<_>>>()?;
            tasks.push(InferenceTask::new(t, gated)?);
        }
        stream.push(tasks);
    }
    Ok(stream)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotRecord {
    pub slot: usize,
    /// Device id per expert call, in call order.
    pub assignment: Vec<u32>,
    pub slot_cost: f64,
    pub backlog_before: Vec<f64>,
    pub backlog: Vec<f64>,
    /// Whether the slot was decided by exhaustive enumeration.
    pub exhaustive: bool,
    pub calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrchestrationTrace {
    pub v: f64,
    pub slots: Vec<SlotRecord>,
    pub time_avg_cost: f64,
    /// Time average of the total backlog `Σᵢ Qᵢ(t)`.
    pub time_avg_backlog: f64,
    pub max_device_backlog: f64,
}

/// Runs the scheduler over `stream` (one entry per slot).
pub fn orchestrate(system: &MoeSystem, stream: &[Vec<InferenceTask>], v: TradeoffKnob) -> Result<OrchestrationTrace> {
    system.validate()?;
    if stream.is_empty() {
        return Err(Error::Input("orchestration needs at least one slot".into()));
    }
    let n = system.nodes.len();
    let fading = FadingSequence::new(&system.fading, n, stream.len());
    let service = system.service_per_slot();
    let mut queues: Vec<VirtualQueue> = system
        .nodes
        .iter()
        .map(|node| VirtualQueue { device_id: node.profile.id, backlog: 0.0 })
        .collect();

    let mut records = Vec::with_capacity(stream.len());
    let (mut cost_sum, mut backlog_sum, mut max_device_backlog) = (0.0, 0.0, 0.0f64);
    for (t, tasks) in stream.iter().enumerate() {
        let calls = system.expert_calls(tasks)?;
        // cost of each (call, device) pair this slot
        let unit_cost = |call: &ExpertCall, d: usize| {
            call_cost(&system.nodes[d], call.output_bits, fading.multiplier(t, d), system.noise_density, &system.cost)
        };
        let (assignment, exhaustive) = match enumerate_candidates(&calls) {
            Some(cands) => {
                let (idx, _) = drift_plus_penalty_decision(&queues, &calls, &cands, v, |c| {
                    let mut total = 0.0;
                    for (call, &d) in calls.iter().zip(c) {
                        total += unit_cost(call, d)?;
                    }
                    Ok(total)
                })?;
                (cands[idx].clone(), true)
            }
            None => {
                // The objective is additive over calls, so the per-call argmin
                // is also the slot-wide argmin.
                let mut chosen = Vec::with_capacity(calls.len());
                for call in &calls {
                    let mut best: Option<(usize, f64)> = None;
                    for &d in &call.replicas {
                        let obj = queues[d].backlog * call.workload + v.0 * unit_cost(call, d)?;
                        let better = match best {
                            None => true,
                            Some((bd, bo)) => obj < bo || (obj == bo && queues[d].device_id < queues[bd].device_id),
                        };
                        if better {
                            best = Some((d, obj));
                        }
                    }
                    chosen.push(best.expect("live replica").0);
                }
                (chosen, false)
            }
        };

        let mut slot_cost = 0.0;
        for (call, &d) in calls.iter().zip(&assignment) {
            slot_cost += unit_cost(call, d)?;
        }
        let arrivals = arrivals_for(&calls, &assignment, n);
        let backlog_before: Vec<f64> = queues.iter().map(|q| q.backlog).collect();
        for ((q, &a), &b) in queues.iter_mut().zip(&arrivals).zip(&service) {
            *q = queue_update(*q, a, b);
        }
        let backlog: Vec<f64> = queues.iter().map(|q| q.backlog).collect();
        let total: f64 = backlog.iter().sum();
        cost_sum += slot_cost;
        backlog_sum += total;
        max_device_backlog = max_device_backlog.max(backlog.iter().copied().fold(0.0, f64::max));
        records.push(SlotRecord {
            slot: t,
            assignment: assignment.iter().map(|&d| system.nodes[d].profile.id).collect(),
            slot_cost,
            backlog_before,
            backlog,
            exhaustive,
            calls: calls.len(),
        });
    }
    let slots = stream.len() as f64;
    Ok(OrchestrationTrace {
        v: v.0,
        slots: records,
        time_avg_cost: cost_sum / slots,
        time_avg_backlog: backlog_sum / slots,
        max_device_backlog,
    })
}

/// Header: `slot,assignment,slot_cost,backlog_<id>...` with `;`-joined
/// device ids in the assignment column.
pub fn write_trace_csv<W: Write>(out: &mut W, system: &MoeSystem, trace: &OrchestrationTrace) -> std::io::Result<()> {
    write!(out, "slot,assignment,slot_cost")?;
    for n in &system.nodes {
        write!(out, ",backlog_{}", n.profile.id)?;
    }
    writeln!(out)?;
    for r in &trace.slots {
        let assignment: Vec<String> = r.assignment.iter().map(u32::to_string).collect();
        write!(out, "{},{},{}", r.slot, assignment.join(";"), r.slot_cost)?;
        for b in &r.backlog {
            write!(out, ",{b}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Least-squares slope of `ys` against their index.
pub fn regression_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx
}
