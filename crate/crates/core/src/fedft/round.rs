//! The federated fine-tuning round loop on a synthetic regression task.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::lora::{aggregate_hetero, lora_sgd_step, mse_loss, truncate, zero_pad, FrozenBase, LoraAdapter, Sample};
use super::selection::{select_devices_and_bandwidth, select_devices_greedy, SelectionProblem};
use crate::error::{Error, Result};
use crate::netsim::{comm_latency, comp_latency, DeviceProfile};
use crate::numerics::Matrix;
use crate::rng::{streams, SimRng};

/// Ground-truth generator: `y = (W0 + A*·B*) x + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    /// Output dimension `d`.
    pub rows: usize,
    /// Input dimension `k`.
    pub cols: usize,
    pub true_rank: usize,
    pub noise_std: f64,
    /// Samples held by each device, aligned with the device list.
    pub samples_per_device: Vec<usize>,
    /// Standard deviation of the initial `A` factor (`B` starts at zero).
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedFtConfig {
    pub lr: f64,
    /// Hz
    pub total_bandwidth: f64,
    /// W/Hz
    pub noise_density: f64,
    /// Uplink-phase deadline for device selection, seconds.
    #[serde(default = "default_deadline")]
    pub deadline: f64,
    #[serde(default = "default_bits_per_param")]
    pub bits_per_param: f64,
    /// FLOPs charged per sample per multiply-accumulate of the adapted layer.
    #[serde(default = "default_flops_per_mac")]
    pub flops_per_mac: f64,
    /// Use the greedy selection fallback instead of exhaustive search.
    #[serde(default)]
    pub greedy_selection: bool,
}

fn default_deadline() -> f64 {
    f64::MAX
}

fn default_bits_per_param() -> f64 {
    32.0
}

fn default_flops_per_mac() -> f64 {
    6.0
}

impl FedFtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("fedft.lr must be positive".into()));
        }
        if !(self.total_bandwidth > 0.0) {
            return Err(Error::Config("fedft.total_bandwidth must be positive".into()));
        }
        if !(self.noise_density > 0.0) {
            return Err(Error::Config("fedft.noise_density must be positive".into()));
        }
        if !(self.deadline > 0.0) {
            return Err(Error::Config("fedft.deadline must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedFtState {
    pub round: usize,
    pub base: FrozenBase,
    /// Server-side adapter at the largest enrolled rank.
    pub global: LoraAdapter,
    /// What each device currently holds, at its own rank.
    pub device_adapters: Vec<LoraAdapter>,
    pub datasets: Vec<Vec<Sample>>,
}

/// Outcome of one round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_loss: f64,
    pub round_latency_s: f64,
    pub selected_ids: Vec<u32>,
    /// Hz, aligned with `selected_ids`.
    pub bandwidth: Vec<f64>,
}

impl FedFtState {
    /// Builds the synthetic task: frozen base, ground-truth adapter and one
    /// dataset per device. The global adapter starts with Gaussian `A` and zero
    /// `B`, so the initial effective update is zero.
    pub fn synthetic(task: &SyntheticTask, profiles: &[DeviceProfile], seed: u64) -> Result<Self> {
        if task.samples_per_device.len() != profiles.len() {
            return Err(Error::Config(format!(
                "samples_per_device lists {} devices, scenario has {}",
                task.samples_per_device.len(),
                profiles.len()
            )));
        }
        if task.samples_per_device.contains(&0) {
            return Err(Error::Config("every device needs at least one sample".into()));
        }
        let (d, k) = (task.rows, task.cols);
        let limit = d.min(k);
        if task.true_rank < 1 || task.true_rank > limit {
            return Err(Error::Config(format!("true_rank must lie in [1, {limit}]")));
        }
        for p in profiles {
            p.validate()?;
            if p.local_rank > limit {
                return Err(Error::Config(format!(
                    "device {} rank {} exceeds min(d, k) = {limit}",
                    p.id, p.local_rank
                )));
            }
        }

        let mut data_rng = SimRng::new(seed, streams::FEDFT_DATA);
        let w0 = Matrix::from_fn(d, k, |_, _| data_rng.gaussian() / (k as f64).sqrt());
        let a_true = Matrix::from_fn(d, task.true_rank, |_, _| data_rng.gaussian());
        let b_true = Matrix::from_fn(task.true_rank, k, |_, _| data_rng.gaussian() / (k as f64).sqrt());
        let w_true = w0.add(&a_true.matmul(&b_true)?)?;
        let datasets = task
            .samples_per_device
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| {
                        let x: Vec<f64> = (0..k).map(|_| data_rng.gaussian()).collect();
                        let mut y = w_true.mul_vec(&x)?;
                        for v in y.iter_mut() {
                            *v += task.noise_std * data_rng.gaussian();
                        }
                        Ok(Sample { x, y })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let r_max = profiles.iter().map(|p| p.local_rank).max().unwrap_or(1);
        let mut init_rng = SimRng::new(seed, streams::FEDFT_INIT);
        let global = LoraAdapter::new(
            Matrix::from_fn(d, r_max, |_, _| task.init_scale * init_rng.gaussian()),
            Matrix::zeros(r_max, k),
        )?;
        Self::new(FrozenBase::new(w0), global, profiles, datasets)
    }

    pub fn new(
        base: FrozenBase,
        global: LoraAdapter,
        profiles: &[DeviceProfile],
        datasets: Vec<Vec<Sample>>,
    ) -> Result<Self> {
        let r_max = profiles.iter().map(|p| p.local_rank).max().unwrap_or(1);
        if global.rank() != r_max {
            return Err(Error::Rank(format!(
                "global adapter rank {} but largest device rank is {r_max}",
                global.rank()
            )));
        }
        if datasets.len() != profiles.len() {
            return Err(Error::Input("one dataset per device required".into()));
        }
        let device_adapters = profiles
            .iter()
            .map(|p| truncate(&global, p.local_rank))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { round: 0, base, global, device_adapters, datasets })
    }

    /// Training loss of the global adapter over the union of all device data.
    pub fn global_loss(&self) -> Result<f64> {
        let total: usize = self.datasets.iter().map(Vec::len).sum();
        let mut acc = 0.0;
        for data in &self.datasets {
            acc += mse_loss(&self.base, &self.global, data)? * data.len() as f64;
        }
        Ok(acc / total as f64)
    }
}

/// One round: select devices and bandwidth, run one local step on every
/// selected device, aggregate at the server, and unicast `truncate(global, rᵢ)`
/// back to each selected device.
///
/// Downlink time is charged symmetrically to the uplink (same bits, same
/// allocated rate), so the reported latency is
/// `max(compute + upload + download)` over the selected devices.
pub fn fedft_round(
    state: &FedFtState,
    profiles: &[DeviceProfile],
    cfg: &FedFtConfig,
) -> Result<(FedFtState, RoundRecord)> {
    cfg.validate()?;
    if profiles.len() != state.device_adapters.len() {
        return Err(Error::Input("device list does not match the federation state".into()));
    }
    let (d, k) = (state.global.base_rows(), state.global.base_cols());
    let upload_bits: Vec<f64> = state
        .device_adapters
        .iter()
        .map(|a| a.param_count() as f64 * cfg.bits_per_param)
        .collect();
    let local_flops: Vec<f64> = state
        .device_adapters
        .iter()
        .zip(&state.datasets)
        .map(|(a, data)| {
            cfg.flops_per_mac * data.len() as f64 * (d * k + a.param_count()) as f64
        })
        .collect();
    let problem = SelectionProblem {
        profiles,
        total_bandwidth: cfg.total_bandwidth,
        noise_density: cfg.noise_density,
        upload_bits: &upload_bits,
        local_flops: &local_flops,
        deadline: cfg.deadline,
    };
    let selection = if cfg.greedy_selection {
        select_devices_greedy(&problem)?
    } else {
        select_devices_and_bandwidth(&problem)?
    };

    // Local steps; aggregation consumes them in ascending device order.
    let mut trained = Vec::with_capacity(selection.selected.len());
    for &i in &selection.selected {
        trained.push(lora_sgd_step(&state.base, &state.device_adapters[i], &state.datasets[i], cfg.lr)?);
    }
    let sizes: Vec<f64> = selection.selected.iter().map(|&i| state.datasets[i].len() as f64).collect();
    let total: f64 = sizes.iter().sum();
    let weights: Vec<f64> = sizes.iter().map(|n| n / total).collect();
    let merged = aggregate_hetero(&trained, &weights)?;
    let global = zero_pad(&merged, state.global.rank())?;

    let mut device_adapters = state.device_adapters.clone();
    let mut round_latency = 0.0f64;
    for &i in &selection.selected {
        let p = &profiles[i];
        device_adapters[i] = truncate(&global, p.local_rank)?;
        let rate = p.uplink_rate(selection.allocation.bandwidth[i], cfg.noise_density)?;
        let link = comm_latency(upload_bits[i], rate);
        round_latency = round_latency.max(comp_latency(local_flops[i], p.compute_rate) + 2.0 * link);
    }

    let next = FedFtState {
        round: state.round + 1,
        base: state.base.clone(),
        global,
        device_adapters,
        datasets: state.datasets.clone(),
    };
    let record = RoundRecord {
        round: next.round,
        global_loss: next.global_loss()?,
        round_latency_s: round_latency,
        selected_ids: selection.selected_ids(profiles),
        bandwidth: selection.selected.iter().map(|&i| selection.allocation.bandwidth[i]).collect(),
    };
    Ok((next, record))
}

/// Result of [`run_fedft`].
#[derive(Clone, Debug)]
pub struct FedFtRun {
    pub initial_loss: f64,
    pub records: Vec<RoundRecord>,
    pub final_state: FedFtState,
}

pub fn run_fedft(
    mut state: FedFtState,
    profiles: &[DeviceProfile],
    cfg: &FedFtConfig,
    rounds: usize,
) -> Result<FedFtRun> {
    let initial_loss = state.global_loss()?;
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let (next, rec) = fedft_round(&state, profiles, cfg)?;
        state = next;
        records.push(rec);
    }
    Ok(FedFtRun { initial_loss, records, final_state: state })
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

/// Header: `round,global_loss,round_latency_s,selected_devices,bandwidth_hz`.
/// List-valued cells are `;`-joined.
pub fn write_rounds_csv<W: Write>(out: &mut W, records: &[RoundRecord]) -> std::io::Result<()> {
    writeln!(out, "round,global_loss,round_latency_s,selected_devices,bandwidth_hz")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.round,
            r.global_loss,
            r.round_latency_s,
            join(&r.selected_ids),
            join(&r.bandwidth)
        )?;
    }
    Ok(())
}
