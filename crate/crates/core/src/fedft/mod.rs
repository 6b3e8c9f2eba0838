//! Heterogeneous federated fine-tuning of LoRA adapters.
//!
//! Devices train adapters of their own rank; the server zero-pads them to the
//! largest rank, averages `A` and `B` factors separately, and unicasts a
//! truncated copy back to each device.

pub mod distill;
pub mod lora;
pub mod round;
pub mod selection;

pub use distill::{distill_loss, distill_step, kd_exchange, kl_divergence, SharedModule, SoftmaxLinear};
pub use lora::{
    aggregate_hetero, aggregation_bias, lora_gradients, lora_sgd_step, mse_loss, truncate, zero_pad,
    FrozenBase, LoraAdapter, Sample,
};
pub use round::{fedft_round, run_fedft, write_rounds_csv, FedFtConfig, FedFtRun, FedFtState, RoundRecord, SyntheticTask};
pub use selection::{select_devices_and_bandwidth, select_devices_greedy, Selection, SelectionProblem};
