//! Desk-scale simulator for collaborative edge deployment of large models.
//!
//! * [`fedft`]: heterogeneous-rank LoRA federated fine-tuning, device
//!   selection with bandwidth allocation, and shared-module distillation.
//! * [`unlearn`]: federated unlearning by orthogonally projected gradient ascent.
//! * [`moe`]: drift-plus-penalty scheduling of MoE expert microservices.
//! * [`cot`]: placement of chain-of-thought step microservices.
//! * [`casestudy`]: token-budget memory/latency cost model and its calibration.
//! * [`scenario`]: JSON scenario runner behind the `edgelam-sim` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod casestudy;
pub mod cot;
pub mod error;
pub mod fedft;
pub mod moe;
pub mod netsim;
pub mod numerics;
pub mod rng;
pub mod scenario;
pub mod unlearn;

pub use error::{Error, Result};
