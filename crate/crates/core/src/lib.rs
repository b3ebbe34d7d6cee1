//! Federated parameter-efficient domain adaptation for conformer-lite
//! sequence models.
//!
//! The crate covers the whole desk-scale pipeline: a small reverse-mode
//! autodiff core, a conformer-lite encoder with five adapter placements,
//! client SGD / server Adam, a FedAvg simulator with a communication
//! ledger, synthetic source/target corpora with a masked SSL task, WER and
//! parameter accounting, and a staged experiment harness.

pub mod accounting;
pub mod autodiff;
mod binfmt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod tensor;
pub mod tree;

pub use error::{Error, Result};
