//! Knowledge distillation from mixture-of-experts teachers into dense
//! students at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: `f64` tensors and a reverse-mode tape.
//! - [`moe`]: noisy top-k routing, expert aggregation, load balancing.
//! - [`model`]: toy decoder-only transformers (dense student, MoE teacher).
//! - [`distill`]: SFT, KD, GKD, ALL, knowledge augmentation and the
//!   student-aware router, plus AdamW.
//! - [`data`]: synthetic instruction tasks, JSONL ingestion, encoding.
//! - [`eval`]: ROUGE-L and gate-probability diagnostics.

pub mod data;
pub mod diffcore;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod moe;
pub mod nn;
pub mod rng;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use diffcore::{Graph, Tensor, Var};
pub use error::{Error, Result};
