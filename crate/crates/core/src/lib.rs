//! Desk-scale laboratory for parameter-efficient adaptation of a
//! Whisper-shaped encoder-decoder transformer.
//!
//! The crate is organized around six pieces:
//!
//! - [`graph`] — a minimal dense-tensor reverse-mode autodiff engine with
//!   built-in finite-difference verification;
//! - [`model`] — the configurable encoder-decoder transformer with the
//!   special-token decoder prefix scheme and greedy decoding;
//! - [`peft`] — the adapter family: soft prompt tuning variants, LoRA,
//!   full fine-tuning, and their compositions, each with an exact
//!   trainable-parameter account;
//! - [`train`] — AdamW, the masked NLL objective, the training loop, and
//!   checkpointing;
//! - [`data`] + [`metrics`] + [`forgetting`] — the synthetic code-switching
//!   benchmark, the Mixed Error Rate metric, and the catastrophic-forgetting
//!   harness;
//! - [`experiment`] — the configuration-driven runner behind the CLI.

pub mod data;
pub mod error;
pub mod experiment;
pub mod forgetting;
pub mod graph;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod peft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{finite_diff_check, Graph, HasParams, NodeId, Reduction};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
