//! Dual-encoder contrastive vision-language model with differential
//! attention, built from scratch: dense f64 tensors, a reverse-mode autodiff
//! tape, miniature ViT/text transformers, the CLIP objective, a deterministic
//! synthetic shapes corpus, an AdamW training loop, and evaluation tooling
//! (zero-shot classification, retrieval, linear probes, parameter audits,
//! attention heatmaps).
//!
//! Start with the runnable examples (`cargo run --release --example ...`) or
//! the `diffclip` binary, which exposes the same pipeline as subcommands.

pub mod attention;
pub mod attnmap;
pub mod audit;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objective;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

