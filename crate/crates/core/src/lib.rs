//! Attention-free GLU vision transformers and their baselines, on a small
//! define-by-run autodiff engine.
//!
//! ```text
//! image ─ patchify ─ embed (+pos) ─ [block × B] ─ LayerNorm ─ mean ─ head ─ logits
//! ```
//!
//! Five block bodies are available (see [`models::Arch`]): multi-head
//! attention (ViT), token/channel MLPs (MLP-Mixer), a token-local linear map
//! (Synthesizer), a GEGLU gated MLP followed by a plain MLP (Activator), and a
//! single GEGLU MLP (GEGLU-only Activator).

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use models::{Arch, ClassifierModel, ModelConfig};
pub use tensor::{GeluKind, Graph, Real, Tensor, Var};
