//! Text-oriented cross-attention network (TCAN) for multimodal sentiment
//! regression.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tape`]), the model ([`model`]), data ingestion and a synthetic corpus
//! generator ([`data`]), losses, optimiser and training loop ([`train`]),
//! evaluation metrics ([`metrics`]) and an ablation grid runner
//! ([`ablation`]). The `tcan` binary exposes the same functionality on the
//! command line; `examples/` has one runnable program per capability.

pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{Shape, Tensor};
pub mod data;
pub mod metrics;
pub mod model;
pub mod train;
pub mod ablation;
pub mod cli;
