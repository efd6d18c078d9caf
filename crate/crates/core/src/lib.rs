//! Democratic co-salient feature mining on a small reverse-mode tensor engine.
//!
//! A group of related images is encoded, a group prototype is mined from
//! cross-image seeds and averaged response maps ([`dpg`]), background is
//! suppressed during training with a self-contrastive loss ([`scl`]), the
//! fused features are refined with rank-amplified attention ([`dfe`]) and a
//! decoder predicts one co-saliency mask per image.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists them.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod dfe;
pub mod dpg;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pnm;
pub mod scl;
pub mod selftest;
pub mod tensorlab;
pub mod train;

pub use error::{DcfmError, Result};
pub use model::{Dcfm, ModelConfig, Variant};
pub use tensorlab::{Tape, Tensor, Var};
