//! Dense image matching with unified feature and cost-volume attention.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: array type, tape-based reverse-mode autodiff, op set
//! - [`params`], [`optim`], [`gradcheck`]: training substrate
//! - [`backbone`], [`cost`], [`attention`], [`model`]: the matching network
//! - [`zoom`]: multi-window zoom-in inference with cycle-consistency selection
//! - [`synth`], [`flo`], [`eval`]: synthetic-warp data, flow I/O, metrics
//! - [`config`], [`train`], [`viz`], [`ablation`]: CLI-facing glue

// large short-lived tape buffers hit the system allocator hard; mimalloc
// keeps them pooled
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod ablation;
pub mod attention;
pub mod backbone;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flo;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod zoom;

pub use error::{Error, Result};
