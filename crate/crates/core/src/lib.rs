//! Desk-scale building blocks for medical vision-language distillation:
//! two-axis rotary position indices, a curriculum-weighted distillation loss,
//! a similarity gate with pluggable correction, best-of-n selection and
//! grounding/text metrics.

pub mod attention;
pub mod commands;
pub mod config;
pub mod distill;
pub mod embed;
pub mod error;
pub mod gate;
pub mod math;
pub mod metrics;
pub mod rope;
pub mod sasg;
pub mod toy;

pub use error::{Error, Result};
