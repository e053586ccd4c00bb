#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod autograd;
pub mod blob;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod memory;
pub mod metrics;
pub mod params;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
