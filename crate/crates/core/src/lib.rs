// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod augment;
pub mod conv;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod morlet;
pub mod nn;
pub mod pki;
pub mod scattering;
pub mod spr;
pub mod synthdata;
pub mod train;
pub mod visualize;

pub use error::{Error, Result};
