pub mod autodiff;
pub mod cn_mlp;
pub mod container;
pub mod error;
pub mod harness;
pub mod losses;
pub mod physics_data;
pub mod rng;
pub mod tailoring;
pub mod theory_checks;

pub use error::{Error, Result};
