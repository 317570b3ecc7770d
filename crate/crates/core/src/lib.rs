pub mod analysis;
pub mod autodiff;
pub mod backbones;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod spm;
pub mod trainer;

pub use error::{Error, Result};
