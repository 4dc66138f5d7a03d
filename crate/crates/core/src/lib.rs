pub mod error;
pub mod nd;

pub use error::{Error, Result};
pub mod nn;
pub mod par;
pub mod rng;
pub mod bench;
pub mod proxy;
pub mod diffusion;
pub mod likelihood;
pub mod posterior;
pub mod config;
pub mod optimizer;
pub mod report;
