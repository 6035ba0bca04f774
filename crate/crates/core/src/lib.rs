pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gauss;
pub mod moments;
pub mod nn;
pub mod oracle;
pub mod pscan;
pub mod rng;
pub mod soc;
pub mod training;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
