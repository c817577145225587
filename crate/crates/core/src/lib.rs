//! Channel estimation for IRS-assisted multi-user uplink systems.

mod binio;
pub mod channel;
pub mod cmat;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod nn;
pub mod pilot;
pub mod rng;

pub use cmat::CMatrix;
pub use config::SystemConfig;
pub use error::{Error, Result};
pub use num_complex::Complex64;
