pub mod config;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod headloss;
pub mod model;
pub mod numerics;
pub mod params;
pub mod prompt;
pub mod runtime;
pub mod train;

pub use error::{Error, Result};
