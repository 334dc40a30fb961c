pub mod baselines;
mod binio;
pub mod error;
pub mod hash;
pub mod model;
pub mod numerics;
pub mod serving;
pub mod sidgen;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
