pub mod cond_var;
pub mod dsfm;
pub mod error;
pub mod fixtures;
pub mod heston;
pub mod market_data;
pub mod moneyness;
pub mod msmooth;
pub mod numerics;
pub mod resample;
pub mod strategy;
pub mod var_forecast;

pub use error::{Error, Result};
