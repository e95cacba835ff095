pub mod apply;
pub mod bank;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decision;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod gateway;
pub mod miner;
pub mod mitigation;
pub mod plot;
pub mod raster;
pub mod review;
pub mod synthetic;

pub use error::{Error, Result};
