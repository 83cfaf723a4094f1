//! Two-lane loop driving simulator with a hierarchical policy stack:
//! a lane-selection gate on top of per-lane driving experts, trained with PPO.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod map;
pub mod nn;
pub mod obs;
pub mod policy;
pub mod render;
pub mod reward;
pub mod sim;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
