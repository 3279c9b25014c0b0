//! Command-line front end: run configs, training loops, checkpoints and
//! attention export.

pub mod config;
pub mod export;
pub mod gradcheck;
pub mod run;
