//! Experiment runner: configuration, training and evaluation of every
//! method, ablations, persistence and figure data.

pub mod config;
pub mod data;
pub mod eval;
pub mod pretrain;
pub mod checkpoint;
pub mod run;
pub mod commands;
