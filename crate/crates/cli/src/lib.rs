//! Command-line and HTTP front ends for the trial engine.
//!
//! Both front ends call the same functions in [`commands`] and serialize
//! results through [`canonical`], so a CLI verb and its endpoint emit the
//! same bytes.

pub mod api;
pub mod canonical;
pub mod cli;
pub mod commands;
pub mod error;
