//! Core library for learn-as-you-go cluster trials of multi-component
//! interventions: data model, cost model, grouped logistic outcome model,
//! package optimization with confidence sets, the overall effect test, the
//! multi-stage engine and an operating-characteristics simulator.

pub mod cost_model;
pub mod error;
pub mod inference;
pub mod optimizer;
pub mod outcome_model;
pub mod simulator;
pub mod stage_engine;
pub mod stats;
pub mod trial_model;
pub mod worked_example;

pub use cost_model::{CostModel, Package};
pub use error::{LagoError, Result};
pub use trial_model::{ObservationRecord, Period, StageDataset, TrialConfig};
