//! Modulated Schedule Randomization (MSR) for multiresource job scheduling.
//!
//! The crate covers workload modelling, policy synthesis, the modulating
//! processes behind pMSR/nMSR/sMSR, closed-form queue-length analysis, a
//! discrete-event simulator with baselines, and trace preparation.

pub mod analysis;
pub mod error;
pub mod model;
pub mod numerics;
pub mod par;
pub mod policy;
pub mod simulator;
pub mod synthesis;
pub mod trace;

pub use error::{Error, Result};
pub use model::{enumerate_maximal_schedules, feasible, system_load, JobType, ResourceVector, Schedule, Workload};
pub use policy::{Mode, ModulatingProcess, PolicySpec};
