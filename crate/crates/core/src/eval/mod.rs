//! Metrics, method runners, sweeps and cohort slicing.

pub mod cohorts;
pub mod methods;
pub mod metrics;
pub mod report;
pub mod sweep;

pub use cohorts::{Cohort, CohortThresholds};
pub use methods::{MethodConfig, MethodName, MethodRun, Runner, TaskFailure};
pub use report::{evaluate, render_table, EvalReport};
pub use sweep::{sweep, x_grid, SweepCell, SweepMetric, SweepResult};
