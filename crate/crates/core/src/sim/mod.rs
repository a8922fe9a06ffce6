//! Deterministic simulation of a GPU cluster serving training and inference
//! functions.

pub mod engine;
pub mod fleet;
pub mod gateway;
pub mod metrics;
pub mod scenario;
pub mod trace;

pub use engine::{run, Simulation};
pub use fleet::{generate_fleet, run_fleet_workload, run_large_scale, FleetReport, FleetSpec};
pub use metrics::{FunctionMetrics, MetricsReport, RunOutput};
pub use scenario::{BaselineMode, FunctionEntry, Scenario};
pub use trace::{generate_trace, WorkloadPattern};
