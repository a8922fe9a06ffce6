use thiserror::Error;

use crate::domain::{FunctionId, GpuId, InstanceId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero compute: SM rate must be positive")]
    ZeroCompute,
    #[error("zero denominator in throughput efficacy")]
    ZeroDenominator,
    #[error("SLO unattainable for {0}")]
    SloUnattainable(String),
    #[error("oracle violates monotonicity precondition: {0}")]
    NonMonotoneOracle(String),
    #[error("capacity exhausted while placing {0}")]
    CapacityExhausted(FunctionId),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("unknown gpu {0}")]
    UnknownGpu(GpuId),
    #[error("function {0} has no profiled quota")]
    Unprofiled(FunctionId),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("invariant violated at t={at_ms}ms: {detail}")]
    Invariant { at_ms: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
