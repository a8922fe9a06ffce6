//! Shared vocabulary: functions, quotas, GPUs, instances and requests.
//!
//! SM rates are real-valued percentages of one GPU (0..=100). Kernel-block
//! tokens live in [`crate::vscaler`] and are integers; the two unit systems
//! only meet through [`SmRate::fraction`].

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Total SM units of one GPU.
pub const SM_TOTAL: f64 = 100.0;
pub const DEFAULT_GPU_MEM_GB: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(pub String);

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FunctionId {
    fn from(s: &str) -> Self {
        FunctionId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GpuId(pub u32);

impl fmt::Display for GpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gpu{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "inst{}", self.0)
    }
}

/// Percentage of one GPU's streaming multiprocessors.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SmRate(pub f64);

impl SmRate {
    pub const FULL: SmRate = SmRate(SM_TOTAL);

    pub fn value(self) -> f64 {
        self.0
    }

    /// Share of the whole GPU, in `[0, 1]`.
    pub fn fraction(self) -> f64 {
        self.0 / SM_TOTAL
    }

    pub fn is_valid(self) -> bool {
        self.0.is_finite() && (0.0..=SM_TOTAL).contains(&self.0)
    }
}

impl fmt::Display for SmRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}%", self.0)
    }
}

/// `<request, limit>` SM quota plus the steady memory footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceQuota {
    pub request_smr: SmRate,
    pub limit_smr: SmRate,
    pub mem_gb: f64,
    /// Inference batch size; absent for training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ibs: Option<u32>,
}

impl ResourceQuota {
    pub fn new(request: f64, limit: f64, mem_gb: f64) -> Self {
        ResourceQuota {
            request_smr: SmRate(request),
            limit_smr: SmRate(limit),
            mem_gb,
            ibs: None,
        }
    }

    pub fn with_ibs(mut self, ibs: u32) -> Self {
        self.ibs = Some(ibs);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FunctionKind {
    Training {
        workers: u32,
        #[serde(default)]
        comm_idle_frac: f64,
    },
    Inference {
        slo_ms: f64,
        #[serde(default)]
        is_llm: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    SloSensitive,
    BestEffort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub id: FunctionId,
    pub kind: FunctionKind,
    /// Name of a model profile known to the performance oracle.
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<ResourceQuota>,
    /// Overrides the kind-derived default priority.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Priority>,
    /// Workload-pattern tag; functions sharing a tag and kind are affine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_tag: Option<String>,
}

impl FunctionSpec {
    pub fn training(id: &str, model: &str, workers: u32, comm_idle_frac: f64) -> Self {
        FunctionSpec {
            id: id.into(),
            kind: FunctionKind::Training {
                workers,
                comm_idle_frac,
            },
            model: model.to_string(),
            quota: None,
            priority: None,
            pattern_tag: None,
        }
    }

    pub fn inference(id: &str, model: &str, slo_ms: f64, is_llm: bool) -> Self {
        FunctionSpec {
            id: id.into(),
            kind: FunctionKind::Inference { slo_ms, is_llm },
            model: model.to_string(),
            quota: None,
            priority: None,
            pattern_tag: None,
        }
    }

    pub fn with_quota(mut self, quota: ResourceQuota) -> Self {
        self.quota = Some(quota);
        self
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.pattern_tag = Some(tag.to_string());
        self
    }

    pub fn priority(&self) -> Priority {
        self.priority.unwrap_or(match self.kind {
            FunctionKind::Inference { .. } => Priority::SloSensitive,
            FunctionKind::Training { .. } => Priority::BestEffort,
        })
    }

    /// Number of GPUs (`n_j`) one instance needs before any LLM splitting.
    pub fn gpus_needed(&self) -> u32 {
        match self.kind {
            FunctionKind::Training { workers, .. } => workers,
            FunctionKind::Inference { .. } => 1,
        }
    }

    pub fn is_llm(&self) -> bool {
        matches!(self.kind, FunctionKind::Inference { is_llm: true, .. })
    }

    pub fn is_inference(&self) -> bool {
        matches!(self.kind, FunctionKind::Inference { .. })
    }

    pub fn slo_ms(&self) -> Option<f64> {
        match self.kind {
            FunctionKind::Inference { slo_ms, .. } => Some(slo_ms),
            FunctionKind::Training { .. } => None,
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self.kind {
            FunctionKind::Training { .. } => "training",
            FunctionKind::Inference { .. } => "inference",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SmRateOutOfRange { field: &'static str },
    RequestExceedsLimit,
    NonPositiveMemory,
    ZeroBatchSize,
    ZeroWorkers,
    IdleFractionOutOfRange,
    NonPositiveSlo,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SmRateOutOfRange { field } => write!(f, "{field} outside [0, 100]"),
            Violation::RequestExceedsLimit => f.write_str("request exceeds limit"),
            Violation::NonPositiveMemory => f.write_str("mem_gb must be positive"),
            Violation::ZeroBatchSize => f.write_str("ibs must be positive"),
            Violation::ZeroWorkers => f.write_str("n_j ≥ 1"),
            Violation::IdleFractionOutOfRange => f.write_str("comm_idle_frac outside [0, 1)"),
            Violation::NonPositiveSlo => f.write_str("slo_ms must be positive"),
        }
    }
}

/// Every violated invariant of `spec`; empty means valid.
pub fn validate_spec(spec: &FunctionSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    match spec.kind {
        FunctionKind::Training {
            workers,
            comm_idle_frac,
        } => {
            if workers == 0 {
                out.push(Violation::ZeroWorkers);
            }
            if !(0.0..1.0).contains(&comm_idle_frac) {
                out.push(Violation::IdleFractionOutOfRange);
            }
        }
        FunctionKind::Inference { slo_ms, .. } => {
            if !(slo_ms > 0.0) {
                out.push(Violation::NonPositiveSlo);
            }
        }
    }
    if let Some(q) = &spec.quota {
        if !q.request_smr.is_valid() {
            out.push(Violation::SmRateOutOfRange {
                field: "request_smr",
            });
        }
        if !q.limit_smr.is_valid() {
            out.push(Violation::SmRateOutOfRange { field: "limit_smr" });
        }
        if q.request_smr.0 > q.limit_smr.0 {
            out.push(Violation::RequestExceedsLimit);
        }
        if !(q.mem_gb > 0.0) {
            out.push(Violation::NonPositiveMemory);
        }
        if q.ibs == Some(0) {
            out.push(Violation::ZeroBatchSize);
        }
    }
    out
}

/// One GPU's committed resources. Sums are fractions of the whole GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuState {
    pub gpu_id: GpuId,
    pub node_id: u32,
    pub mem_total_gb: f64,
    pub req_sum: f64,
    pub lim_sum: f64,
    pub mem_used_gb: f64,
    pub residents: BTreeSet<InstanceId>,
    pub active: bool,
}

impl GpuState {
    pub fn new(gpu_id: GpuId, node_id: u32, mem_total_gb: f64) -> Self {
        GpuState {
            gpu_id,
            node_id,
            mem_total_gb,
            req_sum: 0.0,
            lim_sum: 0.0,
            mem_used_gb: 0.0,
            residents: BTreeSet::new(),
            active: false,
        }
    }

    pub fn free_mem_gb(&self) -> f64 {
        (self.mem_total_gb - self.mem_used_gb).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    ColdStarting { remaining_ms: u64 },
    Warm,
    Draining,
    Terminated,
}

impl Phase {
    fn rank(self) -> u8 {
        match self {
            Phase::ColdStarting { .. } => 0,
            Phase::Warm => 1,
            Phase::Draining => 2,
            Phase::Terminated => 3,
        }
    }

    /// Phases only move forward.
    pub fn can_become(self, next: Phase) -> bool {
        match (self, next) {
            (Phase::ColdStarting { remaining_ms: a }, Phase::ColdStarting { remaining_ms: b }) => {
                b <= a
            }
            _ => next.rank() > self.rank(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceState {
    pub instance_id: InstanceId,
    pub function_id: FunctionId,
    /// Worker GPUs for training, pipeline stages for split LLMs.
    pub gpu_ids: Vec<GpuId>,
    pub phase: Phase,
    pub started_at_ms: u64,
}

impl InstanceState {
    pub fn advance(&mut self, next: Phase) -> bool {
        if self.phase.can_become(next) {
            self.phase = next;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub function_id: FunctionId,
    pub arrival_ms: u64,
    pub batch_id: Option<u64>,
    pub completed_ms: Option<u64>,
    pub deadline_ms: u64,
}

impl Request {
    pub fn latency_ms(&self) -> Option<u64> {
        self.completed_ms.map(|c| c - self.arrival_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_quota_passes() {
        let f = FunctionSpec::inference("f", "m", 100.0, false)
            .with_quota(ResourceQuota::new(30.0, 60.0, 2.0).with_ibs(4));
        assert!(validate_spec(&f).is_empty());
    }

    #[test]
    fn request_above_limit_is_flagged() {
        let f = FunctionSpec::inference("f", "m", 100.0, false)
            .with_quota(ResourceQuota::new(60.0, 30.0, 2.0));
        let v = validate_spec(&f);
        assert_eq!(v, vec![Violation::RequestExceedsLimit]);
        assert_eq!(v[0].to_string(), "request exceeds limit");
    }

    #[test]
    fn zero_workers_is_flagged() {
        let f = FunctionSpec::training("t", "m", 0, 0.1);
        assert_eq!(validate_spec(&f), vec![Violation::ZeroWorkers]);
    }

    #[test]
    fn collects_every_violation() {
        let f = FunctionSpec::training("t", "m", 0, 1.5)
            .with_quota(ResourceQuota::new(120.0, 30.0, 0.0));
        assert_eq!(validate_spec(&f).len(), 5);
    }

    #[test]
    fn default_priority_follows_kind() {
        assert_eq!(
            FunctionSpec::training("t", "m", 1, 0.0).priority(),
            Priority::BestEffort
        );
        let mut f = FunctionSpec::inference("i", "m", 50.0, false);
        assert_eq!(f.priority(), Priority::SloSensitive);
        f.priority = Some(Priority::BestEffort);
        assert_eq!(f.priority(), Priority::BestEffort);
    }

    #[test]
    fn phases_only_move_forward() {
        let mut inst = InstanceState {
            instance_id: InstanceId(1),
            function_id: "f".into(),
            gpu_ids: vec![GpuId(0)],
            phase: Phase::ColdStarting { remaining_ms: 10 },
            started_at_ms: 0,
        };
        assert!(inst.advance(Phase::Warm));
        assert!(!inst.advance(Phase::ColdStarting { remaining_ms: 5 }));
        assert!(inst.advance(Phase::Draining));
        assert!(!inst.advance(Phase::Warm));
        assert!(inst.advance(Phase::Terminated));
    }

    #[test]
    fn function_spec_json_round_trip() {
        let f = FunctionSpec::training("t", "resnet152-like", 2, 0.4).with_tag("steady");
        let s = serde_json::to_string(&f).unwrap();
        let back: FunctionSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(f, back);
    }
}
