//! Scenario files and baseline modes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{FunctionKind, FunctionSpec, ResourceQuota, SmRate, DEFAULT_GPU_MEM_GB, SM_TOTAL};
use crate::error::{Error, Result};
use crate::hscaler::HscalerConfig;
use crate::perfmodel::{ModelLibrary, ModelRef};
use crate::scheduler::SchedulerConfig;
use crate::sim::trace::{substream, WorkloadPattern};
use crate::vscaler::{GrantPolicy, VscalerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Dilu,
    /// One GPU per worker with the whole GPU granted.
    Exclusive,
    /// Fixed grant at the limit; packed by limit.
    StaticLimit,
    /// Fixed grant at the request; packed by request.
    StaticRequest,
    /// Request-level fixed grants with reactive horizontal scaling.
    EagerHorizontal,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 5] = [
        BaselineMode::Dilu,
        BaselineMode::Exclusive,
        BaselineMode::StaticLimit,
        BaselineMode::StaticRequest,
        BaselineMode::EagerHorizontal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BaselineMode::Dilu => "dilu",
            BaselineMode::Exclusive => "exclusive",
            BaselineMode::StaticLimit => "static_limit",
            BaselineMode::StaticRequest => "static_request",
            BaselineMode::EagerHorizontal => "eager_horizontal",
        }
    }

    pub fn parse(s: &str) -> Option<BaselineMode> {
        BaselineMode::ALL.into_iter().find(|m| m.label() == s)
    }

    pub fn grant_policy(self) -> GrantPolicy {
        match self {
            BaselineMode::Dilu => GrantPolicy::Dynamic,
            BaselineMode::Exclusive => GrantPolicy::Full,
            BaselineMode::StaticLimit => GrantPolicy::StaticLimit,
            BaselineMode::StaticRequest | BaselineMode::EagerHorizontal => GrantPolicy::StaticRequest,
        }
    }

    /// Quota the scheduler charges for an instance with profiled `q`.
    pub fn charged_quota(self, q: &ResourceQuota) -> ResourceQuota {
        let with = |req: f64, lim: f64| ResourceQuota {
            request_smr: SmRate(req),
            limit_smr: SmRate(lim),
            ..*q
        };
        match self {
            BaselineMode::Dilu => *q,
            BaselineMode::Exclusive => with(SM_TOTAL, SM_TOTAL),
            BaselineMode::StaticLimit => with(q.limit_smr.0, q.limit_smr.0),
            BaselineMode::StaticRequest | BaselineMode::EagerHorizontal => with(q.request_smr.0, q.request_smr.0),
        }
    }

    /// Static modes never oversubscribe.
    pub fn scheduler_config(self, base: &SchedulerConfig) -> SchedulerConfig {
        match self {
            BaselineMode::Dilu => *base,
            _ => SchedulerConfig {
                omega: 1.0,
                gamma: 1.0,
                ..*base
            },
        }
    }

    pub fn hscaler_config(self, base: &HscalerConfig) -> HscalerConfig {
        match self {
            BaselineMode::EagerHorizontal => HscalerConfig {
                window_s: 2,
                phi_out: 1,
                phi_in: 1,
                ..*base
            },
            _ => *base,
        }
    }
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A function together with its traffic and lifetime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionEntry {
    #[serde(flatten)]
    pub spec: FunctionSpec,
    /// Inference traffic; training functions leave this empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadPattern>,
    /// Instances that exist warm at `start_s`.
    #[serde(default = "one")]
    pub initial_instances: u32,
    #[serde(default)]
    pub start_s: f64,
    /// Samples per worker per training iteration.
    #[serde(default = "default_samples")]
    pub iteration_samples: u64,
    /// Training job length; runs until the end when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_iterations: Option<u64>,
}

fn one() -> u32 {
    1
}

fn default_samples() -> u64 {
    32
}

impl FunctionEntry {
    pub fn new(spec: FunctionSpec) -> Self {
        FunctionEntry {
            spec,
            workload: None,
            initial_instances: 1,
            start_s: 0.0,
            iteration_samples: default_samples(),
            total_iterations: None,
        }
    }

    pub fn with_workload(mut self, w: WorkloadPattern) -> Self {
        self.workload = Some(w);
        self
    }

    pub fn with_instances(mut self, n: u32) -> Self {
        self.initial_instances = n;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputOptions {
    /// Per-tick grant rows; large for long runs.
    pub grant_trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub nodes: u32,
    pub gpus_per_node: u32,
    #[serde(default = "default_mem")]
    pub gpu_mem_gb: f64,
    /// Extra or overriding model profiles on top of the built-in library.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelRef>,
    pub functions: Vec<FunctionEntry>,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub vscaler: VscalerConfig,
    #[serde(default)]
    pub hscaler: HscalerConfig,
    #[serde(default = "default_mode")]
    pub mode: BaselineMode,
    #[serde(default)]
    pub outputs: OutputOptions,
    /// Per-tick invariant assertions.
    #[serde(default = "yes")]
    pub check_invariants: bool,
}

fn default_mem() -> f64 {
    DEFAULT_GPU_MEM_GB
}

fn default_mode() -> BaselineMode {
    BaselineMode::Dilu
}

fn yes() -> bool {
    true
}

impl Scenario {
    pub fn new(name: &str, seed: u64, duration_s: f64, nodes: u32, gpus_per_node: u32) -> Self {
        Scenario {
            name: name.to_string(),
            seed,
            duration_s,
            nodes,
            gpus_per_node,
            gpu_mem_gb: DEFAULT_GPU_MEM_GB,
            models: Vec::new(),
            functions: Vec::new(),
            scheduler: SchedulerConfig::default(),
            vscaler: VscalerConfig::default(),
            hscaler: HscalerConfig::default(),
            mode: BaselineMode::Dilu,
            outputs: OutputOptions::default(),
            check_invariants: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Scenario::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn library(&self) -> Result<ModelLibrary> {
        let mut lib = ModelLibrary::builtin();
        for m in &self.models {
            lib.insert(m.clone())?;
        }
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::Invalid("duration_s must be positive".into()));
        }
        if self.nodes == 0 || self.gpus_per_node == 0 || !(self.gpu_mem_gb > 0.0) {
            return Err(Error::Invalid("cluster must have GPUs with memory".into()));
        }
        self.scheduler.validate()?;
        self.vscaler.validate()?;
        self.hscaler.validate()?;
        let lib = self.library()?;
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.functions {
            if !seen.insert(f.spec.id.clone()) {
                return Err(Error::Invalid(format!("duplicate function {}", f.spec.id)));
            }
            lib.get(&f.spec.model)?;
            if let Some(v) = crate::domain::validate_spec(&f.spec).first() {
                return Err(Error::Invalid(format!("{}: {v}", f.spec.id)));
            }
            if let Some(w) = &f.workload {
                w.validate()?;
            }
            if f.start_s < 0.0 || f.iteration_samples == 0 {
                return Err(Error::Invalid(format!("{}: bad lifetime or samples", f.spec.id)));
            }
        }
        Ok(())
    }

    /// A small random scenario for invariant fuzzing.
    pub fn randomized(seed: u64, duration_s: f64) -> Scenario {
        let mut rng = substream(seed, "scenario-gen");
        let gpus = rng.random_range(2..=6);
        let mut s = Scenario::new(&format!("random-{seed}"), seed, duration_s, 1, gpus);
        s.mode = BaselineMode::ALL[rng.random_range(0..BaselineMode::ALL.len())];
        s.scheduler.gamma = [1.0, 1.25, 1.5, 2.0][rng.random_range(0..4)];
        s.vscaler.rate_window_len = rng.random_range(2..=30);
        s.hscaler = HscalerConfig {
            window_s: 4,
            phi_out: 2,
            phi_in: 3,
            ..HscalerConfig::default()
        };
        let models = ["resnet152-like", "roberta-large-like", "gpt2-large-like", "llama2-7b-like"];
        let n_train = rng.random_range(0..=2);
        for i in 0..n_train {
            let model = models[rng.random_range(0..3)];
            let workers = rng.random_range(1..=2);
            let idle = [0.0, 0.2, 0.4][rng.random_range(0..3)];
            let mut e = FunctionEntry::new(FunctionSpec::training(&format!("train{i}"), model, workers, idle));
            e.start_s = rng.random_range(0.0..duration_s / 2.0);
            e.iteration_samples = rng.random_range(8..=64);
            if rng.random_bool(0.5) {
                e.total_iterations = Some(rng.random_range(5..50));
            }
            s.functions.push(e);
        }
        let n_inf = rng.random_range(1..=4);
        for i in 0..n_inf {
            let model = models[rng.random_range(0..4)];
            let lib = ModelLibrary::builtin();
            let m = lib.get(model).expect("built-in");
            let slo = m.default_slo_ms.unwrap_or(150.0) * rng.random_range(1.0..1.6);
            let spec = FunctionSpec::inference(&format!("infer{i}"), model, slo, m.is_llm);
            let rps = rng.random_range(1.0..60.0);
            let workload = match rng.random_range(0..5) {
                0 => WorkloadPattern::Poisson { mean_rps: rps },
                1 => WorkloadPattern::Gamma {
                    mean_rps: rps,
                    cv: rng.random_range(0.5..6.0),
                },
                2 => WorkloadPattern::Bursty {
                    base_rps: rps / 2.0,
                    burst_scale: rng.random_range(2.0..6.0),
                    burst_period_s: 20.0,
                    burst_len_s: 5.0,
                    burst_offset_s: None,
                },
                3 => WorkloadPattern::Periodic {
                    mean_rps: rps,
                    amplitude: 0.9,
                    period_s: 15.0,
                },
                _ => WorkloadPattern::Sporadic {
                    active_rps: rps,
                    active_len_s: 3.0,
                    mean_gap_s: 10.0,
                },
            };
            let mut e = FunctionEntry::new(spec).with_workload(workload);
            e.initial_instances = rng.random_range(0..=2);
            s.functions.push(e);
        }
        s
    }
}

/// Seconds of compute at saturation and comm idle per training iteration.
pub fn iteration_timing(model: &ModelRef, kind: &FunctionKind, samples: u64, max_tokens: u64, period_ms: u64) -> (f64, f64) {
    let work = crate::perfmodel::training_iteration_work(model, samples, max_tokens);
    let compute_ms = work.blocks as f64 / work.cap_per_period as f64 * period_ms as f64;
    let idle = match kind {
        FunctionKind::Training { comm_idle_frac, .. } => crate::perfmodel::comm_idle_ms(compute_ms, *comm_idle_frac),
        FunctionKind::Inference { .. } => 0.0,
    };
    (compute_ms, idle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut s = Scenario::new("t", 3, 10.0, 1, 2);
        s.functions.push(FunctionEntry::new(FunctionSpec::training("t", "resnet152-like", 1, 0.2)));
        s.functions.push(
            FunctionEntry::new(FunctionSpec::inference("i", "roberta-large-like", 120.0, false))
                .with_workload(WorkloadPattern::Poisson { mean_rps: 5.0 }),
        );
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_model_rejected() {
        let mut s = Scenario::new("t", 3, 10.0, 1, 2);
        s.functions.push(FunctionEntry::new(FunctionSpec::training("t", "nope", 1, 0.0)));
        assert!(matches!(s.validate(), Err(Error::UnknownModel(_))));
        s.functions.clear();
        s.duration_s = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn mode_labels_round_trip() {
        for m in BaselineMode::ALL {
            assert_eq!(BaselineMode::parse(m.label()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.label()));
        }
        assert_eq!(BaselineMode::parse("mps"), None);
    }

    #[test]
    fn charged_quotas() {
        let q = ResourceQuota::new(20.0, 40.0, 3.0);
        assert_eq!(BaselineMode::Dilu.charged_quota(&q), q);
        let e = BaselineMode::Exclusive.charged_quota(&q);
        assert_eq!((e.request_smr.0, e.limit_smr.0, e.mem_gb), (100.0, 100.0, 3.0));
        let l = BaselineMode::StaticLimit.charged_quota(&q);
        assert_eq!((l.request_smr.0, l.limit_smr.0), (40.0, 40.0));
        let r = BaselineMode::StaticRequest.charged_quota(&q);
        assert_eq!((r.request_smr.0, r.limit_smr.0), (20.0, 20.0));
    }

    #[test]
    fn randomized_scenarios_validate() {
        for seed in 0..30 {
            Scenario::randomized(seed, 50.0).validate().unwrap();
        }
    }
}
