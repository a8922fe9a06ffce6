//! Run logs, summary metrics and their on-disk forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Request, SmRate};
use crate::error::Result;
use crate::hscaler::ScalingEvent;
use crate::perfmodel::train_throughput;
use crate::sim::engine::FuncRt;
use crate::sim::scenario::BaselineMode;
use crate::vscaler::VscalerConfig;

pub const METRICS_FILE: &str = "metrics.json";
pub const SCALING_FILE: &str = "scaling.csv";
pub const GPUS_FILE: &str = "gpus.csv";
pub const GRANTS_FILE: &str = "grants.csv";

/// Per-function counters kept while running.
#[derive(Debug, Clone, Default)]
pub struct Tallies {
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub launches: u64,
    pub cold_starts: u64,
    pub peak_instances: u32,
    pub iterations: u64,
    pub samples: u64,
}

/// Per-tick sums over active GPUs.
#[derive(Debug, Clone, Default)]
pub struct Accumulators {
    pub ticks: u64,
    pub gpu_ticks: u64,
    pub sm_frag_sum: f64,
    pub mem_frag_sum: f64,
    pub exclusive_gpu_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuRow {
    pub second: u64,
    pub active_gpus: u32,
    pub instances: u32,
    pub mem_used_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrantRow {
    pub tick_ms: u64,
    pub gpu: u32,
    pub instance: u64,
    pub slot: u32,
    pub state: String,
    pub r_issue: u64,
    pub executed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub acc: Accumulators,
    pub scaling: Vec<ScalingEvent>,
    pub gpus: Vec<GpuRow>,
    pub grants: Vec<GrantRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionMetrics {
    pub function: String,
    pub kind: String,
    pub model: String,
    pub requests: u64,
    pub completed: u64,
    /// Completed late plus never completed.
    pub violations: u64,
    pub svr: f64,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub cold_starts: u64,
    pub launches: u64,
    pub peak_instances: u32,
    pub iterations: u64,
    pub samples: u64,
    pub samples_per_s: f64,
    /// Analytic throughput on dedicated full GPUs.
    pub oracle_samples_per_s: f64,
    pub jct_s: Option<f64>,
    pub normalized_jct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub mode: BaselineMode,
    pub seed: u64,
    pub duration_s: f64,
    pub functions: Vec<FunctionMetrics>,
    pub requests: u64,
    pub svr: f64,
    pub cold_starts: u64,
    pub gpu_seconds: f64,
    pub mean_gpus: f64,
    pub peak_gpus: u32,
    pub sm_fragmentation: f64,
    pub mem_fragmentation: f64,
    /// GPU-seconds the same instances would hold with whole GPUs each.
    pub exclusive_gpu_seconds: f64,
    pub saved_gpu_seconds: f64,
    pub inference_rps_per_gpu: f64,
    pub training_samples_per_gpu_s: f64,
    pub training_samples_per_s: f64,
    /// Active GPUs at the end of every second.
    pub gpu_count: Vec<u32>,
}

impl MetricsReport {
    pub fn function(&self, id: &str) -> Option<&FunctionMetrics> {
        self.functions.iter().find(|f| f.function == id)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(METRICS_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub log: RunLog,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn compute_metrics(
    name: &str,
    mode: BaselineMode,
    seed: u64,
    duration_s: f64,
    end_ms: u64,
    vcfg: &VscalerConfig,
    funcs: &[FuncRt],
    requests: &[Request],
    log: RunLog,
) -> RunOutput {
    let tick_s = vcfg.period_ms as f64 / 1000.0;
    let mut functions = Vec::with_capacity(funcs.len());
    let mut total_requests = 0;
    let mut total_violations = 0;
    let mut total_completed = 0;
    let mut total_samples = 0;
    for f in funcs {
        let spec = &f.entry.spec;
        let slo = spec.slo_ms().unwrap_or(f64::INFINITY);
        let mut lat: Vec<f64> = Vec::new();
        let mut n = 0;
        let mut violations = 0;
        for r in requests.iter().filter(|r| r.function_id == spec.id) {
            n += 1;
            match r.latency_ms() {
                Some(l) => {
                    if l as f64 > slo {
                        violations += 1;
                    }
                    lat.push(l as f64);
                }
                None => violations += 1,
            }
        }
        lat.sort_by(f64::total_cmp);
        let t = &f.tallies;
        let (workers, idle) = match spec.kind {
            crate::domain::FunctionKind::Training {
                workers,
                comm_idle_frac,
            } => (workers, comm_idle_frac),
            _ => (0, 0.0),
        };
        let oracle = if workers > 0 {
            train_throughput(&f.model, SmRate(100.0), workers, idle)
        } else {
            0.0
        };
        let active_s = t
            .started_ms
            .map(|s| (t.finished_ms.unwrap_or(end_ms).saturating_sub(s)) as f64 / 1000.0)
            .unwrap_or(0.0);
        let samples_per_s = if active_s > 0.0 { t.samples as f64 / active_s } else { 0.0 };
        let jct_s = match (t.started_ms, t.finished_ms) {
            (Some(s), Some(e)) => Some((e - s) as f64 / 1000.0),
            _ => None,
        };
        let normalized_jct = match (jct_s, f.entry.total_iterations) {
            (Some(j), Some(iters)) if oracle > 0.0 => {
                let ideal = (iters * f.entry.iteration_samples * u64::from(workers)) as f64 / oracle;
                Some(j / ideal)
            }
            _ => None,
        };
        total_requests += n;
        total_violations += violations;
        total_completed += lat.len() as u64;
        total_samples += t.samples;
        functions.push(FunctionMetrics {
            function: spec.id.0.clone(),
            kind: spec.kind_label().to_string(),
            model: spec.model.clone(),
            requests: n,
            completed: lat.len() as u64,
            violations,
            svr: if n > 0 { violations as f64 / n as f64 } else { 0.0 },
            p50_ms: percentile(&lat, 50.0),
            p95_ms: percentile(&lat, 95.0),
            cold_starts: t.cold_starts,
            launches: t.launches,
            peak_instances: t.peak_instances,
            iterations: t.iterations,
            samples: t.samples,
            samples_per_s,
            oracle_samples_per_s: oracle,
            jct_s,
            normalized_jct,
        });
    }
    let acc = &log.acc;
    let gpu_seconds = acc.gpu_ticks as f64 * tick_s;
    let exclusive_gpu_seconds = acc.exclusive_gpu_ticks as f64 * tick_s;
    let frac = |sum: f64| if acc.gpu_ticks > 0 { sum / acc.gpu_ticks as f64 } else { 0.0 };
    let per_gpu = |x: f64| if gpu_seconds > 0.0 { x / gpu_seconds } else { 0.0 };
    let run_s = acc.ticks as f64 * tick_s;
    let metrics = MetricsReport {
        scenario: name.to_string(),
        mode,
        seed,
        duration_s,
        requests: total_requests,
        svr: if total_requests > 0 {
            total_violations as f64 / total_requests as f64
        } else {
            0.0
        },
        cold_starts: functions.iter().map(|f| f.cold_starts).sum(),
        functions,
        gpu_seconds,
        mean_gpus: if run_s > 0.0 { gpu_seconds / run_s } else { 0.0 },
        peak_gpus: log.gpus.iter().map(|g| g.active_gpus).max().unwrap_or(0),
        sm_fragmentation: frac(acc.sm_frag_sum),
        mem_fragmentation: frac(acc.mem_frag_sum),
        exclusive_gpu_seconds,
        saved_gpu_seconds: exclusive_gpu_seconds - gpu_seconds,
        inference_rps_per_gpu: per_gpu(total_completed as f64),
        training_samples_per_gpu_s: per_gpu(total_samples as f64),
        training_samples_per_s: if run_s > 0.0 { total_samples as f64 / run_s } else { 0.0 },
        gpu_count: log.gpus.iter().map(|g| g.active_gpus).collect(),
    };
    RunOutput { metrics, log }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl RunOutput {
    /// Writes `metrics.json`, `scaling.csv`, `gpus.csv` and, when traced,
    /// `grants.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.metrics)?;
        std::fs::write(dir.join(METRICS_FILE), json + "\n")?;
        write_csv(
            &dir.join(SCALING_FILE),
            &self.log.scaling,
            &["second", "function", "decision", "n_before", "n_after"],
        )?;
        write_csv(&dir.join(GPUS_FILE), &self.log.gpus, &["second", "active_gpus", "instances", "mem_used_gb"])?;
        if !self.log.grants.is_empty() {
            write_csv(
                &dir.join(GRANTS_FILE),
                &self.log.grants,
                &["tick_ms", "gpu", "instance", "slot", "state", "r_issue", "executed"],
            )?;
        }
        Ok(())
    }
}
