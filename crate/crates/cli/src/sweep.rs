//! One run per grid point along a single parameter axis.

use std::path::{Path, PathBuf};

use dilu_core::sim::{run, run_large_scale, BaselineMode, FleetSpec, RunOutput, Scenario, WorkloadPattern};
use rayon::prelude::*;
use serde::Serialize;

use crate::{io_err, load_fleet, load_scenario, write_text, CliError, CliResult, FLEET_FILE};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const THREADS_ENV: &str = "DILU_SIM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Gamma,
    MaxTokens,
    Cv,
    MeanRps,
}

impl Axis {
    pub fn parse(s: &str) -> CliResult<Axis> {
        match s {
            "gamma" => Ok(Axis::Gamma),
            "max_tokens" => Ok(Axis::MaxTokens),
            "cv" => Ok(Axis::Cv),
            "mean_rps" => Ok(Axis::MeanRps),
            _ => Err(CliError::Usage(format!(
                "unknown axis {s:?}; expected gamma, max_tokens, cv or mean_rps"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::Gamma => "gamma",
            Axis::MaxTokens => "max_tokens",
            Axis::Cv => "cv",
            Axis::MeanRps => "mean_rps",
        }
    }
}

pub struct SweepArgs {
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub axis: Axis,
    pub points: Vec<f64>,
    pub seed: Option<u64>,
    pub modes: Vec<BaselineMode>,
    pub fleet: bool,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    axis: &'static str,
    value: f64,
    mode: BaselineMode,
    requests: u64,
    svr: f64,
    /// Worst p95 over inference functions.
    p95_ms: Option<f64>,
    cold_starts: u64,
    mean_gpus: f64,
    peak_gpus: u32,
    sm_fragmentation: f64,
    mem_fragmentation: f64,
    training_samples_per_s: f64,
}

/// Sets every inference workload's rate or burstiness.
fn retarget(w: &WorkloadPattern, axis: Axis, v: f64) -> WorkloadPattern {
    use WorkloadPattern::*;
    match (axis, w.clone()) {
        (Axis::Cv, Poisson { mean_rps } | Gamma { mean_rps, .. }) => Gamma { mean_rps, cv: v },
        (Axis::MeanRps, Poisson { .. }) => Poisson { mean_rps: v },
        (Axis::MeanRps, Gamma { cv, .. }) => Gamma { mean_rps: v, cv },
        (Axis::MeanRps, Periodic { amplitude, period_s, .. }) => Periodic {
            mean_rps: v,
            amplitude,
            period_s,
        },
        (Axis::MeanRps, Bursty { burst_scale, burst_period_s, burst_len_s, burst_offset_s, .. }) => Bursty {
            base_rps: v,
            burst_scale,
            burst_period_s,
            burst_len_s,
            burst_offset_s,
        },
        (Axis::MeanRps, Sporadic { active_len_s, mean_gap_s, .. }) => Sporadic {
            active_rps: v,
            active_len_s,
            mean_gap_s,
        },
        (_, other) => other,
    }
}

pub fn apply_axis(s: &mut Scenario, axis: Axis, v: f64) -> CliResult<()> {
    match axis {
        Axis::Gamma => s.scheduler.gamma = v,
        Axis::MaxTokens => {
            if v.is_nan() || v < 1.0 || v.fract() != 0.0 {
                return Err(CliError::Usage(format!("max_tokens must be a positive integer, got {v}")));
            }
            s.vscaler.max_tokens = v as u64;
        }
        Axis::Cv | Axis::MeanRps => {
            for f in &mut s.functions {
                if let Some(w) = &f.workload {
                    f.workload = Some(retarget(w, axis, v));
                }
            }
        }
    }
    s.validate()?;
    Ok(())
}

fn point_dir(out: &Path, axis: Axis, v: f64, mode: BaselineMode) -> PathBuf {
    out.join(format!("{}={v}", axis.label())).join(mode.label())
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Io(e.to_string()))
}

fn scenario_row(axis: Axis, v: f64, out: &RunOutput) -> SweepRow {
    let m = &out.metrics;
    SweepRow {
        axis: axis.label(),
        value: v,
        mode: m.mode,
        requests: m.requests,
        svr: m.svr,
        p95_ms: m.functions.iter().filter_map(|f| f.p95_ms).reduce(f64::max),
        cold_starts: m.cold_starts,
        mean_gpus: m.mean_gpus,
        peak_gpus: m.peak_gpus,
        sm_fragmentation: m.sm_fragmentation,
        mem_fragmentation: m.mem_fragmentation,
        training_samples_per_s: m.training_samples_per_s,
    }
}

fn sweep_scenarios(args: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    let mut base = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    let modes = if args.modes.is_empty() { vec![base.mode] } else { args.modes.clone() };
    let mut jobs = Vec::new();
    for &v in &args.points {
        for &mode in &modes {
            let mut s = base.clone();
            s.mode = mode;
            apply_axis(&mut s, args.axis, v)?;
            jobs.push((v, s));
        }
    }
    let pool = thread_pool()?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(v, s)| {
                let out = run(s)?;
                out.write(&point_dir(&args.out, args.axis, *v, s.mode))?;
                Ok(scenario_row(args.axis, *v, &out))
            })
            .collect()
    })
}

fn sweep_fleet(args: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    if args.axis != Axis::Gamma {
        return Err(CliError::Usage(format!("fleet sweeps support only gamma, not {}", args.axis.label())));
    }
    let mut base = load_fleet(&args.scenario)?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    let modes = if args.modes.is_empty() { vec![base.mode] } else { args.modes.clone() };
    let mut jobs: Vec<(f64, FleetSpec)> = Vec::new();
    for &v in &args.points {
        for &mode in &modes {
            let mut spec = base.clone();
            spec.mode = mode;
            spec.scheduler.gamma = v;
            spec.validate()?;
            jobs.push((v, spec));
        }
    }
    let pool = thread_pool()?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(v, spec)| {
                let r = run_large_scale(spec)?;
                let json = serde_json::to_string_pretty(&r).map_err(|e| CliError::Io(e.to_string()))?;
                write_text(&point_dir(&args.out, args.axis, *v, spec.mode).join(FLEET_FILE), &(json + "\n"))?;
                Ok(SweepRow {
                    axis: args.axis.label(),
                    value: *v,
                    mode: r.mode,
                    requests: 0,
                    svr: 0.0,
                    p95_ms: None,
                    cold_starts: 0,
                    mean_gpus: r.mean_gpus,
                    peak_gpus: r.peak_gpus,
                    sm_fragmentation: r.sm_fragmentation,
                    mem_fragmentation: r.mem_fragmentation,
                    training_samples_per_s: 0.0,
                })
            })
            .collect()
    })
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let rows = if args.fleet { sweep_fleet(args)? } else { sweep_scenarios(args)? };
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let path = args.out.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!("{:<10} {:>10} {:<18} {:>8} {:>10} {:>6} {:>10}", "axis", "value", "mode", "svr", "p95_ms", "csc", "mean_gpus");
    for r in &rows {
        println!(
            "{:<10} {:>10} {:<18} {:>8.4} {:>10} {:>6} {:>10.2}",
            r.axis,
            r.value,
            r.mode.label(),
            r.svr,
            r.p95_ms.map_or("-".to_string(), |p| p.to_string()),
            r.cold_starts,
            r.mean_gpus
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cv_turns_poisson_into_gamma_with_same_mean() {
        let w = retarget(&WorkloadPattern::Poisson { mean_rps: 7.0 }, Axis::Cv, 3.0);
        assert_eq!(w, WorkloadPattern::Gamma { mean_rps: 7.0, cv: 3.0 });
    }

    #[test]
    fn mean_rps_keeps_burst_shape() {
        let w = WorkloadPattern::Bursty {
            base_rps: 1.0,
            burst_scale: 4.0,
            burst_period_s: 100.0,
            burst_len_s: 10.0,
            burst_offset_s: None,
        };
        match retarget(&w, Axis::MeanRps, 9.0) {
            WorkloadPattern::Bursty { base_rps, burst_scale, .. } => assert_eq!((base_rps, burst_scale), (9.0, 4.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [Axis::Gamma, Axis::MaxTokens, Axis::Cv, Axis::MeanRps] {
            assert_eq!(Axis::parse(a.label()).unwrap(), a);
        }
        assert!(Axis::parse("omega").is_err());
    }
}
