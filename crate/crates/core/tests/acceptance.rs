//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dilu_core::domain::{FunctionSpec, SmRate};
use dilu_core::perfmodel::{infer_exec_time, train_throughput, ModelLibrary, Oracle};
use dilu_core::profiler::{
    profile_inference, profile_training, InferenceProfileParams, Profiler, TrainingProfileParams,
};
use dilu_core::sim::{
    run, run_large_scale, BaselineMode, FleetReport, FleetSpec, FunctionEntry, RunOutput, Scenario,
    WorkloadPattern,
};
use dilu_core::Error;

const MODELS: [&str; 4] = ["resnet152-like", "roberta-large-like", "gpt2-large-like", "llama2-7b-like"];
const TRIAL_BOUNDS: [usize; 4] = [10, 8, 8, 11];
const TRAINING_SHAPES: [(u32, f64); 3] = [(1, 0.0), (2, 0.2), (4, 0.4)];
const GAMMAS: [f64; 5] = [1.0, 1.25, 1.5, 1.75, 2.0];

/// Named byte blobs a criterion wrote; reruns must reproduce them exactly.
type Artifacts = Vec<(String, Vec<u8>)>;

struct Outcome {
    pass: bool,
    detail: String,
    artifacts: Artifacts,
}

fn outcome(pass: bool, detail: String, artifacts: Artifacts) -> Outcome {
    Outcome {
        pass,
        detail,
        artifacts,
    }
}

fn scratch_dir(label: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("dilu-acceptance-{}-{label}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run_files(label: &str, out: &RunOutput) -> Artifacts {
    let dir = scratch_dir(label);
    out.write(&dir).expect("write run output");
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let blobs = files
        .iter()
        .map(|p| (format!("{label}/{}", name_of(p)), std::fs::read(p).unwrap()))
        .collect();
    std::fs::remove_dir_all(&dir).ok();
    blobs
}

fn name_of(p: &Path) -> String {
    p.file_name().unwrap().to_string_lossy().into_owned()
}

fn fleet_blob(label: &str, r: &FleetReport) -> (String, Vec<u8>) {
    (label.to_string(), serde_json::to_vec_pretty(r).unwrap())
}

fn exhaustive_optimum(model: &dilu_core::perfmodel::ModelRef, slo_ms: f64) -> (u32, f64) {
    let mut best: Option<(f64, u32, f64)> = None;
    for ibs in [1u32, 2, 4, 8, 16, 32] {
        for k in 1..=10 {
            let smr = f64::from(k) * 10.0;
            let t = infer_exec_time(model, ibs, SmRate(smr)).unwrap();
            if t > slo_ms / 2.0 {
                continue;
            }
            let te = f64::from(ibs) / (t * smr);
            if best.is_none_or(|(b, _, _)| te > b * (1.0 + 1e-9)) {
                best = Some((te, ibs, smr));
            }
        }
    }
    let (_, ibs, smr) = best.expect("some feasible grid point");
    (ibs, smr)
}

fn criterion_1() -> Outcome {
    let lib = ModelLibrary::builtin();
    let started = Instant::now();
    let mut counts = Vec::new();
    let mut pass = true;
    for (name, bound) in MODELS.iter().zip(TRIAL_BOUNDS) {
        let m = lib.get(name).unwrap();
        let p = profile_inference(m, m.default_slo_ms.unwrap(), &InferenceProfileParams::default(), &Oracle::exact())
            .unwrap();
        counts.push(p.trial_count());
        pass &= p.trial_count() <= bound && p.trial_count() < 60;
    }
    let mut worst_bisect = 0;
    for name in MODELS {
        let m = lib.get(name).unwrap();
        for (workers, idle) in TRAINING_SHAPES {
            let p = profile_training(m, workers, idle, &TrainingProfileParams::default(), &Oracle::exact()).unwrap();
            worst_bisect = worst_bisect.max(p.request_trials).max(p.limit_trials);
        }
    }
    pass &= worst_bisect <= 8;
    let elapsed = started.elapsed();
    pass &= elapsed < Duration::from_secs(1);

    let specs: Vec<FunctionSpec> = MODELS
        .iter()
        .map(|n| FunctionSpec::inference(n, n, lib.get(n).unwrap().default_slo_ms.unwrap(), false))
        .chain(MODELS.iter().map(|n| FunctionSpec::training(&format!("train-{n}"), n, 2, 0.2)))
        .collect();
    let report = Profiler::default().profile_all(&specs, &lib);
    outcome(
        pass,
        format!("inference trials {counts:?} (bounds {TRIAL_BOUNDS:?}), bisection ≤ {worst_bisect}, {elapsed:.2?}"),
        vec![("profile.json".into(), serde_json::to_vec_pretty(&report).unwrap())],
    )
}

fn criterion_2() -> Outcome {
    let lib = ModelLibrary::builtin();
    let mut pass = true;
    let mut found = Vec::new();
    for name in MODELS {
        let m = lib.get(name).unwrap();
        let slo = m.default_slo_ms.unwrap();
        let p = profile_inference(m, slo, &InferenceProfileParams::default(), &Oracle::exact()).unwrap();
        let brute = exhaustive_optimum(m, slo);
        pass &= (p.optimum.ibs, p.optimum.smr) == brute;
        found.push((p.optimum.ibs, p.optimum.smr));
    }
    let params = TrainingProfileParams::default();
    let mut worst_band = 0.0_f64;
    for name in MODELS {
        let m = lib.get(name).unwrap();
        for (workers, idle) in TRAINING_SHAPES {
            let p = profile_training(m, workers, idle, &params, &Oracle::exact()).unwrap();
            for (smr, target) in [(p.quota.request_smr, params.p_request), (p.quota.limit_smr, params.p_limit)] {
                let want = p.t1 * target;
                let got = train_throughput(m, smr, workers, idle);
                worst_band = worst_band.max((got - want).abs() / want);
            }
        }
    }
    pass &= worst_band <= params.tolerance + 1e-12;
    outcome(
        pass,
        format!("optima {found:?} match the grid, worst training band {:.2}%", worst_band * 100.0),
        Vec::new(),
    )
}

fn fleet(mode: BaselineMode, gamma: f64) -> FleetReport {
    let mut spec = FleetSpec {
        mode,
        ..FleetSpec::default()
    };
    spec.scheduler.gamma = gamma;
    run_large_scale(&spec).unwrap()
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let dilu = fleet(BaselineMode::Dilu, 1.5);
    let excl = fleet(BaselineMode::Exclusive, 1.5);
    let lim = fleet(BaselineMode::StaticLimit, 1.5);
    let elapsed = started.elapsed();
    let vs_excl = 1.0 - dilu.mean_gpus / excl.mean_gpus;
    let vs_lim = 1.0 - dilu.mean_gpus / lim.mean_gpus;
    let pass = vs_excl >= 0.20 && vs_lim >= 0.10 && elapsed < Duration::from_secs(60) && dilu.failed == 0;
    outcome(
        pass,
        format!(
            "mean GPUs dilu {:.1} exclusive {:.1} static_limit {:.1}: -{:.0}% / -{:.0}%, {elapsed:.2?}",
            dilu.mean_gpus,
            excl.mean_gpus,
            lim.mean_gpus,
            vs_excl * 100.0,
            vs_lim * 100.0
        ),
        vec![
            fleet_blob("fleet-dilu.json", &dilu),
            fleet_blob("fleet-exclusive.json", &excl),
            fleet_blob("fleet-static-limit.json", &lim),
        ],
    )
}

fn criterion_4() -> Outcome {
    let r = fleet(BaselineMode::Dilu, 1.5);
    let pass = r.placements == 3200 && r.failed == 0 && r.decision_time < Duration::from_secs(2);
    outcome(
        pass,
        format!("{} placements ({} failed) decided in {:.2?}", r.placements, r.failed, r.decision_time),
        vec![fleet_blob("fleet-latency.json", &r)],
    )
}

fn collocation(mode: BaselineMode, workload: WorkloadPattern, fixed_instances: bool) -> RunOutput {
    let lib = ModelLibrary::builtin();
    let slo = lib.get("resnet152-like").unwrap().default_slo_ms.unwrap();
    let mut s = Scenario::new("collocation", 7, 120.0, 1, 4);
    s.mode = mode;
    if fixed_instances {
        s.hscaler.phi_out = 40;
        s.hscaler.phi_in = 40;
    }
    s.functions
        .push(FunctionEntry::new(FunctionSpec::training("train", "roberta-large-like", 1, 0.0)));
    s.functions.push(
        FunctionEntry::new(FunctionSpec::inference("infer", "resnet152-like", slo, false)).with_workload(workload),
    );
    run(&s).unwrap()
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let poisson = WorkloadPattern::Poisson { mean_rps: 5.0 };
    let gamma = WorkloadPattern::Gamma {
        mean_rps: 210.0,
        cv: 6.0,
    };
    let p_dilu = collocation(BaselineMode::Dilu, poisson.clone(), false);
    let p_req = collocation(BaselineMode::StaticRequest, poisson, false);
    let g_dilu = collocation(BaselineMode::Dilu, gamma.clone(), true);
    let g_req = collocation(BaselineMode::StaticRequest, gamma, true);
    let elapsed = started.elapsed();

    let p95 = |o: &RunOutput| o.metrics.function("infer").unwrap().p95_ms.unwrap_or(f64::INFINITY);
    let train = p_dilu.metrics.function("train").unwrap();
    let share = train.samples_per_s / train.oracle_samples_per_s;
    let ratio = p95(&g_req) / p95(&g_dilu);
    let pass = p95(&p_dilu) <= p95(&p_req) && share >= 0.90 && ratio >= 2.0 && elapsed < Duration::from_secs(120);
    let mut artifacts = run_files("collocation-poisson-dilu", &p_dilu);
    artifacts.extend(run_files("collocation-poisson-static-request", &p_req));
    artifacts.extend(run_files("collocation-gamma-dilu", &g_dilu));
    artifacts.extend(run_files("collocation-gamma-static-request", &g_req));
    outcome(
        pass,
        format!(
            "poisson p95 dilu {} ≤ static_request {}, training {:.1}% of oracle; gamma cv=6 p95 ratio {ratio:.2}, {elapsed:.2?}",
            p95(&p_dilu),
            p95(&p_req),
            share * 100.0
        ),
        artifacts,
    )
}

fn bursty(mode: BaselineMode) -> RunOutput {
    let lib = ModelLibrary::builtin();
    let mut s = Scenario::new("bursty", 7, 300.0, 1, 4);
    s.mode = mode;
    for (i, model) in ["resnet152-like", "roberta-large-like", "gpt2-large-like"].iter().enumerate() {
        let slo = lib.get(model).unwrap().default_slo_ms.unwrap();
        let workload = WorkloadPattern::Bursty {
            base_rps: 40.0 / f64::from(1u32 << i),
            burst_scale: 4.0,
            burst_period_s: 100.0,
            burst_len_s: 10.0,
            burst_offset_s: Some(30.0 + 10.0 * i as f64),
        };
        s.functions
            .push(FunctionEntry::new(FunctionSpec::inference(&format!("f{i}"), model, slo, false)).with_workload(workload));
    }
    run(&s).unwrap()
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let dilu = bursty(BaselineMode::Dilu);
    let eager = bursty(BaselineMode::EagerHorizontal);
    let elapsed = started.elapsed();
    let (d, e) = (&dilu.metrics, &eager.metrics);
    let pass = e.cold_starts > 0
        && 2 * d.cold_starts <= e.cold_starts
        && d.svr < e.svr
        && elapsed < Duration::from_secs(120);
    let mut artifacts = run_files("bursty-dilu", &dilu);
    artifacts.extend(run_files("bursty-eager-horizontal", &eager));
    outcome(
        pass,
        format!(
            "cold starts dilu {} vs eager {}, svr {:.4} vs {:.4}, {elapsed:.2?}",
            d.cold_starts, e.cold_starts, d.svr, e.svr
        ),
        artifacts,
    )
}

fn criterion_7() -> Outcome {
    let reports: Vec<FleetReport> = GAMMAS.iter().map(|&g| fleet(BaselineMode::Dilu, g)).collect();
    let gpus: Vec<f64> = reports.iter().map(|r| r.mean_gpus).collect();
    let at = |g: f64| gpus[GAMMAS.iter().position(|&x| x == g).unwrap()];
    let non_increasing = gpus.windows(2).all(|w| w[1] <= w[0]);
    let first = at(1.0) - at(1.5);
    let second = at(1.5) - at(2.0);
    let pass = non_increasing && second < first;
    let shown: Vec<String> = gpus.iter().map(|g| format!("{g:.1}")).collect();
    outcome(
        pass,
        format!("mean GPUs over gamma {GAMMAS:?}: [{}], drops {first:.1} then {second:.1}", shown.join(", ")),
        reports
            .iter()
            .map(|r| fleet_blob(&format!("fleet-gamma-{}.json", r.gamma), r))
            .collect(),
    )
}

fn criterion_8() -> Outcome {
    let mut failures = Vec::new();
    let mut artifacts = Vec::new();
    let mut modes = std::collections::BTreeSet::new();
    for seed in 1..=20u64 {
        let s = Scenario::randomized(seed, 50.0);
        assert!(s.check_invariants);
        modes.insert(s.mode.label());
        match run(&s) {
            Ok(out) => artifacts.extend(run_files(&format!("randomized-{seed}"), &out)),
            Err(e @ Error::Invariant { .. }) => failures.push(format!("seed {seed}: {e}")),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("20 seeds × 10000 ticks clean across modes {modes:?}")
    } else {
        failures.join("; ")
    };
    outcome(pass, detail, artifacts)
}

type Criterion = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 8] = [
        ("profiling efficiency", criterion_1),
        ("profiling correctness", criterion_2),
        ("scheduler packing", criterion_3),
        ("scheduling latency", criterion_4),
        ("vertical scaling benefit", criterion_5),
        ("co-scaling", criterion_6),
        ("gamma sensitivity", criterion_7),
        ("invariant suite", criterion_8),
    ];
    let mut all_pass = true;
    let mut first_runs = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        println!("criterion {} {name}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        all_pass &= o.pass;
        first_runs.push(o.artifacts);
    }

    let mut differing = Vec::new();
    let mut compared = 0;
    for ((_, f), first) in criteria.iter().zip(&first_runs) {
        let again = f().artifacts;
        if again.len() != first.len() {
            differing.push(format!("artifact count {} vs {}", first.len(), again.len()));
        }
        for ((name, a), (_, b)) in first.iter().zip(&again) {
            compared += 1;
            if a != b {
                differing.push(name.clone());
            }
        }
    }
    let pass = differing.is_empty() && compared > 0;
    let detail = if pass {
        format!("{compared} metric files byte-identical on rerun")
    } else {
        format!("differing: {}", differing.join(", "))
    };
    println!("criterion 9 determinism: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    all_pass &= pass;

    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
