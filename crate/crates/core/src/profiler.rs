//! Pre-running search for `<request, limit>` SM quotas.
//!
//! Training quotas come from a bisection over SMR against the exclusive
//! throughput `T1`. Inference quotas come from a hybrid growth walk over the
//! `<IBS, SMR>` grid: IBS doubles, SMR grows linearly, and the walk keeps the
//! feasible point with the highest throughput efficacy.

use serde::{Deserialize, Serialize};

use crate::domain::{FunctionKind, FunctionSpec, ResourceQuota, SmRate, SM_TOTAL};
use crate::error::{Error, Result};
use crate::perfmodel::{ModelLibrary, ModelRef, Oracle};

/// Relative slack when comparing efficacies, so that values equal up to
/// rounding count as ties.
const TE_REL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTrial {
    pub trial_index: u32,
    pub smr: SmRate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ibs: Option<u32>,
    /// Throughput (samples/s) for training, latency (ms) for inference.
    pub measured: f64,
}

#[derive(Debug, Default)]
struct TrialLog {
    trials: Vec<ProfileTrial>,
}

impl TrialLog {
    fn push(&mut self, smr: f64, ibs: Option<u32>, measured: f64) {
        let trial_index = self.trials.len() as u32;
        self.trials.push(ProfileTrial {
            trial_index,
            smr: SmRate(smr),
            ibs,
            measured,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingProfileParams {
    pub p_request: f64,
    pub p_limit: f64,
    pub tolerance: f64,
    pub smr_floor: f64,
}

impl Default for TrainingProfileParams {
    fn default() -> Self {
        TrainingProfileParams {
            p_request: 0.80,
            p_limit: 1.00,
            tolerance: 0.02,
            smr_floor: 1.0,
        }
    }
}

impl TrainingProfileParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.p_request && self.p_request <= self.p_limit && self.p_limit <= 1.0) {
            return Err(Error::Invalid("require 0 < p_request ≤ p_limit ≤ 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Invalid("tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingProfile {
    pub quota: ResourceQuota,
    /// Exclusive throughput at 100% SMR.
    pub t1: f64,
    /// Trials spent on each target, both counting the shared `T1` probe.
    pub request_trials: u32,
    pub limit_trials: u32,
    pub trials: Vec<ProfileTrial>,
}

struct Bisection<'a, F> {
    measure: &'a mut F,
    log: &'a mut TrialLog,
    t1: f64,
    tolerance: f64,
    probes: Vec<(f64, f64)>,
}

impl<F: FnMut(SmRate) -> f64> Bisection<'_, F> {
    fn probe(&mut self, smr: f64) -> Result<f64> {
        let t = (self.measure)(SmRate(smr));
        self.log.push(smr, None, t);
        let slack = self.tolerance * self.t1;
        for &(s, v) in &self.probes {
            if (s < smr && v > t + slack) || (s > smr && v < t - slack) {
                return Err(Error::NonMonotoneOracle(format!(
                    "T({s:.3})={v:.3} vs T({smr:.3})={t:.3}"
                )));
            }
        }
        self.probes.push((smr, t));
        Ok(t)
    }

    /// Returns the SMR and the number of probes spent (excluding `T1`).
    fn run(&mut self, p: f64) -> Result<(f64, u32)> {
        let target = self.t1 * p;
        let (mut low, mut high) = (0.0_f64, SM_TOTAL);
        let mut spent = 0;
        while high - low >= 1.0 {
            let mid = (low + high) / 2.0;
            let t = self.probe(mid)?;
            spent += 1;
            // A probe on the saturation plateau never ends the search: a
            // smaller SMR may reach the same throughput.
            if (t - target).abs() <= self.tolerance * target && t < self.t1 {
                return Ok((mid, spent));
            }
            if t < target {
                low = mid;
            } else {
                high = mid;
            }
        }
        Ok((high, spent))
    }
}

/// Bisection search against an arbitrary throughput measurement.
pub fn profile_training_with<F>(
    mut measure: F,
    mem_gb: f64,
    params: &TrainingProfileParams,
) -> Result<TrainingProfile>
where
    F: FnMut(SmRate) -> f64,
{
    params.validate()?;
    let mut log = TrialLog::default();
    let t1 = measure(SmRate::FULL);
    log.push(SM_TOTAL, None, t1);
    if !(t1 > 0.0) {
        return Err(Error::Invalid("exclusive throughput must be positive".into()));
    }
    let mut search = Bisection {
        measure: &mut measure,
        log: &mut log,
        t1,
        tolerance: params.tolerance,
        probes: vec![(SM_TOTAL, t1)],
    };
    let (request, req_spent) = search.run(params.p_request)?;
    let (limit, lim_spent) = search.run(params.p_limit)?;
    let request = request.max(params.smr_floor);
    let limit = limit.max(params.smr_floor).max(request);
    Ok(TrainingProfile {
        quota: ResourceQuota::new(request, limit, mem_gb),
        t1,
        request_trials: 1 + req_spent,
        limit_trials: 1 + lim_spent,
        trials: log.trials,
    })
}

pub fn profile_training(
    model: &ModelRef,
    workers: u32,
    comm_idle_frac: f64,
    params: &TrainingProfileParams,
    oracle: &Oracle,
) -> Result<TrainingProfile> {
    profile_training_with(
        |smr| oracle.measure_throughput(model, smr, workers, comm_idle_frac),
        model.mem_gb,
        params,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceProfileParams {
    pub smr_step: f64,
    pub ibs_max: u32,
}

impl Default for InferenceProfileParams {
    fn default() -> Self {
        InferenceProfileParams {
            smr_step: 10.0,
            ibs_max: 32,
        }
    }
}

impl InferenceProfileParams {
    /// IBS levels visited by a full traversal: 1, 2, 4, ... ≤ `ibs_max`.
    pub fn ibs_levels(&self) -> Vec<u32> {
        std::iter::successors(Some(1u32), |&b| b.checked_mul(2))
            .take_while(|&b| b <= self.ibs_max)
            .collect()
    }

    /// SMR grid points `step, 2·step, ..., ≤ 100`.
    pub fn smr_levels(&self) -> Vec<f64> {
        let n = (SM_TOTAL / self.smr_step + 1e-9).floor() as u32;
        (1..=n).map(|k| k as f64 * self.smr_step).collect()
    }

    pub fn grid_size(&self) -> usize {
        self.ibs_levels().len() * self.smr_levels().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub ibs: u32,
    pub smr: f64,
    pub t_exec_ms: f64,
    pub te: f64,
}

impl GridPoint {
    /// Strictly higher efficacy, beyond rounding noise.
    pub fn beats(&self, other: &GridPoint) -> bool {
        self.te > other.te * (1.0 + TE_REL_EPS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceProfile {
    pub quota: ResourceQuota,
    pub optimum: GridPoint,
    pub trials: Vec<ProfileTrial>,
}

impl InferenceProfile {
    pub fn trial_count(&self) -> usize {
        self.trials.len()
    }
}

pub fn throughput_efficacy(ibs: u32, t_exec_ms: f64, smr: SmRate) -> Result<f64> {
    let denom = t_exec_ms * smr.0;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::ZeroDenominator);
    }
    Ok(ibs as f64 / denom)
}

/// Hybrid growth search against an arbitrary latency measurement.
///
/// Within one IBS level the first feasible SMR is the most efficient one
/// because efficacy never increases with SMR at fixed IBS. The walk stops at
/// the first level that is blocked (no feasible SMR) or whose best efficacy
/// does not beat the incumbent.
pub fn profile_inference_with<F>(
    mut latency: F,
    slo_ms: f64,
    mem_gb: f64,
    params: &InferenceProfileParams,
) -> Result<InferenceProfile>
where
    F: FnMut(u32, SmRate) -> Result<f64>,
{
    if !(slo_ms > 0.0) {
        return Err(Error::Invalid("slo_ms must be positive".into()));
    }
    let budget = slo_ms / 2.0;
    let smrs = params.smr_levels();
    let mut log = TrialLog::default();
    let mut incumbent: Option<GridPoint> = None;
    let mut start = 0usize;

    for ibs in params.ibs_levels() {
        let mut level_best = None;
        for (k, &smr) in smrs.iter().enumerate().skip(start) {
            let t = latency(ibs, SmRate(smr))?;
            log.push(smr, Some(ibs), t);
            if t <= budget {
                let te = throughput_efficacy(ibs, t, SmRate(smr))?;
                level_best = Some((
                    k,
                    GridPoint {
                        ibs,
                        smr,
                        t_exec_ms: t,
                        te,
                    },
                ));
                break;
            }
        }
        let Some((k, point)) = level_best else {
            break;
        };
        match incumbent {
            Some(inc) if !point.beats(&inc) => break,
            _ => incumbent = Some(point),
        }
        start = k;
    }

    let best = incumbent.ok_or_else(|| Error::SloUnattainable(format!("slo {slo_ms} ms")))?;
    let quota = ResourceQuota::new(best.smr, (2.0 * best.smr).min(SM_TOTAL), mem_gb).with_ibs(best.ibs);
    Ok(InferenceProfile {
        quota,
        optimum: best,
        trials: log.trials,
    })
}

pub fn profile_inference(
    model: &ModelRef,
    slo_ms: f64,
    params: &InferenceProfileParams,
    oracle: &Oracle,
) -> Result<InferenceProfile> {
    profile_inference_with(
        |ibs, smr| oracle.measure_latency(model, ibs, smr),
        slo_ms,
        model.mem_gb,
        params,
    )
    .map_err(|e| match e {
        Error::SloUnattainable(_) => Error::SloUnattainable(format!("{} at {slo_ms} ms", model.name)),
        other => other,
    })
}

/// One entry of a profiling report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub function: String,
    pub model: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<ResourceQuota>,
    pub trial_count: u32,
    #[serde(default)]
    pub trials: Vec<ProfileTrial>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub functions: Vec<ProfileRecord>,
}

impl ProfileReport {
    pub fn quota_of(&self, function: &str) -> Option<ResourceQuota> {
        self.functions
            .iter()
            .find(|r| r.function == function)
            .and_then(|r| r.quota)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Profiler {
    pub oracle: Oracle,
    pub training: TrainingProfileParams,
    pub inference: InferenceProfileParams,
}

impl Profiler {
    pub fn profile(&self, spec: &FunctionSpec, models: &ModelLibrary) -> Result<ProfileRecord> {
        let model = models.get(&spec.model)?;
        let (quota, trial_count, trials) = match spec.kind {
            FunctionKind::Training {
                workers,
                comm_idle_frac,
            } => {
                let p = profile_training(model, workers, comm_idle_frac, &self.training, &self.oracle)?;
                (p.quota, p.trials.len() as u32, p.trials)
            }
            FunctionKind::Inference { slo_ms, .. } => {
                let p = profile_inference(model, slo_ms, &self.inference, &self.oracle)?;
                (p.quota, p.trials.len() as u32, p.trials)
            }
        };
        Ok(ProfileRecord {
            function: spec.id.0.clone(),
            model: spec.model.clone(),
            kind: spec.kind_label().to_string(),
            quota: Some(quota),
            trial_count,
            trials,
            error: None,
        })
    }

    /// Profiles every function, recording failures instead of aborting.
    pub fn profile_all(&self, specs: &[FunctionSpec], models: &ModelLibrary) -> ProfileReport {
        let functions = specs
            .iter()
            .map(|spec| {
                self.profile(spec, models).unwrap_or_else(|e| ProfileRecord {
                    function: spec.id.0.clone(),
                    model: spec.model.clone(),
                    kind: spec.kind_label().to_string(),
                    quota: None,
                    trial_count: 0,
                    trials: Vec::new(),
                    error: Some(e.to_string()),
                })
            })
            .collect();
        ProfileReport { functions }
    }

    /// Fills `spec.quota` in place when it is absent.
    pub fn ensure_quota(&self, spec: &mut FunctionSpec, models: &ModelLibrary) -> Result<ResourceQuota> {
        if let Some(q) = spec.quota {
            return Ok(q);
        }
        let record = self.profile(spec, models)?;
        let q = record.quota.expect("successful profile has a quota");
        spec.quota = Some(q);
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::infer_exec_time;

    fn exhaustive_optimum(model: &ModelRef, slo_ms: f64) -> Option<GridPoint> {
        let params = InferenceProfileParams::default();
        let mut best: Option<GridPoint> = None;
        for ibs in [1u32, 2, 4, 8, 16, 32] {
            for k in 1..=10 {
                let smr = k as f64 * 10.0;
                let t = infer_exec_time(model, ibs, SmRate(smr)).unwrap();
                if t > slo_ms / 2.0 {
                    continue;
                }
                let p = GridPoint {
                    ibs,
                    smr,
                    t_exec_ms: t,
                    te: ibs as f64 / (t * smr),
                };
                if best.is_none_or(|b| p.beats(&b)) {
                    best = Some(p);
                }
            }
        }
        assert_eq!(params.grid_size(), 60);
        best
    }

    #[test]
    fn linear_oracle_bisection_by_hand() {
        let params = TrainingProfileParams::default();
        let p = profile_training_with(|s| s.0, 1.0, &params).unwrap();
        let probes: Vec<f64> = p.trials.iter().map(|t| t.smr.0).collect();
        assert_eq!(&probes[..5], &[100.0, 50.0, 75.0, 87.5, 81.25]);
        assert_eq!(p.quota.request_smr.0, 81.25);
        assert_eq!(p.request_trials, 5);
        assert!(p.limit_trials <= 8);
    }

    #[test]
    fn plateau_limit_converges_near_knee() {
        let params = TrainingProfileParams::default();
        let p = profile_training_with(|s| (s.0 / 60.0).min(1.0) * 50.0, 1.0, &params).unwrap();
        let lim = p.quota.limit_smr.0;
        assert!((58.8..=61.2).contains(&lim), "limit {lim}");
        assert!(p.limit_trials <= 8 && p.request_trials <= 8);
        assert!(p.quota.request_smr.0 <= lim);
    }

    #[test]
    fn non_monotone_oracle_is_rejected() {
        let params = TrainingProfileParams::default();
        let err = profile_training_with(|s| if s.0 < 60.0 { 100.0 } else { 10.0 + s.0 }, 1.0, &params);
        assert!(matches!(err, Err(Error::NonMonotoneOracle(_))));
    }

    #[test]
    fn efficacy_formula() {
        assert!((throughput_efficacy(4, 25.0, SmRate(40.0)).unwrap() - 0.004).abs() < 1e-15);
        let a = throughput_efficacy(4, 25.0, SmRate(40.0)).unwrap();
        let b = throughput_efficacy(4, 25.0, SmRate(80.0)).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert_eq!(throughput_efficacy(8, 50.0, SmRate(40.0)).unwrap(), a);
        assert!(throughput_efficacy(4, 0.0, SmRate(40.0)).is_err());
        assert!(throughput_efficacy(4, 10.0, SmRate(0.0)).is_err());
    }

    #[test]
    fn builtin_profiles_match_exhaustive_grid() {
        let lib = ModelLibrary::builtin();
        for m in lib.iter() {
            let slo = m.default_slo_ms.unwrap();
            let p = profile_inference(m, slo, &InferenceProfileParams::default(), &Oracle::exact()).unwrap();
            let brute = exhaustive_optimum(m, slo).unwrap();
            assert_eq!((p.optimum.ibs, p.optimum.smr), (brute.ibs, brute.smr), "{}", m.name);
            assert!(p.trial_count() < 60);
            assert!(p.optimum.t_exec_ms <= slo / 2.0);
            assert_eq!(p.quota.limit_smr.0, (2.0 * p.quota.request_smr.0).min(100.0));
        }
    }

    #[test]
    fn unattainable_slo() {
        let lib = ModelLibrary::builtin();
        let m = lib.get("resnet152-like").unwrap();
        let floor = infer_exec_time(m, 1, SmRate(100.0)).unwrap();
        let err = profile_inference(m, floor * 2.0 * 0.99, &InferenceProfileParams::default(), &Oracle::exact());
        assert!(matches!(err, Err(Error::SloUnattainable(_))));
    }

    #[test]
    fn profile_all_keeps_going_after_failure() {
        let lib = ModelLibrary::builtin();
        let specs = vec![
            FunctionSpec::inference("bad", "resnet152-like", 1.0, false),
            FunctionSpec::training("ok", "roberta-large-like", 2, 0.3),
        ];
        let report = Profiler::default().profile_all(&specs, &lib);
        assert!(report.functions[0].error.is_some());
        assert!(report.quota_of("ok").is_some());
    }

    #[test]
    fn trial_indices_increase() {
        let lib = ModelLibrary::builtin();
        let m = lib.get("llama2-7b-like").unwrap();
        let p = profile_inference(m, 180.0, &InferenceProfileParams::default(), &Oracle::exact()).unwrap();
        assert!(p.trials.windows(2).all(|w| w[0].trial_index < w[1].trial_index));
    }
}
