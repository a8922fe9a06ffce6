//! Lazy horizontal scaling from a per-function sliding window of RPS samples.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::domain::{FunctionId, FunctionSpec, SmRate};
use crate::error::{Error, Result};
use crate::perfmodel::{infer_exec_time, ModelRef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HscalerConfig {
    pub window_s: usize,
    pub phi_out: usize,
    pub phi_in: usize,
    pub min_instances: u32,
    /// With `min_instances = 0`, the last instance stops after this many
    /// consecutive silent seconds.
    pub idle_terminate_s: Option<u64>,
}

impl Default for HscalerConfig {
    fn default() -> Self {
        HscalerConfig {
            window_s: 40,
            phi_out: 20,
            phi_in: 30,
            min_instances: 1,
            idle_terminate_s: None,
        }
    }
}

impl HscalerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_s == 0 {
            return Err(Error::Invalid("window_s must be positive".into()));
        }
        if self.phi_out == 0 || self.phi_out > self.window_s || self.phi_in > self.window_s {
            return Err(Error::Invalid("need 1 ≤ phi_out ≤ window_s and phi_in ≤ window_s".into()));
        }
        // out needs phi_out samples above capacity(n), in needs phi_in + 1
        // samples below capacity(n-1); both cannot hold in one window.
        if self.phi_out + self.phi_in < self.window_s {
            return Err(Error::Invalid(
                "phi_out + phi_in must be at least window_s so scale-out and scale-in exclude each other".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpsWindow {
    samples: VecDeque<u64>,
    len: usize,
    recorded: usize,
    last_second: Option<u64>,
    idle_run: u64,
}

impl RpsWindow {
    pub fn new(len: usize) -> Self {
        RpsWindow {
            samples: VecDeque::with_capacity(len),
            len,
            recorded: 0,
            last_second: None,
            idle_run: 0,
        }
    }

    fn push(&mut self, count: u64) {
        if self.samples.len() == self.len {
            self.samples.pop_front();
        }
        self.samples.push_back(count);
        self.recorded += 1;
        self.idle_run = if count == 0 { self.idle_run + 1 } else { 0 };
    }

    /// Records `count` requests for `second`; skipped seconds count as zero.
    pub fn record(&mut self, second: u64, count: u64) -> Result<()> {
        match self.last_second {
            Some(last) if second < last => {
                return Err(Error::Invalid(format!("second {second} before {last}")));
            }
            Some(last) if second == last => {
                let newest = self.samples.back_mut().expect("recorded");
                *newest += count;
                if count > 0 {
                    self.idle_run = 0;
                }
                return Ok(());
            }
            Some(last) => {
                for _ in last + 1..second {
                    self.push(0);
                }
            }
            None => {}
        }
        self.push(count);
        self.last_second = Some(second);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.len
    }

    pub fn samples(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().copied()
    }

    pub fn max(&self) -> u64 {
        self.samples.iter().copied().max().unwrap_or(0)
    }

    pub fn idle_seconds(&self) -> u64 {
        self.idle_run
    }
}

/// Requests per second one instance serves at its request quota.
pub fn per_instance_capacity(func: &FunctionSpec, model: &ModelRef) -> Result<f64> {
    let quota = func.quota.ok_or_else(|| Error::Unprofiled(func.id.clone()))?;
    let ibs = quota.ibs.ok_or_else(|| Error::Unprofiled(func.id.clone()))?;
    let t_exec = infer_exec_time(model, ibs, SmRate(quota.request_smr.0))?;
    Ok(ibs as f64 / (t_exec / 1000.0))
}

pub fn capacity_of(func: &FunctionSpec, model: &ModelRef, n_instances: u32) -> Result<f64> {
    Ok(n_instances as f64 * per_instance_capacity(func, model)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingDecision {
    ScaleOut(u32),
    ScaleIn(u32),
    Hold,
}

impl ScalingDecision {
    pub fn label(&self) -> &'static str {
        match self {
            ScalingDecision::ScaleOut(_) => "scale_out",
            ScalingDecision::ScaleIn(_) => "scale_in",
            ScalingDecision::Hold => "hold",
        }
    }

    pub fn apply(&self, n: u32) -> u32 {
        match *self {
            ScalingDecision::ScaleOut(k) => n + k,
            ScalingDecision::ScaleIn(k) => n.saturating_sub(k),
            ScalingDecision::Hold => n,
        }
    }
}

pub fn scaling_decision(
    window: &RpsWindow,
    per_instance: f64,
    n_instances: u32,
    cfg: &HscalerConfig,
) -> ScalingDecision {
    if let Some(limit) = cfg.idle_terminate_s {
        if cfg.min_instances == 0 && n_instances > 0 && window.idle_seconds() >= limit {
            return ScalingDecision::ScaleIn(1);
        }
    }
    if !window.is_full() || per_instance <= 0.0 {
        return ScalingDecision::Hold;
    }
    let capacity = per_instance * n_instances as f64;
    let above = window.samples().filter(|&s| s as f64 > capacity).count();
    if above >= cfg.phi_out {
        let needed = (window.max() as f64 / per_instance).ceil() as u32;
        let k = needed.saturating_sub(n_instances).max(1);
        return ScalingDecision::ScaleOut(k);
    }
    if n_instances > cfg.min_instances.max(1) {
        let reduced = per_instance * (n_instances - 1) as f64;
        let below = window.samples().filter(|&s| (s as f64) < reduced).count();
        if below > cfg.phi_in {
            return ScalingDecision::ScaleIn(1);
        }
    }
    ScalingDecision::Hold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEvent {
    pub second: u64,
    pub function: String,
    pub decision: String,
    pub n_before: u32,
    pub n_after: u32,
}

/// Windows for every registered function.
#[derive(Debug, Clone)]
pub struct HorizontalScaler {
    cfg: HscalerConfig,
    windows: BTreeMap<FunctionId, RpsWindow>,
}

impl HorizontalScaler {
    pub fn new(cfg: HscalerConfig) -> Self {
        HorizontalScaler {
            cfg,
            windows: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &HscalerConfig {
        &self.cfg
    }

    pub fn record_rps(&mut self, func: &FunctionId, second: u64, count: u64) -> Result<()> {
        let len = self.cfg.window_s;
        self.windows
            .entry(func.clone())
            .or_insert_with(|| RpsWindow::new(len))
            .record(second, count)
    }

    pub fn window(&self, func: &FunctionId) -> Option<&RpsWindow> {
        self.windows.get(func)
    }

    pub fn decide(&self, func: &FunctionId, per_instance: f64, n_instances: u32) -> ScalingDecision {
        match self.windows.get(func) {
            Some(w) => scaling_decision(w, per_instance, n_instances, &self.cfg),
            None => ScalingDecision::Hold,
        }
    }
}
