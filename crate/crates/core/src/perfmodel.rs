//! Synthetic performance oracle standing in for real GPUs.
//!
//! Inference latency follows a two-regime curve: a batch of `ibs` samples
//! needs `a + b·ibs` milliseconds once it has `knee(ibs) = min(100, c·√ibs)`
//! SM units, and scales inversely with SM rate below that knee. Training
//! throughput grows linearly up to a per-model saturation SMR.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{SmRate, SM_TOTAL};
use crate::error::{Error, Result};

const BUILTIN_MODELS: &str = include_str!("../assets/models.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    pub mem_gb: f64,
    /// Fixed per-batch overhead.
    pub a_ms: f64,
    /// Per-sample cost.
    pub b_ms: f64,
    /// SM units per unit of √IBS before inference saturates.
    pub knee_coeff: f64,
    /// SMR at which training throughput saturates.
    pub knee_t: f64,
    /// Training samples/s per worker at saturation, excluding communication idle.
    pub t_max: f64,
    pub blocks_per_sample: u64,
    pub cold_start_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_slo_ms: Option<f64>,
    #[serde(default)]
    pub is_llm: bool,
}

impl ModelRef {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            ("mem_gb", self.mem_gb),
            ("a_ms", self.a_ms),
            ("b_ms", self.b_ms),
            ("knee_coeff", self.knee_coeff),
            ("knee_t", self.knee_t),
            ("t_max", self.t_max),
        ];
        for (field, v) in coeffs {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{}: {field} must be > 0", self.name)));
            }
        }
        if self.knee_t > SM_TOTAL {
            return Err(Error::Invalid(format!("{}: knee_t above 100", self.name)));
        }
        if self.blocks_per_sample == 0 {
            return Err(Error::Invalid(format!(
                "{}: blocks_per_sample must be > 0",
                self.name
            )));
        }
        Ok(())
    }

    /// SMR beyond which a batch of `ibs` stops getting faster.
    pub fn knee(&self, ibs: u32) -> f64 {
        (self.knee_coeff * (ibs as f64).sqrt()).min(SM_TOTAL)
    }
}

#[derive(Debug, Deserialize)]
struct ModelFile {
    #[allow(dead_code)]
    version: u32,
    models: Vec<ModelRef>,
}

/// Named model profiles.
#[derive(Debug, Clone, Default)]
pub struct ModelLibrary {
    models: BTreeMap<String, ModelRef>,
}

impl ModelLibrary {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_MODELS).expect("built-in model asset is valid")
    }

    /// Accepts either `{"version":..,"models":[..]}` or a bare list.
    pub fn from_json(text: &str) -> Result<Self> {
        let models: Vec<ModelRef> = match serde_json::from_str::<ModelFile>(text) {
            Ok(file) => file.models,
            Err(_) => serde_json::from_str(text)?,
        };
        let mut lib = ModelLibrary::default();
        for m in models {
            lib.insert(m)?;
        }
        Ok(lib)
    }

    pub fn insert(&mut self, model: ModelRef) -> Result<()> {
        model.validate()?;
        self.models.insert(model.name.clone(), model);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ModelRef> {
        self.models
            .get(name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModelRef> {
        self.models.values()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Execution time of one batch of `ibs` samples at `smr`.
pub fn infer_exec_time(model: &ModelRef, ibs: u32, smr: SmRate) -> Result<f64> {
    if !(smr.0 > 0.0) {
        return Err(Error::ZeroCompute);
    }
    if ibs == 0 {
        return Err(Error::Invalid("ibs must be ≥ 1".into()));
    }
    let knee = model.knee(ibs);
    let base = model.a_ms + model.b_ms * ibs as f64;
    Ok(base * knee / smr.0.min(knee))
}

/// Samples/s across all workers.
pub fn train_throughput(model: &ModelRef, smr: SmRate, workers: u32, comm_idle_frac: f64) -> f64 {
    let compute = (smr.0 / model.knee_t).clamp(0.0, 1.0);
    workers as f64 * model.t_max * compute * (1.0 - comm_idle_frac)
}

pub fn kernel_blocks(model: &ModelRef, samples: u64) -> u64 {
    samples * model.blocks_per_sample
}

pub fn cold_start_time(model: &ModelRef) -> u64 {
    model.cold_start_ms
}

/// Kernel work of one batch or iteration expressed in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockWork {
    pub blocks: u64,
    /// Most blocks the work can absorb per period (its parallelism).
    pub cap_per_period: u64,
}

impl BlockWork {
    /// Periods needed when granted `tokens` per period.
    pub fn periods_at(&self, tokens: u64) -> u64 {
        let rate = tokens.min(self.cap_per_period).max(1);
        self.blocks.div_ceil(rate)
    }
}

/// Blocks for a batch of `ibs` such that executing them on a GPU with
/// `max_tokens` blocks per period reproduces [`infer_exec_time`].
pub fn inference_batch_work(model: &ModelRef, ibs: u32, max_tokens: u64, period_ms: u64) -> BlockWork {
    let cap = ((max_tokens as f64) * model.knee(ibs) / SM_TOTAL).round().max(1.0) as u64;
    let base_ms = model.a_ms + model.b_ms * ibs as f64;
    let blocks = (base_ms / period_ms as f64 * cap as f64).round().max(1.0) as u64;
    BlockWork {
        blocks,
        cap_per_period: cap,
    }
}

/// Compute blocks of one training iteration of `samples` per worker.
pub fn training_iteration_work(model: &ModelRef, samples: u64, max_tokens: u64) -> BlockWork {
    let cap = ((max_tokens as f64) * model.knee_t / SM_TOTAL).round().max(1.0) as u64;
    BlockWork {
        blocks: kernel_blocks(model, samples).max(1),
        cap_per_period: cap,
    }
}

/// Communication idle per iteration such that idle is `frac` of the
/// iteration when compute runs at saturation.
pub fn comm_idle_ms(compute_ms: f64, frac: f64) -> f64 {
    if frac <= 0.0 {
        0.0
    } else {
        compute_ms * frac / (1.0 - frac)
    }
}

/// Deterministic multiplicative log-normal noise keyed by the probe point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub sigma: f64,
    pub seed: u64,
}

impl Jitter {
    pub fn factor(&self, key: (u32, f64)) -> f64 {
        if self.sigma <= 0.0 {
            return 1.0;
        }
        let mix = self.seed ^ (u64::from(key.0) << 40) ^ key.1.to_bits().rotate_left(17);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        LogNormal::new(0.0, self.sigma)
            .expect("sigma is positive")
            .sample(&mut rng)
    }
}

/// The oracle as seen by a profiler: possibly noisy measurements.
#[derive(Debug, Clone, Copy, Default)]
pub struct Oracle {
    pub jitter: Option<Jitter>,
}

impl Oracle {
    pub fn exact() -> Self {
        Oracle { jitter: None }
    }

    pub fn measure_latency(&self, model: &ModelRef, ibs: u32, smr: SmRate) -> Result<f64> {
        let t = infer_exec_time(model, ibs, smr)?;
        Ok(match self.jitter {
            Some(j) => t * j.factor((ibs, smr.0)),
            None => t,
        })
    }

    pub fn measure_throughput(&self, model: &ModelRef, smr: SmRate, workers: u32, idle: f64) -> f64 {
        let t = train_throughput(model, smr, workers, idle);
        match self.jitter {
            Some(j) => t * j.factor((0, smr.0)),
            None => t,
        }
    }
}
