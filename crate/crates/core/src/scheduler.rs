//! Cluster-level placement.
//!
//! Each worker of a function goes first to a GPU already hosting an affine
//! function, then to any other active GPU, and only then to a fresh GPU. A
//! candidate GPU is feasible when its request sum stays within `omega`, its
//! limit sum within `gamma` and its memory within capacity; among feasible
//! candidates the one leaving the least weighted fragmentation wins. LLMs
//! that fit no single fragment are split across the GPUs with the most free
//! memory.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{FunctionId, FunctionSpec, GpuId, GpuState, InstanceId, ResourceQuota};
use crate::error::{Error, Result};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub omega: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Prefer GPUs hosting affine functions.
    pub workload_affinity: bool,
    /// Split LLMs over fragments instead of opening a fresh GPU.
    pub resource_complementarity: bool,
    pub llm_max_stages: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            omega: 1.0,
            gamma: 1.5,
            alpha: 0.5,
            beta: 0.5,
            workload_affinity: true,
            resource_complementarity: true,
            llm_max_stages: 4,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        // a zero weight is allowed: it reduces scoring to one dimension
        if !(self.omega > 0.0 && self.gamma > 0.0 && self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Invalid("scheduler caps must be positive".into()));
        }
        if self.omega > self.gamma + EPS {
            return Err(Error::Invalid("omega must not exceed gamma".into()));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid("alpha + beta must equal 1".into()));
        }
        if self.llm_max_stages == 0 {
            return Err(Error::Invalid("llm_max_stages must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub instance_id: InstanceId,
    pub gpu_ids: Vec<GpuId>,
}

/// What one instance holds on one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Charge {
    pub gpu: GpuId,
    pub req: f64,
    pub lim: f64,
    pub mem_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum AffinityKey {
    Function(FunctionId),
    Pattern(&'static str, String),
}

fn affinity_keys(func: &FunctionSpec) -> Vec<AffinityKey> {
    let mut keys = vec![AffinityKey::Function(func.id.clone())];
    if let Some(tag) = &func.pattern_tag {
        keys.push(AffinityKey::Pattern(func.kind_label(), tag.clone()));
    }
    keys
}

#[derive(Debug, Clone)]
struct Resident {
    charges: Vec<Charge>,
    keys: Vec<AffinityKey>,
}

/// GPU fleet plus the bookkeeping needed to undo placements exactly.
#[derive(Debug, Clone)]
pub struct Cluster {
    gpus: Vec<GpuState>,
    /// Per GPU, the charges of its residents keyed by instance.
    ledgers: Vec<BTreeMap<InstanceId, Charge>>,
    residents: BTreeMap<InstanceId, Resident>,
    affinity: BTreeMap<AffinityKey, BTreeMap<GpuId, u32>>,
    active: BTreeSet<GpuId>,
    inactive: BTreeSet<GpuId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub total_gpus: usize,
    pub active_gpus: usize,
    pub gpus: Vec<GpuState>,
}

impl Cluster {
    pub fn new(nodes: u32, gpus_per_node: u32, mem_total_gb: f64) -> Self {
        let mut gpus = Vec::with_capacity((nodes * gpus_per_node) as usize);
        for node in 0..nodes {
            for _ in 0..gpus_per_node {
                let id = GpuId(gpus.len() as u32);
                gpus.push(GpuState::new(id, node, mem_total_gb));
            }
        }
        let inactive = gpus.iter().map(|g| g.gpu_id).collect();
        Cluster {
            ledgers: vec![BTreeMap::new(); gpus.len()],
            gpus,
            residents: BTreeMap::new(),
            affinity: BTreeMap::new(),
            active: BTreeSet::new(),
            inactive,
        }
    }

    pub fn gpu(&self, id: GpuId) -> Result<&GpuState> {
        self.gpus.get(id.0 as usize).ok_or(Error::UnknownGpu(id))
    }

    pub fn gpus(&self) -> &[GpuState] {
        &self.gpus
    }

    pub fn active_ids(&self) -> impl Iterator<Item = GpuId> + '_ {
        self.active.iter().copied()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn len(&self) -> usize {
        self.gpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gpus.is_empty()
    }

    pub fn charges_of(&self, instance: InstanceId) -> Option<&[Charge]> {
        self.residents.get(&instance).map(|r| r.charges.as_slice())
    }

    pub fn contains(&self, instance: InstanceId) -> bool {
        self.residents.contains_key(&instance)
    }

    pub fn snapshot(&self) -> ClusterSnapshot {
        ClusterSnapshot {
            total_gpus: self.gpus.len(),
            active_gpus: self.active.len(),
            gpus: self.active.iter().map(|id| self.gpus[id.0 as usize].clone()).collect(),
        }
    }

    fn recompute(&mut self, id: GpuId) {
        let idx = id.0 as usize;
        let ledger = &self.ledgers[idx];
        let gpu = &mut self.gpus[idx];
        gpu.req_sum = ledger.values().map(|c| c.req).sum();
        gpu.lim_sum = ledger.values().map(|c| c.lim).sum();
        gpu.mem_used_gb = ledger.values().map(|c| c.mem_gb).sum();
        gpu.residents = ledger.keys().copied().collect();
        gpu.active = !gpu.residents.is_empty();
        if gpu.active {
            self.inactive.remove(&id);
            self.active.insert(id);
        } else {
            self.active.remove(&id);
            self.inactive.insert(id);
        }
    }

    fn commit(&mut self, instance: InstanceId, keys: &[AffinityKey], charge: Charge) {
        let idx = charge.gpu.0 as usize;
        self.ledgers[idx].insert(instance, charge);
        self.recompute(charge.gpu);
        for k in keys {
            *self
                .affinity
                .entry(k.clone())
                .or_default()
                .entry(charge.gpu)
                .or_insert(0) += 1;
        }
        let res = self.residents.entry(instance).or_insert_with(|| Resident {
            charges: Vec::new(),
            keys: keys.to_vec(),
        });
        res.charges.push(charge);
    }

    /// Removes an instance from every GPU it holds; emptied GPUs deactivate.
    pub fn release(&mut self, instance: InstanceId) -> Result<Vec<Charge>> {
        let res = self
            .residents
            .remove(&instance)
            .ok_or(Error::UnknownInstance(instance))?;
        for c in &res.charges {
            self.ledgers[c.gpu.0 as usize].remove(&instance);
            self.recompute(c.gpu);
            for k in &res.keys {
                if let Some(per_gpu) = self.affinity.get_mut(k) {
                    if let Some(n) = per_gpu.get_mut(&c.gpu) {
                        *n -= 1;
                        if *n == 0 {
                            per_gpu.remove(&c.gpu);
                        }
                    }
                    if per_gpu.is_empty() {
                        self.affinity.remove(k);
                    }
                }
            }
        }
        Ok(res.charges)
    }

    /// Checks the per-GPU caps and the active flag.
    pub fn check_invariants(&self, cfg: &SchedulerConfig) -> std::result::Result<(), String> {
        for g in &self.gpus {
            if g.req_sum > cfg.omega + EPS {
                return Err(format!("{}: req_sum {} > omega {}", g.gpu_id, g.req_sum, cfg.omega));
            }
            if g.lim_sum > cfg.gamma + EPS {
                return Err(format!("{}: lim_sum {} > gamma {}", g.gpu_id, g.lim_sum, cfg.gamma));
            }
            if g.mem_used_gb > g.mem_total_gb + EPS {
                return Err(format!(
                    "{}: mem {} > {}",
                    g.gpu_id, g.mem_used_gb, g.mem_total_gb
                ));
            }
            if g.active == g.residents.is_empty() {
                return Err(format!("{}: active flag out of sync", g.gpu_id));
            }
        }
        Ok(())
    }
}

fn fits(gpu: &GpuState, quota: &ResourceQuota, cfg: &SchedulerConfig) -> Option<f64> {
    let new_req = gpu.req_sum + quota.request_smr.fraction();
    let new_lim = gpu.lim_sum + quota.limit_smr.fraction();
    let new_mem = gpu.mem_used_gb + quota.mem_gb;
    if new_req <= cfg.omega + EPS && new_lim <= cfg.gamma + EPS && new_mem <= gpu.mem_total_gb + EPS {
        Some(cfg.alpha * (1.0 - new_req) + cfg.beta * (1.0 - new_mem / gpu.mem_total_gb))
    } else {
        None
    }
}

/// Feasible candidate with the lowest weighted leftover; ties go to the
/// lowest GPU id.
pub fn select_opt_gpu<'a, I>(candidates: I, quota: &ResourceQuota, cfg: &SchedulerConfig) -> Option<GpuId>
where
    I: IntoIterator<Item = &'a GpuState>,
{
    let mut best: Option<(f64, GpuId)> = None;
    for gpu in candidates {
        if let Some(score) = fits(gpu, quota, cfg) {
            let better = match best {
                None => true,
                Some((s, id)) => score < s || (score == s && gpu.gpu_id < id),
            };
            if better {
                best = Some((score, gpu.gpu_id));
            }
        }
    }
    best.map(|(_, id)| id)
}

/// Active GPUs hosting instances affine to `func`.
pub fn affinity_candidates(func: &FunctionSpec, cluster: &Cluster) -> BTreeSet<GpuId> {
    let mut out = BTreeSet::new();
    for k in affinity_keys(func) {
        if let Some(per_gpu) = cluster.affinity.get(&k) {
            out.extend(per_gpu.keys().copied());
        }
    }
    out
}

fn quota_of(func: &FunctionSpec) -> Result<ResourceQuota> {
    func.quota.ok_or_else(|| Error::Unprofiled(func.id.clone()))
}

fn pick_single(
    func: &FunctionSpec,
    quota: &ResourceQuota,
    cluster: &Cluster,
    cfg: &SchedulerConfig,
    exclude: &[GpuId],
) -> Option<GpuId> {
    let allowed = |id: &GpuId| !exclude.contains(id);
    let wa = if cfg.workload_affinity {
        affinity_candidates(func, cluster)
    } else {
        BTreeSet::new()
    };
    let in_wa = wa.iter().filter(|id| allowed(id)).map(|id| &cluster.gpus[id.0 as usize]);
    if let Some(id) = select_opt_gpu(in_wa, quota, cfg) {
        return Some(id);
    }
    let rest = cluster
        .active
        .iter()
        .filter(|id| !wa.contains(id) && allowed(id))
        .map(|id| &cluster.gpus[id.0 as usize]);
    select_opt_gpu(rest, quota, cfg)
}

fn fresh_gpu(cluster: &Cluster, quota: &ResourceQuota, cfg: &SchedulerConfig, exclude: &[GpuId]) -> Option<GpuId> {
    cluster
        .inactive
        .iter()
        .find(|id| !exclude.contains(id) && fits(&cluster.gpus[id.0 as usize], quota, cfg).is_some())
        .copied()
}

/// Places the `n_j` workers of one instance of `func`.
pub fn schedule_instances(
    func: &FunctionSpec,
    instance: InstanceId,
    cluster: &mut Cluster,
    cfg: &SchedulerConfig,
) -> Result<Placement> {
    let quota = quota_of(func)?;
    if cluster.contains(instance) {
        return Err(Error::Invalid(format!("{instance} already placed")));
    }
    if func.is_llm() {
        return schedule_llm(func, instance, &quota, cluster, cfg);
    }
    let keys = affinity_keys(func);
    let mut chosen: Vec<GpuId> = Vec::new();
    for _ in 0..func.gpus_needed() {
        let pick = pick_single(func, &quota, cluster, cfg, &chosen)
            .or_else(|| fresh_gpu(cluster, &quota, cfg, &chosen));
        let Some(gpu) = pick else {
            if !chosen.is_empty() {
                cluster.release(instance)?;
            }
            return Err(Error::CapacityExhausted(func.id.clone()));
        };
        cluster.commit(
            instance,
            &keys,
            Charge {
                gpu,
                req: quota.request_smr.fraction(),
                lim: quota.limit_smr.fraction(),
                mem_gb: quota.mem_gb,
            },
        );
        chosen.push(gpu);
    }
    Ok(Placement {
        instance_id: instance,
        gpu_ids: chosen,
    })
}

fn schedule_llm(
    func: &FunctionSpec,
    instance: InstanceId,
    quota: &ResourceQuota,
    cluster: &mut Cluster,
    cfg: &SchedulerConfig,
) -> Result<Placement> {
    let keys = affinity_keys(func);
    let single = pick_single(func, quota, cluster, cfg, &[]);
    let plan = match single {
        Some(gpu) => vec![(gpu, quota.mem_gb)],
        None => {
            let fragments = if cfg.resource_complementarity {
                plan_llm(quota, cluster.active.iter().map(|id| &cluster.gpus[id.0 as usize]), cfg)
                    .filter(|p| p.len() <= cfg.llm_max_stages as usize)
            } else {
                None
            };
            match fragments {
                Some(p) => p,
                None => match fresh_gpu(cluster, quota, cfg, &[]) {
                    Some(gpu) => vec![(gpu, quota.mem_gb)],
                    None => plan_llm(quota, cluster.gpus.iter(), cfg)
                        .ok_or_else(|| Error::CapacityExhausted(func.id.clone()))?,
                },
            }
        }
    };
    Ok(commit_plan(instance, &keys, quota, plan, cluster))
}

fn commit_plan(
    instance: InstanceId,
    keys: &[AffinityKey],
    quota: &ResourceQuota,
    plan: Vec<(GpuId, f64)>,
    cluster: &mut Cluster,
) -> Placement {
    let mut gpu_ids = Vec::with_capacity(plan.len());
    for (gpu, mem_gb) in plan {
        cluster.commit(
            instance,
            keys,
            Charge {
                gpu,
                req: quota.request_smr.fraction(),
                lim: quota.limit_smr.fraction(),
                mem_gb,
            },
        );
        gpu_ids.push(gpu);
    }
    Placement {
        instance_id: instance,
        gpu_ids,
    }
}

/// Memory-based worst fit: take GPUs in descending free memory until the
/// model fits, splitting memory in proportion to what each GPU offers.
/// Every stage is charged the full `<request, limit>`.
fn plan_llm<'a, I>(quota: &ResourceQuota, candidates: I, cfg: &SchedulerConfig) -> Option<Vec<(GpuId, f64)>>
where
    I: IntoIterator<Item = &'a GpuState>,
{
    let mut eligible: Vec<(f64, GpuId)> = candidates
        .into_iter()
        .filter(|g| {
            g.req_sum + quota.request_smr.fraction() <= cfg.omega + EPS
                && g.lim_sum + quota.limit_smr.fraction() <= cfg.gamma + EPS
                && g.free_mem_gb() > EPS
        })
        .map(|g| (g.free_mem_gb(), g.gpu_id))
        .collect();
    eligible.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked = Vec::new();
    let mut total = 0.0;
    for (free, id) in eligible {
        picked.push((id, free));
        total += free;
        if total + EPS >= quota.mem_gb {
            let plan = picked
                .iter()
                .map(|&(id, free)| (id, quota.mem_gb * free / total))
                .collect();
            return Some(plan);
        }
    }
    None
}

/// Worst-fit split of an LLM over the whole cluster, ignoring single-GPU
/// placement.
pub fn place_llm(
    func: &FunctionSpec,
    instance: InstanceId,
    cluster: &mut Cluster,
    cfg: &SchedulerConfig,
) -> Result<Placement> {
    let quota = quota_of(func)?;
    let candidates: Vec<&GpuState> = if cluster.active.is_empty() {
        cluster.gpus.iter().collect()
    } else {
        cluster
            .active
            .iter()
            .map(|id| &cluster.gpus[id.0 as usize])
            .chain(cluster.inactive.iter().map(|id| &cluster.gpus[id.0 as usize]))
            .collect()
    };
    let plan = plan_llm(&quota, candidates, cfg).ok_or_else(|| Error::CapacityExhausted(func.id.clone()))?;
    let keys = affinity_keys(func);
    Ok(commit_plan(instance, &keys, &quota, plan, cluster))
}

pub fn release_instance(instance: InstanceId, cluster: &mut Cluster) -> Result<Vec<Charge>> {
    cluster.release(instance)
}
