//! Per-GPU token arbiter.
//!
//! Every period each resident receives a grant of kernel blocks. SLO-sensitive
//! residents steer a GPU-wide [`ShareState`] from the stretch of their kernel
//! launching cycle (KLC) and from recent launch activity; best-effort
//! residents are then sized from that state. Blocks beyond the grant stay
//! queued, and the GPU never executes more than `max_tokens` per period.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{InstanceId, Priority, ResourceQuota};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VscalerConfig {
    pub period_ms: u64,
    /// Blocks a full GPU executes per period.
    pub max_tokens: u64,
    pub eta_violation: f64,
    pub eta_increase: f64,
    pub rate_window_len: usize,
}

impl Default for VscalerConfig {
    fn default() -> Self {
        VscalerConfig {
            period_ms: 5,
            max_tokens: 1000,
            eta_violation: 0.3,
            eta_increase: 1.25,
            rate_window_len: 20,
        }
    }
}

impl VscalerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.period_ms == 0 || self.max_tokens == 0 || self.rate_window_len == 0 {
            return Err(Error::Invalid("period, max_tokens and window must be positive".into()));
        }
        if !(self.eta_violation > 0.0) || !(self.eta_increase > 1.0) {
            return Err(Error::Invalid("need eta_violation > 0 and eta_increase > 1".into()));
        }
        Ok(())
    }
}

/// One kernel stream on one GPU: a training worker or an inference stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResidentId {
    pub instance: InstanceId,
    pub slot: u32,
}

impl fmt::Display for ResidentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.instance, self.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShareState {
    None,
    Emergency { owner: ResidentId },
    Recovery,
    Contention,
}

impl ShareState {
    pub fn label(&self) -> &'static str {
        match self {
            ShareState::None => "NONE",
            ShareState::Emergency { .. } => "EMERGENCY",
            ShareState::Recovery => "RECOVERY",
            ShareState::Contention => "CONTENTION",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlcTracker {
    pub t_current_ms: Option<f64>,
    pub t_min_ms: Option<f64>,
    window: VecDeque<u64>,
}

impl KlcTracker {
    pub fn new(window_len: usize) -> Self {
        KlcTracker {
            t_current_ms: None,
            t_min_ms: None,
            window: std::iter::repeat_n(0, window_len).collect(),
        }
    }

    /// Records a finished cycle and returns the relative stretch over the
    /// fastest cycle seen.
    pub fn update(&mut self, cycle_span_ms: f64) -> f64 {
        self.t_current_ms = Some(cycle_span_ms);
        self.t_min_ms = Some(self.t_min_ms.map_or(cycle_span_ms, |m| m.min(cycle_span_ms)));
        self.delta()
    }

    pub fn delta(&self) -> f64 {
        match (self.t_current_ms, self.t_min_ms) {
            (Some(cur), Some(min)) if min > 0.0 => (cur - min) / min,
            _ => 0.0,
        }
    }

    pub fn shift(&mut self, rate: u64) {
        self.window.pop_front();
        self.window.push_back(rate);
    }

    pub fn window_sum(&self) -> u64 {
        self.window.iter().sum()
    }

    pub fn window(&self) -> impl Iterator<Item = &u64> {
        self.window.iter()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenState {
    pub r_last: u64,
    pub r_issue: u64,
    pub pending_blocks: u64,
}

/// How an arbiter sizes grants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrantPolicy {
    /// The adaptive state machine.
    Dynamic,
    /// Constant `max_tokens · limit`.
    StaticLimit,
    /// Constant `max_tokens · request`.
    StaticRequest,
    /// Constant `max_tokens`.
    Full,
}

#[derive(Debug, Clone)]
struct Resident {
    priority: Priority,
    request: f64,
    limit: f64,
    klc: KlcTracker,
    tokens: TokenState,
    launched: u64,
    executed_last: u64,
    parallelism: u64,
    /// Joined after this period's grants were issued.
    fresh: bool,
}

impl Resident {
    fn request_tokens(&self, max: u64) -> u64 {
        (max as f64 * self.request).floor() as u64
    }

    fn limit_tokens(&self, max: u64) -> u64 {
        (max as f64 * self.limit).floor() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrantRecord {
    pub resident: ResidentId,
    pub state: &'static str,
    pub r_issue: u64,
    pub executed: u64,
}

#[derive(Debug, Clone)]
pub struct Arbiter {
    cfg: VscalerConfig,
    policy: GrantPolicy,
    state: ShareState,
    residents: BTreeMap<ResidentId, Resident>,
    /// Owner stretch used by the best-effort EMERGENCY branch.
    owner_delta: f64,
    /// EMERGENCY left without its owner recovering, if that ever happens.
    breach: Option<String>,
}

/// Blocks released this period: bounded by what is queued, the grant, what
/// the work can absorb and what the GPU has left.
pub fn drain_blocks(pending: u64, grant: u64, parallelism: u64, capacity_left: u64) -> u64 {
    pending.min(grant).min(parallelism).min(capacity_left)
}

impl Arbiter {
    pub fn new(cfg: VscalerConfig, policy: GrantPolicy) -> Self {
        Arbiter {
            cfg,
            policy,
            state: ShareState::None,
            residents: BTreeMap::new(),
            owner_delta: 0.0,
            breach: None,
        }
    }

    pub fn config(&self) -> &VscalerConfig {
        &self.cfg
    }

    pub fn state(&self) -> ShareState {
        self.state
    }

    pub fn is_empty(&self) -> bool {
        self.residents.is_empty()
    }

    pub fn resident_ids(&self) -> impl Iterator<Item = ResidentId> + '_ {
        self.residents.keys().copied()
    }

    pub fn add_resident(&mut self, id: ResidentId, priority: Priority, quota: &ResourceQuota) {
        self.residents.insert(
            id,
            Resident {
                priority,
                request: quota.request_smr.fraction(),
                limit: quota.limit_smr.fraction(),
                klc: KlcTracker::new(self.cfg.rate_window_len),
                tokens: TokenState::default(),
                launched: 0,
                executed_last: 0,
                parallelism: u64::MAX,
                fresh: true,
            },
        );
    }

    /// Drops a resident with whatever it still had queued.
    pub fn remove_resident(&mut self, id: ResidentId) -> Result<u64> {
        let r = self
            .residents
            .remove(&id)
            .ok_or(Error::UnknownInstance(id.instance))?;
        if matches!(self.state, ShareState::Emergency { owner } if owner == id) {
            self.state = ShareState::None;
        }
        Ok(r.tokens.pending_blocks)
    }

    fn resident_mut(&mut self, id: ResidentId) -> Result<&mut Resident> {
        self.residents
            .get_mut(&id)
            .ok_or(Error::UnknownInstance(id.instance))
    }

    pub fn tokens(&self, id: ResidentId) -> Option<TokenState> {
        self.residents.get(&id).map(|r| r.tokens)
    }

    pub fn klc(&self, id: ResidentId) -> Option<&KlcTracker> {
        self.residents.get(&id).map(|r| &r.klc)
    }

    /// Intercepted kernels join the resident's queue.
    pub fn report_kernels(&mut self, id: ResidentId, blocks: u64) -> Result<()> {
        let r = self.resident_mut(id)?;
        r.tokens.pending_blocks += blocks;
        r.launched += blocks;
        Ok(())
    }

    /// Most blocks the resident's current work can absorb per period.
    pub fn set_parallelism(&mut self, id: ResidentId, cap: u64) -> Result<()> {
        self.resident_mut(id)?.parallelism = cap.max(1);
        Ok(())
    }

    pub fn update_klc(&mut self, id: ResidentId, cycle_span_ms: f64) -> Result<f64> {
        Ok(self.resident_mut(id)?.klc.update(cycle_span_ms))
    }

    /// One period of token issuing; returns the grant of every resident.
    pub fn issue_tokens(&mut self) -> Vec<(ResidentId, u64)> {
        let max = self.cfg.max_tokens;
        for r in self.residents.values_mut() {
            r.klc.shift(r.launched + r.executed_last);
            r.launched = 0;
            r.tokens.r_last = r.tokens.r_issue;
            r.fresh = false;
        }
        match self.policy {
            GrantPolicy::Dynamic => self.issue_dynamic(),
            policy => {
                for r in self.residents.values_mut() {
                    r.tokens.r_issue = match policy {
                        GrantPolicy::StaticLimit => r.limit_tokens(max),
                        GrantPolicy::StaticRequest => r.request_tokens(max),
                        _ => max,
                    };
                }
            }
        }
        self.residents
            .iter()
            .map(|(id, r)| (*id, r.tokens.r_issue))
            .collect()
    }

    fn issue_dynamic(&mut self) {
        let max = self.cfg.max_tokens;
        let eta_v = self.cfg.eta_violation;
        let eta_inc = self.cfg.eta_increase;

        let slo_ids: Vec<ResidentId> = self
            .residents
            .iter()
            .filter(|(_, r)| r.priority == Priority::SloSensitive)
            .map(|(id, _)| *id)
            .collect();
        if slo_ids.is_empty() {
            self.state = ShareState::None;
        }
        if let ShareState::Emergency { owner } = self.state {
            if !self.residents.contains_key(&owner) {
                self.state = ShareState::None;
            }
        }

        let before = self.state;

        // An SLO resident idle for a whole window no longer carries a stretch
        // from its last busy cycle.
        for id in &slo_ids {
            let r = self.residents.get_mut(id).expect("listed");
            if r.klc.window_sum() == 0 {
                r.klc.t_current_ms = None;
            }
        }

        // Among simultaneous violators the largest stretch owns EMERGENCY.
        let mut violator: Option<(f64, ResidentId)> = None;
        for id in &slo_ids {
            let d = self.residents[id].klc.delta();
            if d > eta_v && violator.is_none_or(|(best, _)| d > best) {
                violator = Some((d, *id));
            }
        }

        let sums: BTreeMap<ResidentId, u64> = self
            .residents
            .iter()
            .map(|(id, r)| (*id, r.klc.window_sum()))
            .collect();
        let total: u64 = sums.values().sum();

        for id in &slo_ids {
            let own = sums[id];
            let others = total - own;
            let r = self.residents.get_mut(id).expect("listed");
            let delta = r.klc.delta();
            let (next, grant) = if delta > eta_v {
                let next = match violator {
                    Some((d, owner)) if owner == *id => {
                        self.owner_delta = d;
                        Some(ShareState::Emergency { owner })
                    }
                    _ => None,
                };
                (next, r.limit_tokens(max))
            } else if own == 0 {
                (Some(ShareState::Recovery), r.request_tokens(max))
            } else if others == 0 {
                let base = r.tokens.r_last.max(r.request_tokens(max)) as f64;
                let grown = (base * eta_inc).floor() as u64;
                (Some(ShareState::Recovery), grown.min(r.limit_tokens(max)))
            } else {
                (Some(ShareState::Contention), r.request_tokens(max))
            };
            r.tokens.r_issue = grant;
            if let Some(next) = next {
                let held_by_other = matches!(self.state, ShareState::Emergency { owner } if owner != *id);
                let taking_over = matches!(next, ShareState::Emergency { .. });
                if !held_by_other || taking_over {
                    self.state = next;
                }
            }
        }

        if let ShareState::Emergency { owner } = before {
            let delta_of = |id: &ResidentId| self.residents.get(id).map_or(0.0, |r| r.klc.delta());
            let legal = match self.state {
                ShareState::Emergency { owner: o } if o == owner => true,
                ShareState::Emergency { owner: o } => delta_of(&o) > eta_v,
                _ => delta_of(&owner) <= eta_v,
            };
            if !legal {
                self.breach = Some(format!("EMERGENCY of {owner} changed to {} while it still violates", self.state.label()));
            }
        }

        let state = self.state;
        let owner_delta = self.owner_delta.max(1.0);
        for r in self.residents.values_mut() {
            if r.priority == Priority::SloSensitive {
                continue;
            }
            let limit = r.limit_tokens(max);
            r.tokens.r_issue = match state {
                ShareState::None => limit,
                ShareState::Emergency { .. } => {
                    let base = r.request_tokens(max).min(r.tokens.r_last) as f64;
                    (base / owner_delta).floor().max(0.0) as u64
                }
                ShareState::Recovery => {
                    let base = r.tokens.r_last.max(1) as f64;
                    ((base * eta_inc).ceil() as u64).min(limit)
                }
                ShareState::Contention => r.tokens.r_last.min(limit),
            };
        }
    }

    /// Releases granted blocks, SLO-sensitive residents first, without
    /// exceeding the GPU's physical `max_tokens`.
    pub fn drain(&mut self) -> Vec<(ResidentId, u64)> {
        let mut capacity = self.cfg.max_tokens;
        let mut order: Vec<ResidentId> = self.residents.keys().copied().collect();
        order.sort_by_key(|id| (self.residents[id].priority != Priority::SloSensitive, *id));
        let mut out = Vec::with_capacity(order.len());
        for id in order {
            let r = self.residents.get_mut(&id).expect("listed");
            let executed = drain_blocks(r.tokens.pending_blocks, r.tokens.r_issue, r.parallelism, capacity);
            r.tokens.pending_blocks -= executed;
            r.executed_last = executed;
            capacity -= executed;
            out.push((id, executed));
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Checks the grant ceiling and the SLO floor for the current period.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let max = self.cfg.max_tokens;
        for (id, r) in &self.residents {
            let ceiling = match self.policy {
                GrantPolicy::Full => max,
                _ => r.limit_tokens(max),
            };
            if r.tokens.r_issue > ceiling {
                return Err(format!("{id}: grant {} above ceiling {ceiling}", r.tokens.r_issue));
            }
        }
        if self.policy == GrantPolicy::Dynamic {
            let floor_applies = matches!(self.state, ShareState::Contention | ShareState::Emergency { .. });
            for (id, r) in &self.residents {
                if floor_applies && !r.fresh && r.priority == Priority::SloSensitive && r.tokens.r_issue < r.request_tokens(max) {
                    return Err(format!("{id}: SLO grant {} below request", r.tokens.r_issue));
                }
            }
            if let ShareState::Emergency { owner } = self.state {
                if !self.residents.contains_key(&owner) {
                    return Err(format!("EMERGENCY owned by departed {owner}"));
                }
            }
            if let Some(b) = &self.breach {
                return Err(b.clone());
            }
        }
        Ok(())
    }

    /// Grant records for tracing, after [`Arbiter::drain`].
    pub fn records(&self, executed: &[(ResidentId, u64)]) -> Vec<GrantRecord> {
        executed
            .iter()
            .map(|(id, e)| GrantRecord {
                resident: *id,
                state: self.state.label(),
                r_issue: self.residents[id].tokens.r_issue,
                executed: *e,
            })
            .collect()
    }
}
