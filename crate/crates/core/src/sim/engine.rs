//! The tick loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::domain::{
    FunctionId, FunctionKind, FunctionSpec, GpuId, InstanceId, InstanceState, Phase, Request,
    ResourceQuota,
};
use crate::error::{Error, Result};
use crate::hscaler::{per_instance_capacity, HorizontalScaler, ScalingDecision, ScalingEvent};
use crate::perfmodel::{inference_batch_work, training_iteration_work, BlockWork, ModelRef};
use crate::profiler::Profiler;
use crate::scheduler::{schedule_instances, Cluster, SchedulerConfig};
use crate::sim::gateway::{pick_least_loaded, BatchQueue};
use crate::sim::metrics::{GpuRow, GrantRow, RunLog, RunOutput, Tallies};
use crate::sim::scenario::{iteration_timing, BaselineMode, FunctionEntry, Scenario};
use crate::sim::trace::generate_trace;
use crate::vscaler::{Arbiter, ResidentId, ShareState, VscalerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LaunchReason {
    Initial,
    Demand,
    ScaleOut,
}

#[derive(Debug, Clone, Copy)]
struct Launch {
    func: usize,
    reason: LaunchReason,
}

#[derive(Debug, Clone)]
pub(crate) struct FuncRt {
    pub entry: FunctionEntry,
    pub model: ModelRef,
    /// Quota the scheduler charges under the run's mode.
    charged: FunctionSpec,
    pub quota: ResourceQuota,
    arrivals: Vec<u64>,
    next_arrival: usize,
    /// Requests with no warm instance to go to.
    waiting: VecDeque<u64>,
    second_count: u64,
    per_instance: f64,
    ibs: u32,
    /// Work of a batch of `k` requests at index `k - 1`.
    batch_work: Vec<BlockWork>,
    /// Span multiplier taking a batch of `k` to the full-batch equivalent.
    batch_norm: Vec<f64>,
    train_work: BlockWork,
    comm_idle_ms: f64,
    started: bool,
    pub instances: BTreeSet<InstanceId>,
    queued_launches: u32,
    pub tallies: Tallies,
}

impl FuncRt {
    fn id(&self) -> &FunctionId {
        &self.entry.spec.id
    }

    /// GPUs an exclusive deployment would hold for one instance.
    fn exclusive_need(&self, gpu_mem_gb: f64) -> u64 {
        if self.entry.spec.is_llm() {
            (self.quota.mem_gb / gpu_mem_gb).ceil().max(1.0) as u64
        } else {
            u64::from(self.entry.spec.gpus_needed())
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum TrainPhase {
    Idle,
    Compute,
    Comm { until_ms: u64 },
}

#[derive(Debug, Clone)]
enum Body {
    Inference { queue: BatchQueue },
    Training { phase: TrainPhase, done: Vec<bool> },
}

#[derive(Debug, Clone)]
struct InstRt {
    state: InstanceState,
    func: usize,
    residents: Vec<(GpuId, ResidentId)>,
    ready_at_ms: u64,
    body: Body,
}

#[derive(Debug, Clone, Copy)]
struct Busy {
    started_ms: u64,
    /// Scales a partial batch's span to the full-batch equivalent.
    norm: f64,
}

pub struct Simulation {
    name: String,
    mode: BaselineMode,
    seed: u64,
    duration_s: f64,
    vcfg: VscalerConfig,
    sched: SchedulerConfig,
    check: bool,
    trace_grants: bool,
    gpu_mem_gb: f64,
    clock_ms: u64,
    end_ms: u64,
    funcs: Vec<FuncRt>,
    cluster: Cluster,
    arbiters: BTreeMap<GpuId, Arbiter>,
    instances: BTreeMap<InstanceId, InstRt>,
    busy: BTreeMap<ResidentId, Busy>,
    requests: Vec<Request>,
    completed: u64,
    hscaler: HorizontalScaler,
    launches: VecDeque<Launch>,
    next_instance: u64,
    next_batch: u64,
    log: RunLog,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let lib = scenario.library()?;
        let vcfg = scenario.vscaler;
        let mode = scenario.mode;
        let profiler = Profiler::default();
        let mut funcs = Vec::with_capacity(scenario.functions.len());
        for (i, entry) in scenario.functions.iter().enumerate() {
            let mut entry = entry.clone();
            let model = lib.get(&entry.spec.model)?.clone();
            let quota = profiler.ensure_quota(&mut entry.spec, &lib)?;
            let charged = entry.spec.clone().with_quota(mode.charged_quota(&quota));
            let arrivals = match &entry.workload {
                Some(w) if entry.spec.is_inference() => {
                    let stream_seed = scenario.seed ^ ((i as u64 + 1) << 32);
                    let offset = (entry.start_s * 1000.0).round() as u64;
                    let span = scenario.duration_s - entry.start_s;
                    if span > 0.0 {
                        generate_trace(w, span, stream_seed)?.into_iter().map(|t| t + offset).collect()
                    } else {
                        Vec::new()
                    }
                }
                _ => Vec::new(),
            };
            let ibs = quota.ibs.unwrap_or(1).max(1);
            let batch_work: Vec<BlockWork> = (1..=ibs)
                .map(|k| inference_batch_work(&model, k, vcfg.max_tokens, vcfg.period_ms))
                .collect();
            let limit_tokens = (vcfg.max_tokens as f64 * quota.limit_smr.fraction()).floor() as u64;
            let full = span_at(&batch_work[ibs as usize - 1], limit_tokens);
            let batch_norm = batch_work.iter().map(|w| full / span_at(w, limit_tokens)).collect();
            let (_, comm_idle_ms) =
                iteration_timing(&model, &entry.spec.kind, entry.iteration_samples, vcfg.max_tokens, vcfg.period_ms);
            let per_instance = if entry.spec.is_inference() {
                per_instance_capacity(&entry.spec, &model)?
            } else {
                0.0
            };
            funcs.push(FuncRt {
                train_work: training_iteration_work(&model, entry.iteration_samples, vcfg.max_tokens),
                entry,
                model,
                charged,
                quota,
                arrivals,
                next_arrival: 0,
                waiting: VecDeque::new(),
                second_count: 0,
                per_instance,
                ibs,
                batch_work,
                batch_norm,
                comm_idle_ms,
                started: false,
                instances: BTreeSet::new(),
                queued_launches: 0,
                tallies: Tallies::default(),
            });
        }
        let end_ms = (scenario.duration_s * 1000.0).ceil() as u64;
        let end_ms = end_ms.div_ceil(vcfg.period_ms) * vcfg.period_ms;
        Ok(Simulation {
            name: scenario.name.clone(),
            mode,
            seed: scenario.seed,
            duration_s: scenario.duration_s,
            vcfg,
            sched: mode.scheduler_config(&scenario.scheduler),
            check: scenario.check_invariants,
            trace_grants: scenario.outputs.grant_trace,
            gpu_mem_gb: scenario.gpu_mem_gb,
            clock_ms: 0,
            end_ms,
            funcs,
            cluster: Cluster::new(scenario.nodes, scenario.gpus_per_node, scenario.gpu_mem_gb),
            arbiters: BTreeMap::new(),
            instances: BTreeMap::new(),
            busy: BTreeMap::new(),
            requests: Vec::new(),
            completed: 0,
            hscaler: HorizontalScaler::new(mode.hscaler_config(&scenario.hscaler)),
            launches: VecDeque::new(),
            next_instance: 0,
            next_batch: 0,
            log: RunLog::default(),
        })
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn is_done(&self) -> bool {
        self.clock_ms >= self.end_ms
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    /// Share state of the arbiter on `gpu`, if the GPU is active.
    pub fn share_state(&self, gpu: GpuId) -> Option<ShareState> {
        self.arbiters.get(&gpu).map(|a| a.state())
    }

    /// Advances one token period.
    pub fn step(&mut self) -> Result<()> {
        let now = self.clock_ms;
        let end = now + self.vcfg.period_ms;
        self.start_functions(now, end)?;
        self.advance_cold_starts(now);
        self.admit(now, end)?;
        self.fire(now)?;
        let executed = self.arbitrate(now);
        self.complete(end, &executed)?;
        self.account(&executed);
        self.clock_ms = end;
        if end.is_multiple_of(1000) {
            self.on_second(end / 1000 - 1)?;
        }
        if self.check {
            self.check_invariants(now, &executed)?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> RunOutput {
        crate::sim::metrics::compute_metrics(
            &self.name,
            self.mode,
            self.seed,
            self.duration_s,
            self.end_ms,
            &self.vcfg,
            &self.funcs,
            &self.requests,
            self.log,
        )
    }

    fn start_functions(&mut self, now: u64, end: u64) -> Result<()> {
        for i in 0..self.funcs.len() {
            let f = &mut self.funcs[i];
            let start = (f.entry.start_s * 1000.0).round() as u64;
            if f.started || start >= end {
                continue;
            }
            f.started = true;
            f.tallies.started_ms = Some(now.max(start));
            for _ in 0..f.entry.initial_instances {
                self.enqueue_launch(i, LaunchReason::Initial, now)?;
            }
        }
        Ok(())
    }

    fn enqueue_launch(&mut self, func: usize, reason: LaunchReason, now: u64) -> Result<()> {
        self.funcs[func].queued_launches += 1;
        self.launches.push_back(Launch { func, reason });
        self.process_launches(now)
    }

    /// Places queued launches in order; a launch that does not fit stays
    /// queued for the next second, and so does everything behind it.
    fn process_launches(&mut self, now: u64) -> Result<()> {
        while let Some(launch) = self.launches.front().copied() {
            match self.place(launch, now) {
                Ok(()) => {
                    self.launches.pop_front();
                    self.funcs[launch.func].queued_launches -= 1;
                }
                Err(Error::CapacityExhausted(_)) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn place(&mut self, launch: Launch, now: u64) -> Result<()> {
        let id = InstanceId(self.next_instance);
        let f = &self.funcs[launch.func];
        let placement = schedule_instances(&f.charged, id, &mut self.cluster, &self.sched)?;
        self.next_instance += 1;
        let f = &mut self.funcs[launch.func];
        let cold = match launch.reason {
            LaunchReason::Initial => 0,
            _ => f.model.cold_start_ms,
        };
        match launch.reason {
            LaunchReason::Demand => f.tallies.cold_starts += 1,
            LaunchReason::ScaleOut if cold > 0 => f.tallies.cold_starts += 1,
            _ => {}
        }
        f.tallies.launches += 1;
        let priority = f.entry.spec.priority();
        let quota = f.quota;
        let mut residents = Vec::with_capacity(placement.gpu_ids.len());
        for (slot, gpu) in placement.gpu_ids.iter().enumerate() {
            let rid = ResidentId {
                instance: id,
                slot: slot as u32,
            };
            let policy = self.mode.grant_policy();
            let vcfg = self.vcfg;
            self.arbiters
                .entry(*gpu)
                .or_insert_with(|| Arbiter::new(vcfg, policy))
                .add_resident(rid, priority, &quota);
            residents.push((*gpu, rid));
        }
        let body = match f.entry.spec.kind {
            FunctionKind::Inference { .. } => Body::Inference { queue: BatchQueue::new() },
            FunctionKind::Training { .. } => Body::Training {
                phase: TrainPhase::Idle,
                done: vec![false; residents.len()],
            },
        };
        let phase = if cold == 0 {
            Phase::Warm
        } else {
            Phase::ColdStarting { remaining_ms: cold }
        };
        f.instances.insert(id);
        let live = f.instances.len() as u32;
        f.tallies.peak_instances = f.tallies.peak_instances.max(live);
        self.instances.insert(
            id,
            InstRt {
                state: InstanceState {
                    instance_id: id,
                    function_id: f.entry.spec.id.clone(),
                    gpu_ids: placement.gpu_ids.clone(),
                    phase,
                    started_at_ms: now,
                },
                func: launch.func,
                residents,
                ready_at_ms: now + cold,
                body,
            },
        );
        if cold == 0 {
            self.flush_waiting(launch.func);
        }
        Ok(())
    }

    fn advance_cold_starts(&mut self, now: u64) {
        let mut warmed = BTreeSet::new();
        for inst in self.instances.values_mut() {
            if let Phase::ColdStarting { .. } = inst.state.phase {
                let next = if now >= inst.ready_at_ms {
                    warmed.insert(inst.func);
                    Phase::Warm
                } else {
                    Phase::ColdStarting {
                        remaining_ms: inst.ready_at_ms - now,
                    }
                };
                inst.state.advance(next);
            }
        }
        for f in warmed {
            self.flush_waiting(f);
        }
    }

    fn warm_loads(&self, func: usize) -> Vec<(InstanceId, usize)> {
        self.funcs[func]
            .instances
            .iter()
            .filter_map(|id| {
                let inst = &self.instances[id];
                match (&inst.body, inst.state.phase) {
                    (Body::Inference { queue }, Phase::Warm) => Some((*id, queue.outstanding())),
                    _ => None,
                }
            })
            .collect()
    }

    fn dispatch(&mut self, func: usize, request: u64) -> bool {
        let Some(target) = pick_least_loaded(self.warm_loads(func)) else {
            return false;
        };
        let arrival = self.requests[request as usize].arrival_ms;
        if let Some(InstRt {
            body: Body::Inference { queue },
            ..
        }) = self.instances.get_mut(&target)
        {
            queue.push(request, arrival);
        }
        true
    }

    fn flush_waiting(&mut self, func: usize) {
        while let Some(&r) = self.funcs[func].waiting.front() {
            if !self.dispatch(func, r) {
                break;
            }
            self.funcs[func].waiting.pop_front();
        }
    }

    fn admit(&mut self, now: u64, end: u64) -> Result<()> {
        for i in 0..self.funcs.len() {
            loop {
                let f = &mut self.funcs[i];
                let Some(&arrival) = f.arrivals.get(f.next_arrival) else {
                    break;
                };
                if arrival >= end {
                    break;
                }
                f.next_arrival += 1;
                f.second_count += 1;
                let slo = f.entry.spec.slo_ms().unwrap_or(f64::INFINITY);
                let id = self.requests.len() as u64;
                self.requests.push(Request {
                    request_id: id,
                    function_id: f.entry.spec.id.clone(),
                    arrival_ms: arrival,
                    batch_id: None,
                    completed_ms: None,
                    deadline_ms: arrival.saturating_add(slo.min(u64::MAX as f64 / 2.0) as u64),
                });
                if !self.funcs[i].waiting.is_empty() || !self.dispatch(i, id) {
                    self.funcs[i].waiting.push_back(id);
                    let f = &self.funcs[i];
                    let pending = f.queued_launches > 0
                        || f.instances.iter().any(|x| matches!(self.instances[x].state.phase, Phase::ColdStarting { .. }));
                    if !pending {
                        self.enqueue_launch(i, LaunchReason::Demand, now)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn fire(&mut self, now: u64) -> Result<()> {
        let ids: Vec<InstanceId> = self.instances.keys().copied().collect();
        for id in ids {
            let inst = self.instances.get_mut(&id).expect("listed");
            let f = &self.funcs[inst.func];
            match &mut inst.body {
                Body::Inference { queue } => {
                    if !matches!(inst.state.phase, Phase::Warm | Phase::Draining) {
                        continue;
                    }
                    let max_wait = f.entry.spec.slo_ms().unwrap_or(0.0) / 2.0;
                    let draining = inst.state.phase == Phase::Draining;
                    if queue.due(now, f.ibs, max_wait) || (draining && queue.open_len() > 0) {
                        queue.fire(self.next_batch, now);
                        self.next_batch += 1;
                    }
                    let Some(batch) = queue.start_next() else {
                        continue;
                    };
                    let k = batch.requests.len().min(f.ibs as usize);
                    for r in &batch.requests {
                        self.requests[*r as usize].batch_id = Some(batch.batch_id);
                    }
                    let work = f.batch_work[k - 1];
                    let norm = f.batch_norm[k - 1];
                    let stages = inst.residents.len() as u64;
                    let (gpu, rid) = inst.residents[0];
                    let blocks = stage_blocks(work.blocks, stages, 0);
                    Self::start_work(&mut self.arbiters, &mut self.busy, gpu, rid, blocks, work.cap_per_period, now, norm)?;
                }
                Body::Training { phase, done } => {
                    if inst.state.phase != Phase::Warm {
                        continue;
                    }
                    let go = match *phase {
                        TrainPhase::Idle => true,
                        TrainPhase::Comm { until_ms } => now >= until_ms,
                        TrainPhase::Compute => false,
                    };
                    if !go {
                        continue;
                    }
                    *phase = TrainPhase::Compute;
                    done.iter_mut().for_each(|d| *d = false);
                    let work = f.train_work;
                    for &(gpu, rid) in &inst.residents {
                        Self::start_work(&mut self.arbiters, &mut self.busy, gpu, rid, work.blocks, work.cap_per_period, now, 1.0)?;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn start_work(
        arbiters: &mut BTreeMap<GpuId, Arbiter>,
        busy: &mut BTreeMap<ResidentId, Busy>,
        gpu: GpuId,
        rid: ResidentId,
        blocks: u64,
        cap: u64,
        now: u64,
        norm: f64,
    ) -> Result<()> {
        let arb = arbiters.get_mut(&gpu).ok_or(Error::UnknownGpu(gpu))?;
        arb.report_kernels(rid, blocks)?;
        arb.set_parallelism(rid, cap)?;
        busy.insert(rid, Busy { started_ms: now, norm });
        Ok(())
    }

    fn arbitrate(&mut self, now: u64) -> Vec<(GpuId, ResidentId, u64)> {
        let mut out = Vec::new();
        for (gpu, arb) in self.arbiters.iter_mut() {
            arb.issue_tokens();
            let executed = arb.drain();
            if self.trace_grants {
                for rec in arb.records(&executed) {
                    self.log.grants.push(GrantRow {
                        tick_ms: now,
                        gpu: gpu.0,
                        instance: rec.resident.instance.0,
                        slot: rec.resident.slot,
                        state: rec.state.to_string(),
                        r_issue: rec.r_issue,
                        executed: rec.executed,
                    });
                }
            }
            out.extend(executed.into_iter().map(|(rid, e)| (*gpu, rid, e)));
        }
        out
    }

    fn complete(&mut self, end: u64, executed: &[(GpuId, ResidentId, u64)]) -> Result<()> {
        let mut finished = Vec::new();
        for &(gpu, rid, e) in executed {
            if e == 0 {
                continue;
            }
            let arb = self.arbiters.get_mut(&gpu).expect("active");
            if arb.tokens(rid).is_some_and(|t| t.pending_blocks == 0) {
                if let Some(b) = self.busy.remove(&rid) {
                    let span = (end - b.started_ms) as f64 * b.norm;
                    arb.update_klc(rid, span)?;
                    finished.push(rid);
                }
            }
        }
        for rid in finished {
            self.on_work_finished(rid, end)?;
        }
        Ok(())
    }

    fn on_work_finished(&mut self, rid: ResidentId, end: u64) -> Result<()> {
        let inst = self.instances.get_mut(&rid.instance).ok_or(Error::UnknownInstance(rid.instance))?;
        let func = inst.func;
        let f = &mut self.funcs[func];
        let mut terminate = false;
        match &mut inst.body {
            Body::Inference { queue } => {
                let stages = inst.residents.len() as u64;
                let next = rid.slot as usize + 1;
                let running = queue.running().expect("finished work belongs to a batch");
                if next < inst.residents.len() {
                    let k = running.requests.len().min(f.ibs as usize);
                    let work = f.batch_work[k - 1];
                    let norm = f.batch_norm[k - 1];
                    let (gpu, nrid) = inst.residents[next];
                    let blocks = stage_blocks(work.blocks, stages, next as u64);
                    Self::start_work(&mut self.arbiters, &mut self.busy, gpu, nrid, blocks, work.cap_per_period, end, norm)?;
                } else {
                    let batch = queue.finish_running().expect("running");
                    for r in batch.requests {
                        self.requests[r as usize].completed_ms = Some(end);
                        self.completed += 1;
                    }
                    terminate = inst.state.phase == Phase::Draining && queue.is_idle();
                }
            }
            Body::Training { phase, done } => {
                done[rid.slot as usize] = true;
                if done.iter().all(|d| *d) {
                    f.tallies.iterations += 1;
                    f.tallies.samples += f.entry.iteration_samples * done.len() as u64;
                    *phase = if f.comm_idle_ms > 0.0 {
                        TrainPhase::Comm {
                            until_ms: end + f.comm_idle_ms.ceil() as u64,
                        }
                    } else {
                        TrainPhase::Idle
                    };
                    if f.entry.total_iterations.is_some_and(|n| f.tallies.iterations >= n) {
                        f.tallies.finished_ms = Some(end);
                        terminate = true;
                    }
                }
            }
        }
        if terminate {
            self.terminate(rid.instance)?;
        }
        Ok(())
    }

    fn terminate(&mut self, id: InstanceId) -> Result<()> {
        let mut inst = self.instances.remove(&id).ok_or(Error::UnknownInstance(id))?;
        for (gpu, rid) in &inst.residents {
            let arb = self.arbiters.get_mut(gpu).ok_or(Error::UnknownGpu(*gpu))?;
            arb.remove_resident(*rid)?;
            if arb.is_empty() {
                self.arbiters.remove(gpu);
            }
            self.busy.remove(rid);
        }
        self.cluster.release(id)?;
        inst.state.advance(Phase::Terminated);
        self.funcs[inst.func].instances.remove(&id);
        Ok(())
    }

    fn on_second(&mut self, second: u64) -> Result<()> {
        let now = self.clock_ms;
        for i in 0..self.funcs.len() {
            if !self.funcs[i].started || !self.funcs[i].entry.spec.is_inference() {
                continue;
            }
            let count = std::mem::take(&mut self.funcs[i].second_count);
            let fid = self.funcs[i].id().clone();
            self.hscaler.record_rps(&fid, second, count)?;
            let f = &self.funcs[i];
            let serving: Vec<InstanceId> = f
                .instances
                .iter()
                .copied()
                .filter(|x| self.instances[x].state.phase != Phase::Draining)
                .collect();
            let n = serving.len() as u32 + f.queued_launches;
            let decision = self.hscaler.decide(&fid, f.per_instance, n);
            match decision {
                ScalingDecision::Hold => continue,
                ScalingDecision::ScaleOut(k) => {
                    for _ in 0..k {
                        self.enqueue_launch(i, LaunchReason::ScaleOut, now)?;
                    }
                }
                ScalingDecision::ScaleIn(k) => {
                    for _ in 0..k {
                        self.drain_one(i)?;
                    }
                }
            }
            self.log.scaling.push(ScalingEvent {
                second,
                function: fid.0.clone(),
                decision: decision.label().to_string(),
                n_before: n,
                n_after: decision.apply(n),
            });
        }
        self.process_launches(now)?;
        let mem_used: f64 = self.cluster.gpus().iter().map(|g| g.mem_used_gb).sum();
        self.log.gpus.push(GpuRow {
            second,
            active_gpus: self.cluster.active_count() as u32,
            instances: self.instances.len() as u32,
            mem_used_gb: mem_used,
        });
        Ok(())
    }

    /// Stops routing to the least-loaded warm instance (newest on ties) and
    /// terminates it once empty.
    fn drain_one(&mut self, func: usize) -> Result<()> {
        let pick = self
            .warm_loads(func)
            .into_iter()
            .min_by_key(|&(id, load)| (load, std::cmp::Reverse(id)))
            .map(|(id, _)| id);
        let Some(id) = pick else {
            return Ok(());
        };
        let inst = self.instances.get_mut(&id).expect("listed");
        inst.state.advance(Phase::Draining);
        let idle = matches!(&inst.body, Body::Inference { queue } if queue.is_idle());
        if idle {
            self.terminate(id)?;
        }
        Ok(())
    }

    fn account(&mut self, executed: &[(GpuId, ResidentId, u64)]) {
        let mut per_gpu: BTreeMap<GpuId, u64> = BTreeMap::new();
        for &(gpu, _, e) in executed {
            *per_gpu.entry(gpu).or_default() += e;
        }
        let max = self.vcfg.max_tokens as f64;
        let acc = &mut self.log.acc;
        for gpu in self.cluster.active_ids() {
            let g = &self.cluster.gpus()[gpu.0 as usize];
            let used = per_gpu.get(&gpu).copied().unwrap_or(0) as f64 / max;
            acc.gpu_ticks += 1;
            acc.sm_frag_sum += (1.0 - used).clamp(0.0, 1.0);
            acc.mem_frag_sum += (1.0 - g.mem_used_gb / g.mem_total_gb).clamp(0.0, 1.0);
        }
        for inst in self.instances.values() {
            acc.exclusive_gpu_ticks += self.funcs[inst.func].exclusive_need(self.gpu_mem_gb);
        }
        acc.ticks += 1;
    }

    fn check_invariants(&self, now: u64, executed: &[(GpuId, ResidentId, u64)]) -> Result<()> {
        let fail = |detail: String| Error::Invariant { at_ms: now, detail };
        self.cluster.check_invariants(&self.sched).map_err(fail)?;
        let mut per_gpu: BTreeMap<GpuId, u64> = BTreeMap::new();
        for &(gpu, _, e) in executed {
            *per_gpu.entry(gpu).or_default() += e;
        }
        for (gpu, total) in per_gpu {
            if total > self.vcfg.max_tokens {
                return Err(fail(format!("{gpu} executed {total} blocks in one period")));
            }
        }
        for (gpu, arb) in &self.arbiters {
            arb.check_invariants().map_err(|d| fail(format!("{gpu}: {d}")))?;
        }
        let held: usize = self
            .instances
            .values()
            .map(|i| match &i.body {
                Body::Inference { queue } => queue.outstanding(),
                Body::Training { .. } => 0,
            })
            .sum::<usize>()
            + self.funcs.iter().map(|f| f.waiting.len()).sum::<usize>();
        if self.completed as usize + held != self.requests.len() {
            return Err(fail(format!(
                "request conservation: {} admitted, {} completed, {held} in flight",
                self.requests.len(),
                self.completed
            )));
        }
        for inst in self.instances.values() {
            if self.cluster.charges_of(inst.state.instance_id).is_none() {
                return Err(fail(format!("{} has no placement", inst.state.instance_id)));
            }
            if inst.residents.iter().any(|(g, r)| self.arbiters.get(g).and_then(|a| a.tokens(*r)).is_none()) {
                return Err(fail(format!("{} missing from an arbiter", inst.state.instance_id)));
            }
        }
        Ok(())
    }
}

/// Uncontended duration in periods when granted `tokens` per period.
fn span_at(w: &BlockWork, tokens: u64) -> f64 {
    w.blocks as f64 / w.cap_per_period.min(tokens.max(1)) as f64
}

/// Pipeline stages split a batch's blocks evenly, remainder to the front.
fn stage_blocks(blocks: u64, stages: u64, stage: u64) -> u64 {
    let base = blocks / stages;
    let extra = u64::from(stage < blocks % stages);
    (base + extra).max(1)
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    let mut sim = Simulation::new(scenario)?;
    sim.run_to_end()?;
    Ok(sim.finish())
}
