//! The deterministic closed-loop cluster simulation.
//!
//! A single-threaded event loop (priority queue ordered by time, ties by
//! insertion order) drives requests through the proxy, the prefill
//! nodes, a KV transfer hop, and the decode groups. Whenever a request
//! completes, the injector immediately admits the next trace request, so
//! the in-flight count stays pinned at the configured concurrency.
//! Identical configuration and seed give byte-identical reports.

use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attnpattern::{CompressionPattern, LatencyModel, SparseIndexSet};
use crate::dynsched::{Decision, DynScheduler, MigrationEvent, MigrationOutcome};
use crate::error::{Error, Result};
use crate::load::{device_loads, imbalance_ratio, LoadMatrix, PlacementTensor};
use crate::placement::{static_expert_placement, Topology};
use crate::proxy::{
    advance_lifecycle, defer_and_resort, schedule_decode_lpt, schedule_prefill,
    schedule_prefill_round_robin, DecodeItem, LifecycleEvent, NodeRole, NodeState, PrefillItem,
    PrefixTree, QueueKind, QueuedRequest, Request,
};

use super::report::{build_report, MetricsBank, ReportInputs, SimReport};
use super::workload::{generate_workload, zipf_mass, TraceRequest};
use super::{AttnMode, ClusterConfig, CostModel, PlacementMode, ProxyMode, Scenario, StopWhen};

// ─── Cost model operations ────────────────────────────────────────────────────

/// Prefill service time for `new_tokens` uncached tokens. Compressed
/// layers cut the per-token cost through `attn_factor` (1.0 = no
/// compression; a full cache hit leaves only the base cost).
pub fn prefill_duration(costs: &CostModel, new_tokens: usize, attn_factor: f64) -> f64 {
    costs.prefill_base + costs.prefill_per_token * new_tokens as f64 * attn_factor
}

/// One decode step for a batch whose per-layer expert routing is
/// `step_loads`: base cost, a KV-read term on the mean effective cache
/// length, and an expert term gated by the hottest device (mean over
/// layers), which is exactly the bottleneck balanced placement shrinks.
pub fn decode_step_duration(
    costs: &CostModel,
    placement: &PlacementTensor,
    step_loads: &LoadMatrix,
    mean_kv_tokens: f64,
) -> Result<f64> {
    let layers = step_loads.layers();
    let mut total = 0.0;
    let mut any = false;
    for l in 0..layers {
        if step_loads.layer_total(l) > 0.0 {
            any = true;
        }
        let dl = device_loads(placement, step_loads, l)?;
        total += dl.max();
    }
    if !any {
        return Err(Error::invalid("decode step with an empty batch"));
    }
    let expert_term = costs.decode_per_load_unit * total / layers as f64;
    Ok(costs.decode_base + costs.decode_per_kv_token * mean_kv_tokens + expert_term)
}

// ─── Events ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
enum Event {
    ProxyTick,
    PrefillStart { node: usize },
    PrefillDone { node: usize, request: u64 },
    KvTransferDone { request: u64 },
    DecodeStep { group: usize },
    SchedulerTick,
    MigrationSwitch,
}

#[derive(Debug)]
struct QueuedEvent {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time.total_cmp(&other.time).is_eq() && self.seq == other.seq
    }
}

impl Eq for QueuedEvent {}

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; reverse for earliest-first.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Optional JSONL event log: one `serde_json::Value` per line.
#[derive(Debug, Default)]
pub struct EventLog {
    pub lines: Vec<serde_json::Value>,
}

impl EventLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

// ─── Simulation state ─────────────────────────────────────────────────────────

struct ReqMeta {
    output_len: usize,
    labels: Vec<u16>,
    prefill_node: usize,
    decode_group: usize,
    match_len: usize,
    unmatched: usize,
    workload: f64,
}

struct DecodeGroup {
    active: Vec<u64>,
    queue: VecDeque<u64>,
    stepping: bool,
    capacity: usize,
    busy_time: f64,
}

pub struct Simulation {
    cfg: ClusterConfig,
    features: super::FeatureFlags,
    stop: StopWhen,
    label: String,

    clock: f64,
    seq: u64,
    queue: BinaryHeap<QueuedEvent>,

    trace: VecDeque<TraceRequest>,
    requests: Vec<Request>,
    meta: Vec<ReqMeta>,

    perms: Vec<Vec<u16>>,
    pattern: CompressionPattern,
    attn_prefill_factor: f64,

    tree: PrefixTree,
    prefill_nodes: Vec<NodeState>,
    node_queues: Vec<VecDeque<u64>>,
    node_busy: Vec<Option<u64>>,
    node_busy_time: Vec<f64>,
    prefill_pool: Vec<QueuedRequest>,
    decode_pool: Vec<QueuedRequest>,
    rr_prefill_cursor: usize,
    rr_decode_cursor: usize,

    groups: Vec<DecodeGroup>,
    group_states: Vec<NodeState>,

    placement: PlacementTensor,
    dyn_sched: Option<DynScheduler>,
    activation_acc: Vec<f64>,

    target_concurrency: usize,
    inflight: usize,
    injected: usize,
    completions: usize,
    warmup: usize,
    budget: usize,
    concurrency_violations: usize,

    bank: MetricsBank,
    window_start: f64,
    window_end: f64,
    radix_hit_tokens: u64,
    rebalances: usize,
    imbalance_series: Vec<(f64, f64)>,

    log: Option<EventLog>,
    done: bool,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let cfg = scenario.cluster.clone();
        let layers = cfg.layers;
        let experts = cfg.experts;
        let devices = cfg.expert_devices;

        let budget = match scenario.stop {
            StopWhen::Completions(n) => n,
            StopWhen::SimTime(_) => usize::MAX / 2,
        };
        let target = cfg.target_concurrency();
        let trace_len = match scenario.stop {
            StopWhen::Completions(n) => n + target + 16,
            StopWhen::SimTime(t) => {
                // Generous upper bound: one completion per decode_base.
                target + 16 + (t / cfg.costs.decode_base).ceil() as usize * target
            }
        };
        let trace = generate_workload(&scenario.workload, trace_len, experts)?;

        // Per-layer expert relabeling so each layer has its own hot set.
        let mut perm_rng = ChaCha8Rng::seed_from_u64(scenario.workload.seed ^ 0x9e37_79b9);
        let perms: Vec<Vec<u16>> = (0..layers)
            .map(|_| {
                let mut p: Vec<u16> = (0..experts as u16).collect();
                p.shuffle(&mut perm_rng);
                p
            })
            .collect();

        let pattern = cfg.effective_pattern(scenario.features.attn)?;
        let latency_model =
            LatencyModel::uniform(layers, 1.0, cfg.compressed_layer_cost)?;
        let attn_prefill_factor = latency_model.cost_factor(&pattern)?;

        // Initial placement per feature mode.
        let naive = naive_placement(layers, devices, experts)?;
        let naive_slots = vec![experts.div_ceil(devices); layers];
        let (placement, slots, dyn_sched) = match scenario.features.placement {
            PlacementMode::None => (naive, naive_slots, None),
            PlacementMode::Static => {
                let profile = routing_profile(&perms, experts, scenario.workload.expert_skew)?;
                let (p, budget_vec) = static_expert_placement(
                    &profile,
                    devices,
                    cfg.scheduler.budget,
                    &Topology::flat(devices),
                )?;
                (p, budget_vec.slots().to_vec(), None)
            }
            PlacementMode::Dynamic => {
                let ds = DynScheduler::new(
                    cfg.scheduler.clone(),
                    naive.clone(),
                    naive_slots.clone(),
                    Topology::flat(devices),
                )?;
                (naive, naive_slots, Some(ds))
            }
        };
        placement.validate(&slots)?;

        let nodes_per_group = cfg.decode_width / 8;
        let group_capacity = cfg.per_die_batch * nodes_per_group * cfg.dies_per_node;
        let groups = (0..cfg.decode_groups)
            .map(|_| DecodeGroup {
                active: Vec::new(),
                queue: VecDeque::new(),
                stepping: false,
                capacity: group_capacity,
                busy_time: 0.0,
            })
            .collect();
        let group_states =
            (0..cfg.decode_groups).map(|i| NodeState::new(i, NodeRole::Decode)).collect();

        let warmup = ((budget as f64 * 0.05).ceil() as usize).max(1);
        let tree = PrefixTree::new(cfg.proxy.node_cache_tokens);
        let prefill_nodes =
            (0..cfg.prefill_nodes).map(|i| NodeState::new(i, NodeRole::Prefill)).collect();

        Ok(Self {
            label: scenario.label.clone(),
            features: scenario.features,
            stop: scenario.stop,
            clock: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            trace: trace.into(),
            requests: Vec::new(),
            meta: Vec::new(),
            perms,
            pattern,
            attn_prefill_factor,
            tree,
            prefill_nodes,
            node_queues: (0..cfg.prefill_nodes).map(|_| VecDeque::new()).collect(),
            node_busy: vec![None; cfg.prefill_nodes],
            node_busy_time: vec![0.0; cfg.prefill_nodes],
            prefill_pool: Vec::new(),
            decode_pool: Vec::new(),
            rr_prefill_cursor: 0,
            rr_decode_cursor: 0,
            groups,
            group_states,
            placement,
            dyn_sched,
            activation_acc: vec![0.0; layers * experts],
            target_concurrency: target,
            inflight: 0,
            injected: 0,
            completions: 0,
            warmup,
            budget,
            concurrency_violations: 0,
            bank: MetricsBank::default(),
            window_start: 0.0,
            window_end: 0.0,
            radix_hit_tokens: 0,
            rebalances: 0,
            imbalance_series: Vec::new(),
            log: None,
            cfg,
            done: false,
        })
    }

    pub fn enable_event_log(&mut self) {
        self.log = Some(EventLog::default());
    }

    fn routing_placement(&self) -> &PlacementTensor {
        match &self.dyn_sched {
            Some(ds) => ds.placement(),
            None => &self.placement,
        }
    }

    fn push_event(&mut self, time: f64, event: Event) {
        self.seq += 1;
        self.queue.push(QueuedEvent { time, seq: self.seq, event });
    }

    fn log_line(&mut self, value: serde_json::Value) {
        if let Some(log) = &mut self.log {
            log.lines.push(value);
        }
    }

    /// Run to completion and build the report.
    pub fn run(mut self) -> Result<(SimReport, Option<EventLog>)> {
        for _ in 0..self.target_concurrency {
            self.inject(0.0)?;
        }
        self.push_event(0.0, Event::ProxyTick);
        self.push_event(self.cfg.scheduler.interval, Event::SchedulerTick);

        while let Some(entry) = self.queue.pop() {
            if self.done {
                break;
            }
            if let StopWhen::SimTime(limit) = self.stop {
                if entry.time > limit {
                    self.window_end = limit;
                    break;
                }
            }
            debug_assert!(entry.time + 1e-9 >= self.clock, "event time went backwards");
            self.clock = entry.time;
            match entry.event {
                Event::ProxyTick => self.on_proxy_tick(entry.time)?,
                Event::PrefillStart { node } => self.on_prefill_start(node, entry.time)?,
                Event::PrefillDone { node, request } => {
                    self.on_prefill_done(node, request, entry.time)?
                }
                Event::KvTransferDone { request } => self.on_kv_done(request, entry.time)?,
                Event::DecodeStep { group } => self.on_decode_step(group, entry.time)?,
                Event::SchedulerTick => self.on_scheduler_tick(entry.time)?,
                Event::MigrationSwitch => self.on_migration_switch(entry.time)?,
            }
        }

        if self.bank.e2e.is_empty() {
            return Err(Error::InvalidConfig(
                "simulation ended before any measured completion; raise the budget".into(),
            ));
        }
        let mut log = self.log.take();
        if let (Some(log), Some(ds)) = (log.as_mut(), self.dyn_sched.as_ref()) {
            for rec in ds.log() {
                log.lines.push(serde_json::json!({
                    "kind": "scheduler",
                    "time": rec.time,
                    "decision": rec.decision,
                    "b_current": rec.b_current,
                    "b_sim": rec.b_sim,
                    "moves": rec.moves,
                }));
            }
        }
        let elapsed_total = self.clock.max(f64::EPSILON);
        let report = build_report(ReportInputs {
            label: self.label.clone(),
            xpyd: self.cfg.xpyd_label(),
            per_die_batch: self.cfg.per_die_batch,
            concurrency: self.target_concurrency,
            bank: &self.bank,
            window: (self.window_start, self.window_end),
            radix_hit_tokens: self.radix_hit_tokens,
            rebalances: self.rebalances,
            prefill_utilization: self
                .node_busy_time
                .iter()
                .map(|&b| b / elapsed_total)
                .collect(),
            decode_utilization: self.groups.iter().map(|g| g.busy_time / elapsed_total).collect(),
            imbalance_series: std::mem::take(&mut self.imbalance_series),
            concurrency_violations: self.concurrency_violations,
        })?;
        Ok((report, log))
    }

    fn inject(&mut self, now: f64) -> Result<()> {
        let Some(tr) = self.trace.pop_front() else { return Ok(()) };
        let id = self.requests.len() as u64;
        debug_assert_eq!(tr.id, id);
        let mut request = Request::new(id, tr.prompt, tr.max_tokens, now);
        // Tokenize and prefix matching are modeled as instantaneous: the
        // request reaches the prefill wait queue at its arrival instant.
        advance_lifecycle(&mut request, LifecycleEvent::TokenizeComplete, now)?;
        advance_lifecycle(&mut request, LifecycleEvent::ApcMatchComplete, now)?;
        let workload = (request.prompt_len
            + request.max_tokens.unwrap_or(self.cfg.proxy.default_max_tokens))
            as f64;
        self.prefill_pool.push(QueuedRequest {
            id,
            arrival: now,
            prompt: Some(Arc::clone(&request.prompt)),
            workload,
        });
        self.meta.push(ReqMeta {
            output_len: tr.output_len.max(1),
            labels: tr.expert_labels,
            prefill_node: usize::MAX,
            decode_group: usize::MAX,
            match_len: 0,
            unmatched: 0,
            workload,
        });
        self.requests.push(request);
        self.injected += 1;
        self.inflight += 1;
        Ok(())
    }

    fn on_proxy_tick(&mut self, now: f64) -> Result<()> {
        // Prefill side.
        let pool = std::mem::take(&mut self.prefill_pool);
        let (dispatch, retained) = match self.features.proxy {
            ProxyMode::Oas => {
                let out = defer_and_resort(
                    pool,
                    QueueKind::Prefill,
                    &self.prefill_nodes,
                    &self.tree,
                    now,
                    &self.cfg.proxy,
                );
                (out.dispatch, out.retained)
            }
            ProxyMode::RoundRobin => {
                let mut dispatch = pool;
                dispatch.sort_by(|a, b| {
                    a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id))
                });
                (dispatch, Vec::new())
            }
        };
        self.prefill_pool = retained;
        if !dispatch.is_empty() {
            let items: Vec<PrefillItem> = dispatch
                .iter()
                .map(|q| PrefillItem {
                    id: q.id,
                    prompt: Arc::clone(q.prompt.as_ref().expect("prefill queue carries prompts")),
                })
                .collect();
            let assignments = match self.features.proxy {
                ProxyMode::Oas => schedule_prefill(
                    &items,
                    &mut self.prefill_nodes,
                    &mut self.tree,
                    &self.cfg.proxy,
                )?,
                ProxyMode::RoundRobin => schedule_prefill_round_robin(
                    &items,
                    &mut self.prefill_nodes,
                    &mut self.tree,
                    &mut self.rr_prefill_cursor,
                )?,
            };
            for a in assignments {
                let id = a.request as usize;
                advance_lifecycle(&mut self.requests[id], LifecycleEvent::PrefillDispatched, now)?;
                self.meta[id].prefill_node = a.node;
                self.meta[id].match_len = a.match_len;
                self.meta[id].unmatched = self.requests[id].prompt_len - a.match_len;
                self.node_queues[a.node].push_back(a.request);
                self.log_line(serde_json::json!({
                    "kind": "prefill_dispatch", "time": now, "request": a.request,
                    "node": a.node, "match": a.match_len, "score": a.score,
                }));
                if self.node_busy[a.node].is_none() {
                    self.push_event(now, Event::PrefillStart { node: a.node });
                }
            }
        }

        // Decode side.
        let pool = std::mem::take(&mut self.decode_pool);
        let (dispatch, retained) = match self.features.proxy {
            ProxyMode::Oas => {
                let out = defer_and_resort(
                    pool,
                    QueueKind::Decode,
                    &self.group_states,
                    &self.tree,
                    now,
                    &self.cfg.proxy,
                );
                (out.dispatch, out.retained)
            }
            ProxyMode::RoundRobin => {
                let mut dispatch = pool;
                dispatch.sort_by(|a, b| {
                    a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id))
                });
                (dispatch, Vec::new())
            }
        };
        self.decode_pool = retained;
        if !dispatch.is_empty() {
            let assignments = match self.features.proxy {
                ProxyMode::Oas => {
                    let items: Vec<DecodeItem> = dispatch
                        .iter()
                        .map(|q| DecodeItem { id: q.id, workload: q.workload, arrival: q.arrival })
                        .collect();
                    schedule_decode_lpt(&items, &mut self.group_states)?
                }
                ProxyMode::RoundRobin => {
                    let mut out = Vec::with_capacity(dispatch.len());
                    for q in &dispatch {
                        let g = self.rr_decode_cursor % self.group_states.len();
                        self.rr_decode_cursor = (self.rr_decode_cursor + 1) % self.group_states.len();
                        let state = &mut self.group_states[g];
                        state.accumulated_workload += q.workload;
                        state.running_requests += 1;
                        out.push(crate::proxy::DecodeAssignment {
                            request: q.id,
                            instance: g,
                            workload: q.workload,
                        });
                    }
                    out
                }
            };
            for a in assignments {
                let id = a.request as usize;
                advance_lifecycle(&mut self.requests[id], LifecycleEvent::DecodeDispatched, now)?;
                self.meta[id].decode_group = a.instance;
                self.groups[a.instance].queue.push_back(a.request);
                self.log_line(serde_json::json!({
                    "kind": "decode_dispatch", "time": now, "request": a.request,
                    "group": a.instance, "workload": a.workload,
                }));
                if !self.groups[a.instance].stepping {
                    self.start_decode_step(a.instance, now)?;
                }
            }
        }

        if !self.done {
            self.push_event(now + self.cfg.proxy_interval, Event::ProxyTick);
        }
        Ok(())
    }

    fn on_prefill_start(&mut self, node: usize, now: f64) -> Result<()> {
        if self.node_busy[node].is_some() {
            return Ok(());
        }
        let Some(id) = self.node_queues[node].pop_front() else { return Ok(()) };
        advance_lifecycle(&mut self.requests[id as usize], LifecycleEvent::PrefillStarted, now)?;
        let unmatched = self.meta[id as usize].unmatched;
        let duration = prefill_duration(&self.cfg.costs, unmatched, self.attn_prefill_factor);
        self.node_busy[node] = Some(id);
        self.node_busy_time[node] += duration;
        self.prefill_nodes[node].last_batch_start = now;
        self.push_event(now + duration, Event::PrefillDone { node, request: id });
        Ok(())
    }

    fn on_prefill_done(&mut self, node: usize, id: u64, now: f64) -> Result<()> {
        debug_assert_eq!(self.node_busy[node], Some(id));
        self.node_busy[node] = None;
        advance_lifecycle(&mut self.requests[id as usize], LifecycleEvent::PrefillCompleted, now)?;
        let meta = &self.meta[id as usize];
        let state = &mut self.prefill_nodes[node];
        state.running_tokens = state.running_tokens.saturating_sub(meta.unmatched);
        state.running_requests = state.running_requests.saturating_sub(1);
        state.observe_batch_cycle(now - state.last_batch_start);
        if !self.node_queues[node].is_empty() {
            self.push_event(now, Event::PrefillStart { node });
        }
        let transfer =
            self.cfg.costs.kv_transfer_per_token * self.requests[id as usize].prompt_len as f64;
        self.push_event(now + transfer, Event::KvTransferDone { request: id });
        Ok(())
    }

    fn on_kv_done(&mut self, id: u64, now: f64) -> Result<()> {
        let req = &self.requests[id as usize];
        self.decode_pool.push(QueuedRequest {
            id,
            arrival: now,
            prompt: None,
            workload: self.meta[id as usize].workload,
        });
        debug_assert_eq!(req.phase(), crate::proxy::RequestPhase::DecodeWaiting);
        Ok(())
    }

    /// Admit queued requests and launch the next decode step of a group.
    fn start_decode_step(&mut self, g: usize, now: f64) -> Result<()> {
        while self.groups[g].active.len() < self.groups[g].capacity {
            let Some(id) = self.groups[g].queue.pop_front() else { break };
            advance_lifecycle(&mut self.requests[id as usize], LifecycleEvent::DecodeStarted, now)?;
            self.groups[g].active.push(id);
        }
        if self.groups[g].active.is_empty() {
            self.groups[g].stepping = false;
            return Ok(());
        }
        let (step_loads, mean_kv) = self.step_inputs(g);
        let duration =
            decode_step_duration(&self.cfg.costs, self.routing_placement(), &step_loads, mean_kv)?;
        for l in 0..self.cfg.layers {
            for e in 0..self.cfg.experts {
                self.activation_acc[l * self.cfg.experts + e] += step_loads.get(l, e);
            }
        }
        let group = &mut self.groups[g];
        group.stepping = true;
        group.busy_time += duration;
        let state = &mut self.group_states[g];
        state.last_batch_start = now;
        state.observe_batch_cycle(duration);
        self.push_event(now + duration, Event::DecodeStep { group: g });
        Ok(())
    }

    /// Per-layer expert counts and mean effective KV length for the
    /// step a group is about to run.
    fn step_inputs(&self, g: usize) -> (LoadMatrix, f64) {
        let layers = self.cfg.layers;
        let experts = self.cfg.experts;
        let retained = (self.cfg.sink_tokens + self.cfg.recent_tokens) as f64;
        let mut counts = vec![0.0f64; layers * experts];
        let mut kv_sum = 0.0;
        for &id in &self.groups[g].active {
            let req = &self.requests[id as usize];
            let meta = &self.meta[id as usize];
            let label = meta.labels[req.generated.min(meta.labels.len() - 1)] as usize;
            let kv = (req.prompt_len + req.generated) as f64;
            for l in 0..layers {
                let e = self.perms[l][label] as usize;
                counts[l * experts + e] += 1.0;
                kv_sum += if self.pattern.is_compressed(l) { kv.min(retained) } else { kv };
            }
        }
        let batch = self.groups[g].active.len().max(1) as f64;
        let mean_kv = kv_sum / (batch * layers as f64);
        let loads = LoadMatrix::from_rows(
            &(0..layers).map(|l| counts[l * experts..(l + 1) * experts].to_vec()).collect::<Vec<_>>(),
        )
        .expect("counts are non-negative");
        (loads, mean_kv)
    }

    fn on_decode_step(&mut self, g: usize, now: f64) -> Result<()> {
        let ids = std::mem::take(&mut self.groups[g].active);
        let mut survivors = Vec::with_capacity(ids.len());
        for id in ids {
            let req = &mut self.requests[id as usize];
            req.record_token(now)?;
            if req.generated >= self.meta[id as usize].output_len {
                self.complete(id, now)?;
                if self.done {
                    return Ok(());
                }
            } else {
                survivors.push(id);
            }
        }
        self.groups[g].active = survivors;
        self.start_decode_step(g, now)
    }

    fn complete(&mut self, id: u64, now: f64) -> Result<()> {
        advance_lifecycle(&mut self.requests[id as usize], LifecycleEvent::Completed, now)?;
        self.inflight -= 1;
        self.completions += 1;
        let meta = &self.meta[id as usize];
        let g = meta.decode_group;
        let state = &mut self.group_states[g];
        state.accumulated_workload = (state.accumulated_workload - meta.workload).max(0.0);
        state.running_requests = state.running_requests.saturating_sub(1);

        let req = &self.requests[id as usize];
        self.log_line(serde_json::json!({
            "kind": "complete", "time": now, "request": id,
            "ttft": req.ttft, "generated": req.generated,
        }));
        if self.completions == self.warmup {
            self.window_start = now;
        }
        if self.completions > self.warmup {
            let req = &self.requests[id as usize];
            self.bank.ttft.push(req.ttft.expect("completed request has a first token"));
            if !req.tpot_samples.is_empty() {
                let mean_tpot =
                    req.tpot_samples.iter().sum::<f64>() / req.tpot_samples.len() as f64;
                self.bank.tpot_ms.push(mean_tpot * 1000.0);
            }
            self.bank.e2e.push(now - req.arrival);
            self.bank.output_tokens += req.generated as u64;
            self.bank.prompt_tokens += req.prompt_len as u64;
            self.radix_hit_tokens += self.meta[id as usize].match_len as u64;
        }
        if self.completions >= self.budget {
            self.window_end = now;
            self.done = true;
            return Ok(());
        }
        // Closed loop: replace the completion immediately.
        self.inject(now)?;
        if self.completions >= self.warmup && self.inflight != self.target_concurrency {
            self.concurrency_violations += 1;
        }
        Ok(())
    }

    fn on_scheduler_tick(&mut self, now: f64) -> Result<()> {
        let layers = self.cfg.layers;
        let experts = self.cfg.experts;
        let rows: Vec<Vec<f64>> = (0..layers)
            .map(|l| self.activation_acc[l * experts..(l + 1) * experts].to_vec())
            .collect();
        self.activation_acc.iter_mut().for_each(|v| *v = 0.0);
        let snapshot = LoadMatrix::from_rows(&rows)?;

        let mut worst: f64 = 1.0;
        for l in 0..layers {
            worst = worst.max(imbalance_ratio(self.routing_placement(), &snapshot, l)?);
        }
        self.imbalance_series.push((now, worst));

        if let Some(ds) = self.dyn_sched.as_mut() {
            ds.observe(&snapshot)?;
            if let Decision::Rebalance(decision) = ds.step(now)? {
                match ds.apply_migration(&decision, now)? {
                    MigrationOutcome::Started(events) => {
                        self.rebalances += 1;
                        for ev in events {
                            if let MigrationEvent::PlacementSwitch { at } = ev {
                                self.push_event(at, Event::MigrationSwitch);
                            }
                        }
                    }
                    MigrationOutcome::DeferredBusy => {}
                }
            }
        }
        if !self.done {
            self.push_event(now + self.cfg.scheduler.interval, Event::SchedulerTick);
        }
        Ok(())
    }

    fn on_migration_switch(&mut self, now: f64) -> Result<()> {
        if let Some(ds) = self.dyn_sched.as_mut() {
            ds.complete_migration(now)?;
            let slots = ds.slots().to_vec();
            ds.placement().validate(&slots)?;
            self.log_line(serde_json::json!({
                "kind": "migration_switch", "time": now,
            }));
        }
        Ok(())
    }
}

fn naive_placement(layers: usize, devices: usize, experts: usize) -> Result<PlacementTensor> {
    let mut p = PlacementTensor::new(layers, devices, experts)?;
    for l in 0..layers {
        for e in 0..experts {
            p.set(l, e % devices, e, true);
        }
    }
    Ok(p)
}

/// Expected per-layer expert mass from the workload's Zipf skew, passed
/// through each layer's relabeling permutation. Stands in for an offline
/// profiling run when placing statically.
fn routing_profile(perms: &[Vec<u16>], experts: usize, skew: f64) -> Result<LoadMatrix> {
    let mass = zipf_mass(experts, skew);
    let rows: Vec<Vec<f64>> = perms
        .iter()
        .map(|perm| {
            let mut row = vec![0.0; experts];
            for (label, &m) in mass.iter().enumerate() {
                row[perm[label] as usize] += m * 1000.0;
            }
            row
        })
        .collect();
    LoadMatrix::from_rows(&rows)
}

/// Run one scenario to completion.
pub fn run_simulation(scenario: &Scenario) -> Result<SimReport> {
    let sim = Simulation::new(scenario)?;
    Ok(sim.run()?.0)
}

/// Run one scenario and also collect the JSONL event log.
pub fn run_simulation_with_events(scenario: &Scenario) -> Result<(SimReport, EventLog)> {
    let mut sim = Simulation::new(scenario)?;
    sim.enable_event_log();
    let (report, log) = sim.run()?;
    Ok((report, log.expect("event log was enabled")))
}
