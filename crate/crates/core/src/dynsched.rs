//! Dynamic expert scheduler.
//!
//! Monitors per-interval expert activation counts through a sliding
//! window, smooths them with a normalized EWMA, and forecasts the next
//! interval with a per-entry least-squares trend. When the smoothed
//! imbalance of the routing-visible placement crosses the trigger
//! threshold, a candidate placement is generated on the forecast and
//! adopted only when its simulated imbalance clears the improvement
//! margin. Weight migration is pipelined: replicas transfer in the
//! background and the placement switches atomically when the slowest
//! link finishes. At most one migration is in flight at a time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::load::{imbalance_ratio, LoadMatrix, PlacementTensor};
use crate::placement::{static_expert_placement, BudgetVector, Topology};
use crate::scalar::Scalar;

// ─── Activation window ────────────────────────────────────────────────────────

/// Ring of the last `W` per-interval activation snapshots.
#[derive(Debug, Clone)]
pub struct ActivationWindow<T = f64> {
    layers: usize,
    experts: usize,
    window_len: usize,
    decay: f64,
    snapshots: std::collections::VecDeque<LoadMatrix<T>>,
}

impl<T: Scalar> ActivationWindow<T> {
    pub fn new(layers: usize, experts: usize, window_len: usize, decay: f64) -> Result<Self> {
        if window_len == 0 {
            return Err(Error::invalid("window length must be >= 1"));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(format!("decay {decay} outside (0, 1]")));
        }
        Ok(Self {
            layers,
            experts,
            window_len,
            decay,
            snapshots: std::collections::VecDeque::new(),
        })
    }

    pub fn filled(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Push a snapshot (evicting the oldest when full) and return the
/// normalized EWMA load matrix over the filled window. Entry weights are
/// `decay * (1 - decay)^age` with age 0 the newest snapshot, rescaled to
/// sum to one over however many snapshots are present.
pub fn update_activation_window<T: Scalar>(
    window: &mut ActivationWindow<T>,
    snapshot: &LoadMatrix<T>,
) -> Result<LoadMatrix<T>> {
    if snapshot.layers() != window.layers || snapshot.experts() != window.experts {
        return Err(Error::invalid(format!(
            "snapshot {}x{} does not match window {}x{}",
            snapshot.layers(),
            snapshot.experts(),
            window.layers,
            window.experts
        )));
    }
    window.snapshots.push_back(snapshot.clone());
    if window.snapshots.len() > window.window_len {
        window.snapshots.pop_front();
    }
    smoothed_load(window)
}

/// The EWMA load matrix of the current window contents.
pub fn smoothed_load<T: Scalar>(window: &ActivationWindow<T>) -> Result<LoadMatrix<T>> {
    let n = window.snapshots.len();
    if n == 0 {
        return Err(Error::EmptyInput("activation window has no snapshots".into()));
    }
    let lambda = window.decay;
    // Weight by age, newest last in the deque.
    let weights: Vec<f64> =
        (0..n).map(|age| lambda * (1.0 - lambda).powi(age as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = LoadMatrix::zeros(window.layers, window.experts)?;
    for l in 0..window.layers {
        for e in 0..window.experts {
            let mut acc = 0.0;
            for (age, w) in weights.iter().enumerate() {
                let snap = &window.snapshots[n - 1 - age];
                acc += w * snap.get(l, e).to_f64().unwrap_or(0.0);
            }
            out.set(l, e, T::from_f64_lossy((acc / total).max(0.0)))?;
        }
    }
    Ok(out)
}

/// Forecast the next interval's activations: per-entry least-squares
/// linear trend over the window, evaluated one step past the newest
/// snapshot and clamped at zero. A single snapshot forecasts itself.
pub fn predict_future_activations<T: Scalar>(
    window: &ActivationWindow<T>,
) -> Result<LoadMatrix<T>> {
    let n = window.snapshots.len();
    if n == 0 {
        return Err(Error::EmptyInput("activation window has no snapshots".into()));
    }
    if n == 1 {
        return Ok(window.snapshots[0].clone());
    }
    // x = 0..n-1 oldest to newest; predict at x = n.
    let x_mean = (n as f64 - 1.0) / 2.0;
    let x_var: f64 = (0..n).map(|x| (x as f64 - x_mean).powi(2)).sum();
    let mut out = LoadMatrix::zeros(window.layers, window.experts)?;
    for l in 0..window.layers {
        for e in 0..window.experts {
            let ys: Vec<f64> = (0..n)
                .map(|x| window.snapshots[x].get(l, e).to_f64().unwrap_or(0.0))
                .collect();
            let y_mean = ys.iter().sum::<f64>() / n as f64;
            let cov: f64 =
                (0..n).map(|x| (x as f64 - x_mean) * (ys[x] - y_mean)).sum();
            let slope = cov / x_var;
            let predicted = y_mean + slope * (n as f64 - x_mean);
            out.set(l, e, T::from_f64_lossy(predicted.max(0.0)))?;
        }
    }
    Ok(out)
}

// ─── Scheduler configuration ──────────────────────────────────────────────────

/// Tunables for the dynamic scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// Rebalance only when the aggregate imbalance exceeds this.
    pub trigger: f64,
    /// A candidate must beat the current imbalance by at least this much.
    pub margin: f64,
    /// Scheduling period in simulation time units.
    pub interval: f64,
    /// Redundant slot budget handed to the static placement search.
    pub budget: usize,
    /// Sliding window depth in intervals.
    pub window_len: usize,
    /// EWMA decay coefficient in (0, 1].
    pub decay: f64,
    /// Weight bytes transferred per migrated replica.
    pub expert_bytes: f64,
    /// Per-link transfer bandwidth, bytes per time unit.
    pub link_bandwidth: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            trigger: 1.2,
            margin: 0.05,
            interval: 1.0,
            budget: 8,
            window_len: 8,
            decay: 0.5,
            expert_bytes: 1.5e8,
            link_bandwidth: 2.0e9,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trigger < 1.0 {
            return Err(Error::invalid(format!("trigger {} must be >= 1", self.trigger)));
        }
        if self.margin < 0.0 {
            return Err(Error::invalid(format!("margin {} must be >= 0", self.margin)));
        }
        if self.interval <= 0.0 {
            return Err(Error::invalid(format!("interval {} must be > 0", self.interval)));
        }
        if self.window_len == 0 {
            return Err(Error::invalid("window_len must be >= 1"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!("decay {} outside (0, 1]", self.decay)));
        }
        if self.expert_bytes < 0.0 || self.link_bandwidth <= 0.0 {
            return Err(Error::invalid("expert_bytes must be >= 0 and link_bandwidth > 0"));
        }
        Ok(())
    }
}

// ─── Migration plan ───────────────────────────────────────────────────────────

/// One replica transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Move {
    pub layer: usize,
    pub expert: usize,
    pub source: usize,
    pub dest: usize,
    pub bytes: f64,
}

/// Background transfer schedule for adopting a candidate placement.
/// Links transfer in parallel; the atomic cutover happens when the
/// slowest link finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub moves: Vec<Move>,
    pub duration: f64,
    pub switch_time: f64,
}

/// Diff two placements into a transfer plan. Only newly created replicas
/// move; replicas absent from the candidate are dropped at the switch.
pub fn plan_migration(
    current: &PlacementTensor,
    candidate: &PlacementTensor,
    expert_bytes: f64,
    link_bandwidth: f64,
    now: f64,
) -> Result<MigrationPlan> {
    if current.layers() != candidate.layers()
        || current.devices() != candidate.devices()
        || current.experts() != candidate.experts()
    {
        return Err(Error::invalid("current and candidate placement dimensions differ"));
    }
    let mut moves = Vec::new();
    let mut per_link: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    for l in 0..current.layers() {
        for e in 0..current.experts() {
            for r in 0..current.devices() {
                if candidate.hosts(l, r, e) && !current.hosts(l, r, e) {
                    let source = current
                        .hosting_devices(l, e)
                        .first()
                        .copied()
                        .ok_or_else(|| {
                            Error::InfeasiblePlacement(format!(
                                "expert {e} layer {l} has no source replica"
                            ))
                        })?;
                    let link = (source.min(r), source.max(r));
                    *per_link.entry(link).or_insert(0.0) += expert_bytes;
                    moves.push(Move { layer: l, expert: e, source, dest: r, bytes: expert_bytes });
                }
            }
        }
    }
    let duration = per_link
        .values()
        .map(|&bytes| bytes / link_bandwidth)
        .fold(0.0f64, f64::max);
    Ok(MigrationPlan { moves, duration, switch_time: now + duration })
}

/// Simulation events emitted when a migration starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MigrationEvent {
    /// Non-blocking background transfer occupying `[start, start+duration)`.
    BackgroundTransfer { start: f64, duration: f64, moves: usize },
    /// Atomic cutover to the candidate placement.
    PlacementSwitch { at: f64 },
}

/// Result of asking the scheduler to start a migration.
#[derive(Debug, Clone, PartialEq)]
pub enum MigrationOutcome {
    Started(Vec<MigrationEvent>),
    /// Another migration is still in flight; the request is dropped and
    /// a later scheduler step may re-issue it.
    DeferredBusy,
}

// ─── Decisions and the scheduler state machine ────────────────────────────────

/// A rebalance proposal: the plan, the candidate layout, and both
/// imbalance readings that justified it.
#[derive(Debug, Clone)]
pub struct RebalanceDecision<T = f64> {
    pub plan: MigrationPlan,
    pub candidate: PlacementTensor,
    pub budget: BudgetVector,
    pub b_current: T,
    pub b_sim: T,
}

#[derive(Debug, Clone)]
pub enum Decision<T = f64> {
    NoAction { b_current: T },
    Rebalance(Box<RebalanceDecision<T>>),
}

/// One JSONL-able record per scheduler step or migration event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time: f64,
    pub decision: String,
    pub b_current: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moves: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

struct PendingMigration {
    candidate: PlacementTensor,
    slots: Vec<usize>,
    switch_time: f64,
}

/// The online scheduler: owns the activation window and the
/// routing-visible placement, and is advanced by explicit calls from the
/// simulator's event loop.
pub struct DynScheduler<T = f64> {
    config: SchedulerConfig,
    topo: Topology,
    window: ActivationWindow<T>,
    current: PlacementTensor,
    slots: Vec<usize>,
    inflight: Option<PendingMigration>,
    log: Vec<DecisionRecord>,
}

impl<T: Scalar> DynScheduler<T> {
    pub fn new(
        config: SchedulerConfig,
        initial: PlacementTensor,
        slots: Vec<usize>,
        topo: Topology,
    ) -> Result<Self> {
        config.validate()?;
        initial.validate(&slots)?;
        if topo.devices() != initial.devices() {
            return Err(Error::invalid("topology size does not match placement devices"));
        }
        let window = ActivationWindow::new(
            initial.layers(),
            initial.experts(),
            config.window_len,
            config.decay,
        )?;
        Ok(Self { config, topo, window, current: initial, slots, inflight: None, log: Vec::new() })
    }

    /// The placement routing sees right now. Before a migration's switch
    /// time this is still the old layout.
    pub fn placement(&self) -> &PlacementTensor {
        &self.current
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn migration_in_flight(&self) -> bool {
        self.inflight.is_some()
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn log(&self) -> &[DecisionRecord] {
        &self.log
    }

    /// Feed one interval's activation counts; returns the smoothed load.
    pub fn observe(&mut self, snapshot: &LoadMatrix<T>) -> Result<LoadMatrix<T>> {
        update_activation_window(&mut self.window, snapshot)
    }

    /// Aggregate (worst-layer) imbalance of a placement under a load.
    fn aggregate_imbalance(placement: &PlacementTensor, loads: &LoadMatrix<T>) -> Result<T> {
        let mut worst = T::one();
        for l in 0..placement.layers() {
            let b = imbalance_ratio(placement, loads, l)?;
            if b > worst {
                worst = b;
            }
        }
        Ok(worst)
    }

    /// One scheduling step: decide whether to rebalance.
    pub fn step(&mut self, now: f64) -> Result<Decision<T>> {
        let smoothed = smoothed_load(&self.window)?;
        let b_current = Self::aggregate_imbalance(&self.current, &smoothed)?;
        let b_current_f = b_current.to_f64().unwrap_or(f64::NAN);
        if b_current <= T::from_f64_lossy(self.config.trigger) {
            self.log.push(DecisionRecord {
                time: now,
                decision: "no_action".into(),
                b_current: b_current_f,
                b_sim: None,
                moves: None,
                duration: None,
            });
            return Ok(Decision::NoAction { b_current });
        }
        let predicted = predict_future_activations(&self.window)?;
        let (candidate, budget) = static_expert_placement(
            &predicted,
            self.current.devices(),
            self.config.budget,
            &self.topo,
        )?;
        let b_sim = Self::aggregate_imbalance(&candidate, &predicted)?;
        let improves =
            b_sim < b_current - T::from_f64_lossy(self.config.margin);
        if !improves {
            self.log.push(DecisionRecord {
                time: now,
                decision: "no_action_margin".into(),
                b_current: b_current_f,
                b_sim: Some(b_sim.to_f64().unwrap_or(f64::NAN)),
                moves: None,
                duration: None,
            });
            return Ok(Decision::NoAction { b_current });
        }
        let plan = plan_migration(
            &self.current,
            &candidate,
            self.config.expert_bytes,
            self.config.link_bandwidth,
            now,
        )?;
        self.log.push(DecisionRecord {
            time: now,
            decision: "rebalance".into(),
            b_current: b_current_f,
            b_sim: Some(b_sim.to_f64().unwrap_or(f64::NAN)),
            moves: Some(plan.moves.len()),
            duration: Some(plan.duration),
        });
        Ok(Decision::Rebalance(Box::new(RebalanceDecision {
            plan,
            candidate,
            budget,
            b_current,
            b_sim,
        })))
    }

    /// Start the background migration for an accepted rebalance. Returns
    /// the simulation events to enqueue, or a defer signal when another
    /// migration is still in flight.
    pub fn apply_migration(
        &mut self,
        decision: &RebalanceDecision<T>,
        now: f64,
    ) -> Result<MigrationOutcome> {
        if self.inflight.is_some() {
            self.log.push(DecisionRecord {
                time: now,
                decision: "deferred_busy".into(),
                b_current: decision.b_current.to_f64().unwrap_or(f64::NAN),
                b_sim: Some(decision.b_sim.to_f64().unwrap_or(f64::NAN)),
                moves: Some(decision.plan.moves.len()),
                duration: None,
            });
            return Ok(MigrationOutcome::DeferredBusy);
        }
        for m in &decision.plan.moves {
            if m.source == m.dest {
                return Err(Error::invalid("migration move with source == dest"));
            }
            if !self.current.hosts(m.layer, m.source, m.expert) {
                return Err(Error::invalid(format!(
                    "move source device {} does not host expert {} in layer {}",
                    m.source, m.expert, m.layer
                )));
            }
        }
        let switch_time = now + decision.plan.duration;
        let mut events = Vec::new();
        if !decision.plan.moves.is_empty() {
            events.push(MigrationEvent::BackgroundTransfer {
                start: now,
                duration: decision.plan.duration,
                moves: decision.plan.moves.len(),
            });
        }
        events.push(MigrationEvent::PlacementSwitch { at: switch_time });
        self.inflight = Some(PendingMigration {
            candidate: decision.candidate.clone(),
            slots: decision.budget.slots().to_vec(),
            switch_time,
        });
        Ok(MigrationOutcome::Started(events))
    }

    /// Perform the atomic cutover. Call when the simulation clock reaches
    /// the switch time of the in-flight migration.
    pub fn complete_migration(&mut self, now: f64) -> Result<&PlacementTensor> {
        let pending = self
            .inflight
            .take()
            .ok_or_else(|| Error::ProtocolViolation("no migration in flight".into()))?;
        if now + 1e-12 < pending.switch_time {
            self.inflight = Some(pending);
            return Err(Error::ProtocolViolation(format!(
                "switch requested at {now} before switch_time"
            )));
        }
        self.current = pending.candidate;
        self.slots = pending.slots;
        self.log.push(DecisionRecord {
            time: now,
            decision: "switched".into(),
            b_current: f64::NAN,
            b_sim: None,
            moves: None,
            duration: None,
        });
        Ok(&self.current)
    }
}
