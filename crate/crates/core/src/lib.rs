//! Serving-optimization engines for a prefill/decode-disaggregated MoE
//! cluster, plus a deterministic discrete-event simulator to evaluate them.
//!
//! The crate has three engines and the harness around them:
//!
//! - [`placement`] / [`dynsched`] — load-aware expert placement: a static
//!   per-layer redundancy search and an online scheduler that forecasts
//!   activations and migrates replicas when imbalance crosses a trigger.
//! - [`attnpattern`] — sink+recent KV compression, reference dense/sparse
//!   attention, and a genetic search for layer-wise compression patterns
//!   under an accuracy constraint.
//! - [`proxy`] — request lifecycle tracking, radix-tree prefix matching,
//!   cache-aware prefill scoring, LPT decode scheduling, and deferred
//!   submission.
//! - [`simcluster`] — the closed-loop constant-concurrency cluster
//!   simulation that ties everything together and produces reports.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the simulator and CLI use the `f64` defaults. Single-precision aliases
//! live at the crate root.

pub mod attnpattern;
pub mod dynsched;
pub mod error;
pub mod load;
pub mod metrics;
pub mod placement;
pub mod proxy;
pub mod scalar;

pub use attnpattern::{
    build_sparse_index_set, dense_attention, exhaustive_pattern_scan, ga_search, pattern_latency,
    sparse_attention, BestPattern, CompressionPattern, ConstOracle, FitnessOracle, GaConfig,
    GaOutcome, GenerationStats, LatencyModel, Matrix, SparseIndexSet, SubsetOracle,
};
pub use dynsched::{
    plan_migration, predict_future_activations, smoothed_load, update_activation_window,
    ActivationWindow, Decision, DynScheduler, MigrationEvent, MigrationOutcome, MigrationPlan,
    RebalanceDecision, SchedulerConfig,
};
pub use error::{Error, Result};
pub use load::{
    device_loads, device_loads_with_mode, imbalance_of_device_loads, imbalance_ratio,
    DeviceLoadVector, LoadMatrix, PlacementTensor, ReplicaLoadMode,
};
pub use metrics::{percentile, MetricKind, MetricSeries};
pub use placement::{
    allocate_budget_by_imbalance, brute_force_layer, determine_replicas, generate_placement,
    place_layer, static_expert_placement, BudgetVector, ReplicaCounts, Topology,
};
pub use proxy::{
    advance_lifecycle, defer_and_resort, effective_workload, prefix_match_score,
    schedule_decode_lpt, schedule_prefill, schedule_prefill_round_robin, score_prefill_node,
    DecodeAssignment, DecodeItem, DeferOutcome, LifecycleEvent, NodeRole, NodeState,
    PrefillAssignment, PrefillItem, PrefixTree, ProxyConfig, QueueKind, QueuedRequest, Request,
    RequestPhase,
};
pub use scalar::Scalar;

/// Single-precision aliases of the scalar-generic core types.
pub type LoadMatrixF32 = load::LoadMatrix<f32>;
pub type DeviceLoadVectorF32 = load::DeviceLoadVector<f32>;
pub type MetricSeriesF32 = metrics::MetricSeries<f32>;
pub type MatrixF32 = attnpattern::Matrix<f32>;
pub type LatencyModelF32 = attnpattern::LatencyModel<f32>;
