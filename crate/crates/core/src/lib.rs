//! Offloaded mixture-of-experts inference planning and simulation.
//!
//! Builds per-layer cost profiles, places weights and KV cache across
//! VRAM/DRAM/disk, solves for the number of batches needed to hide weight
//! transfers, emits multi-stream schedules and replays them in a
//! discrete-event simulator.

pub mod error;
pub mod model;
pub mod placement;
pub mod planner;
pub mod prefetch;
pub mod quant;
pub mod schedule;
pub mod sim;
pub mod workload;

pub use error::{Error, Result, TierDeficit};
pub use model::*;
pub use placement::{
    plan_placement, window_advance, LayerPlacement, MemoryLedger, PlacementOptions, PlacementPlan,
    Tier, TierBytes,
};
pub use planner::{
    diagnose_full_prefetch, estimate_queue_lengths, make_plan, measured_hot_share, solve_min_n,
    Condition, ConditionTerms, LoadModel, NSolution, PipelinePlan, PlannerOptions, QueueEstimate,
};
pub use prefetch::{
    build_table, predict_hot, Aggregation, CorrelationTable, Fallback, FixedPrefetcher,
    OraclePrefetcher, PrefetchDecision, PrefetchProvider, TablePrefetcher,
};
pub use quant::{
    dequantize, fit_params, quantize, quantized_bytes, QuantConfig, QuantParams, QuantizedTensor,
    Scalar,
};
pub use schedule::{
    build_schedule, validate_schedule, OffloadMode, OpId, OpKind, Rule, Schedule, ScheduleConfig,
    Stream, StreamOp, Variant, Violation,
};
pub use sim::{
    events_csv, memory_csv, prefetch_accuracy_by_layer, simulate, trace_event_json, BandwidthMode,
    BubbleBreakdown, LayerAccuracy, Metrics, SimConfig, SimEvent, SimResult,
};
pub use workload::*;

pub type QuantizedTensorF32 = QuantizedTensor<f32>;
pub type QuantizedTensorF64 = QuantizedTensor<f64>;
pub type QuantParamsF32 = QuantParams<f32>;
pub type QuantParamsF64 = QuantParams<f64>;
