//! Multi-stream operation schedules for one batch group's decode run.

mod build;
mod validate;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{Nanos, TensorKind};
use crate::prefetch::PrefetchDecision;
use crate::workload::ExpertId;

pub use build::{build_schedule, ScheduleConfig};
pub use validate::{validate_schedule, Rule, Violation};

pub type OpId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    WeightLoad,
    ExpertLoad,
    CacheLoad,
    CacheStore,
    /// Disk to DRAM staging of window layers.
    DiskStage,
}

impl Stream {
    pub const ALL: [Stream; 6] = [
        Stream::Compute,
        Stream::WeightLoad,
        Stream::ExpertLoad,
        Stream::CacheLoad,
        Stream::CacheStore,
        Stream::DiskStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Compute => "compute",
            Stream::WeightLoad => "weight_load",
            Stream::ExpertLoad => "expert_load",
            Stream::CacheLoad => "cache_load",
            Stream::CacheStore => "cache_store",
            Stream::DiskStage => "disk_stage",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Host-to-device transfers that share the PCIe link.
    pub fn is_h2d(self) -> bool {
        matches!(
            self,
            Stream::WeightLoad | Stream::ExpertLoad | Stream::CacheLoad
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    ComputeAttention,
    ComputeGate,
    ComputeExpert,
    LoadWeights,
    LoadExpert,
    LoadCache,
    StoreCache,
    OffloadExpert,
    StageWindow,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::ComputeAttention => "compute_attention",
            OpKind::ComputeGate => "compute_gate",
            OpKind::ComputeExpert => "compute_expert",
            OpKind::LoadWeights => "load_weights",
            OpKind::LoadExpert => "load_expert",
            OpKind::LoadCache => "load_cache",
            OpKind::StoreCache => "store_cache",
            OpKind::OffloadExpert => "offload_expert",
            OpKind::StageWindow => "stage_window",
        }
    }

    pub fn is_compute(self) -> bool {
        matches!(
            self,
            OpKind::ComputeAttention | OpKind::ComputeGate | OpKind::ComputeExpert
        )
    }

    pub fn is_transfer(self) -> bool {
        matches!(
            self,
            OpKind::LoadWeights
                | OpKind::LoadExpert
                | OpKind::LoadCache
                | OpKind::StoreCache
                | OpKind::StageWindow
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamOp {
    pub id: OpId,
    pub stream: Stream,
    pub kind: OpKind,
    pub step: usize,
    pub layer: usize,
    pub batch: Option<usize>,
    pub expert: Option<ExpertId>,
    /// Weights moved by a `LoadWeights` op.
    pub tensor: Option<TensorKind>,
    pub duration: Nanos,
    pub bytes: u64,
    pub tokens: u64,
    /// Ops that must finish before this one starts.
    pub deps: Vec<OpId>,
    /// VRAM taken when the op starts.
    pub vram_alloc: u64,
    /// Ops whose VRAM allocation is released when this op ends.
    pub frees: Vec<OpId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One batch, whole MoE layer loaded per layer.
    Simple,
    /// `n` batches, whole MoE layer loaded per layer.
    MultibatchFullPrefetch,
    /// Hot experts prefetched, cold ones loaded on demand, experts computed
    /// batch by batch in routing order.
    StrawmanNoReorder,
    /// Hot experts prefetched and computed first across all batches while
    /// cold experts stream in.
    ExpertAware,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Simple,
        Variant::MultibatchFullPrefetch,
        Variant::StrawmanNoReorder,
        Variant::ExpertAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Simple => "simple",
            Variant::MultibatchFullPrefetch => "multibatch_full_prefetch",
            Variant::StrawmanNoReorder => "strawman_no_reorder",
            Variant::ExpertAware => "expert_aware",
        }
    }

    pub fn prefetches_hot(self) -> bool {
        matches!(self, Variant::StrawmanNoReorder | Variant::ExpertAware)
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown variant `{s}`")))
    }
}

/// When experts leave VRAM after computing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadMode {
    /// Right after the expert's last compute.
    #[default]
    Immediate,
    /// After the layer's last expert compute.
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub variant: Variant,
    pub offload: OffloadMode,
    pub n_steps: usize,
    pub n_layers: usize,
    pub n_batches: usize,
    pub batch_size: usize,
    pub k: usize,
    /// VRAM held for the whole run: resident weights, resident KV cache and
    /// activations.
    pub vram_base: u64,
    pub ops: Vec<StreamOp>,
    /// Prefetch decision per (step, layer), row-major; empty for variants
    /// that do not prefetch.
    pub decisions: Vec<PrefetchDecision>,
}

impl Schedule {
    pub fn ops_on(&self, stream: Stream) -> impl Iterator<Item = &StreamOp> {
        self.ops.iter().filter(move |o| o.stream == stream)
    }

    pub fn decision(&self, step: usize, layer: usize) -> Option<&PrefetchDecision> {
        self.decisions.get(step * self.n_layers + layer)
    }

    /// Sum of all compute durations.
    pub fn compute_total(&self) -> Nanos {
        self.ops
            .iter()
            .filter(|o| o.kind.is_compute())
            .map(|o| o.duration)
            .sum()
    }

    /// One line per op, stable across runs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# variant={} offload={:?} steps={} layers={} batches={} k={} vram_base={}",
            self.variant.name(),
            self.offload,
            self.n_steps,
            self.n_layers,
            self.n_batches,
            self.k,
            self.vram_base
        );
        for o in &self.ops {
            let opt = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
            let _ = writeln!(
                s,
                "{} {} {} s={} l={} b={} e={} dur={} bytes={} tokens={} alloc={} deps={:?} frees={:?}",
                o.id,
                o.stream.name(),
                o.kind.name(),
                o.step,
                o.layer,
                opt(o.batch),
                opt(o.expert.map(usize::from)),
                o.duration,
                o.bytes,
                o.tokens,
                o.vram_alloc,
                o.deps,
                o.frees
            );
        }
        s
    }
}
