//! Minimum batch count that hides weight transfers behind computation.
//!
//! Every condition has the form `n * a >= c` over one layer's timings, where
//! `a` is per-batch compute time overlapping a transfer and `c` is the
//! transfer time it has to cover. Conditions are checked per layer and the
//! largest `n` wins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_cost_profile, CostProfile, HardwareProfile, ModelSpec, Nanos};
use crate::placement::{plan_placement, PlacementOptions, PlacementPlan};
use crate::workload::{expert_load, ActivationTrace, BatchGroupConfig};

/// Assumption about how routed tokens split between prefetched and
/// on-demand experts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LoadModel {
    /// Every routed token lands on a prefetched expert; nothing queues.
    Best,
    /// Fraction of routed tokens served by prefetched experts.
    Measured { hot_share: f64 },
    /// Prefetched experts receive no tokens.
    Worst,
}

impl LoadModel {
    fn hot_share(self) -> f64 {
        match self {
            LoadModel::Best => 1.0,
            LoadModel::Measured { hot_share } => hot_share,
            LoadModel::Worst => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Attention of all batches covers the gate load.
    GateUnderAttention,
    /// Attention and gates cover the gate plus `K` hot experts.
    HotUnderAttentionGate,
    /// Adding the hot-expert compute covers the first cold expert.
    FirstColdUnderHot,
    /// The whole layer's compute covers all of its loads plus the next
    /// attention block.
    LayerUnderCompute,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::GateUnderAttention,
        Condition::HotUnderAttentionGate,
        Condition::FirstColdUnderHot,
        Condition::LayerUnderCompute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::GateUnderAttention => "gate_under_attention",
            Condition::HotUnderAttentionGate => "hot_under_attention_gate",
            Condition::FirstColdUnderHot => "first_cold_under_hot",
            Condition::LayerUnderCompute => "layer_under_compute",
        }
    }
}

/// One condition as `n * per_batch >= cover`, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionTerms {
    pub condition: Condition,
    pub layer: usize,
    pub per_batch: Nanos,
    pub cover: Nanos,
}

impl ConditionTerms {
    pub fn holds(&self, n: usize) -> bool {
        n as u128 * self.per_batch as u128 >= self.cover as u128
    }

    /// Smallest `n >= 1` that satisfies the condition, `None` if no `n` does.
    pub fn min_n(&self) -> Option<usize> {
        if self.cover == 0 {
            return Some(1);
        }
        if self.per_batch == 0 {
            return None;
        }
        Some(self.cover.div_ceil(self.per_batch).max(1) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NSolution {
    pub n: usize,
    /// Condition that forced `n` (first in order on ties).
    pub binding: Condition,
    pub binding_layer: usize,
    pub feasible: bool,
    /// Unhidden transfer time of the binding condition when infeasible.
    pub residual_gap: Nanos,
    pub terms: Vec<ConditionTerms>,
}

/// Per-batch compute of the tokens served by hot (`share`) experts.
fn routed_compute(cost: &CostProfile, top_k: usize, share: f64) -> Nanos {
    let tokens = top_k as f64 * cost.tokens_per_batch as f64;
    (share * tokens * cost.t_c_e_per_token as f64).round() as Nanos
}

/// Condition terms for one layer. `k` is the number of prefetched experts
/// and `queue_len` the cold experts expected after them.
pub fn condition_terms(
    cost: &CostProfile,
    k: usize,
    top_k: usize,
    queue_len: usize,
    model: LoadModel,
    layer: usize,
) -> Vec<ConditionTerms> {
    let share = model.hot_share();
    let hot = routed_compute(cost, top_k, share);
    let cold = routed_compute(cost, top_k, 1.0 - share);
    let queue = if model == LoadModel::Best {
        0
    } else {
        queue_len as u64
    };
    let k = k as u64;
    let ag = cost.t_c_a + cost.t_c_g;
    let mut terms = vec![
        ConditionTerms {
            condition: Condition::GateUnderAttention,
            layer,
            per_batch: cost.t_c_a,
            cover: cost.t_io_g,
        },
        ConditionTerms {
            condition: Condition::HotUnderAttentionGate,
            layer,
            per_batch: ag,
            cover: cost.t_io_g + k * cost.t_io_e,
        },
    ];
    // With nothing queued there is no first cold expert to cover.
    if model != LoadModel::Best {
        terms.push(ConditionTerms {
            condition: Condition::FirstColdUnderHot,
            layer,
            per_batch: ag + hot,
            cover: cost.t_io_g + (k + 1) * cost.t_io_e,
        });
    }
    terms.push(ConditionTerms {
        condition: Condition::LayerUnderCompute,
        layer,
        per_batch: ag + hot + cold,
        cover: cost.t_io_g + (k + queue) * cost.t_io_e + cost.t_io_a,
    });
    terms
}

/// Smallest batch count satisfying every condition on every layer.
pub fn solve_min_n(
    cost: &CostProfile,
    k: usize,
    top_k: usize,
    queue_lengths: &[usize],
    model: LoadModel,
) -> Result<NSolution> {
    if let LoadModel::Measured { hot_share } = model {
        if !(0.0..=1.0).contains(&hot_share) {
            return Err(Error::Validation(format!(
                "hot_share {hot_share} outside [0, 1]"
            )));
        }
    }
    if queue_lengths.is_empty() {
        return Err(Error::Validation(
            "queue_lengths must cover at least one layer".into(),
        ));
    }
    let terms: Vec<ConditionTerms> = queue_lengths
        .iter()
        .enumerate()
        .flat_map(|(layer, &q)| condition_terms(cost, k, top_k, q, model, layer))
        .collect();
    let mut best: Option<(usize, &ConditionTerms)> = None;
    let mut infeasible: Option<&ConditionTerms> = None;
    for t in &terms {
        match t.min_n() {
            Some(n) => {
                if best.is_none_or(|(b, _)| n > b) {
                    best = Some((n, t));
                }
            }
            None => {
                if infeasible.is_none_or(|w| t.cover > w.cover) {
                    infeasible = Some(t);
                }
            }
        }
    }
    if let Some(t) = infeasible {
        return Ok(NSolution {
            n: best.map_or(1, |(n, _)| n),
            binding: t.condition,
            binding_layer: t.layer,
            feasible: false,
            residual_gap: t.cover,
            terms: terms.clone(),
        });
    }
    let (n, t) = best.expect("at least one condition");
    Ok(NSolution {
        n,
        binding: t.condition,
        binding_layer: t.layer,
        feasible: true,
        residual_gap: 0,
        terms: terms.clone(),
    })
}

/// Whether attention alone hides a full-layer or a hot-only prefetch at `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullPrefetchDiagnosis {
    pub n: usize,
    pub full_layer_hidden: bool,
    pub hot_only_hidden: bool,
    pub n_for_full_layer: Option<usize>,
    pub n_for_hot_only: Option<usize>,
}

pub fn diagnose_full_prefetch(
    cost: &CostProfile,
    n_experts: usize,
    k: usize,
    n: usize,
) -> FullPrefetchDiagnosis {
    let full = ConditionTerms {
        condition: Condition::GateUnderAttention,
        layer: 0,
        per_batch: cost.t_c_a,
        cover: cost.t_io_g + n_experts as u64 * cost.t_io_e,
    };
    let hot = ConditionTerms {
        cover: cost.t_io_g + k as u64 * cost.t_io_e,
        ..full
    };
    FullPrefetchDiagnosis {
        n,
        full_layer_hidden: full.holds(n),
        hot_only_hidden: hot.holds(n),
        n_for_full_layer: full.min_n(),
        n_for_hot_only: hot.min_n(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEstimate {
    pub per_layer: Vec<usize>,
    /// Layers with no observations, given the worst-case length.
    pub defaulted: Vec<usize>,
}

/// Expected cold-queue length per layer: mean distinct active experts per
/// step minus `k`, rounded up and clamped to `[0, n_experts - k]`.
pub fn estimate_queue_lengths(
    trace: Option<&ActivationTrace>,
    n_layers: usize,
    n_experts: usize,
    k: usize,
) -> Result<QueueEstimate> {
    let cap = n_experts.saturating_sub(k);
    let mut per_layer = vec![cap; n_layers];
    let mut defaulted = Vec::new();
    for (layer, slot) in per_layer.iter_mut().enumerate() {
        let Some(t) = trace.filter(|t| layer < t.n_layers() && t.n_steps() > 0) else {
            defaulted.push(layer);
            continue;
        };
        let mut sum = 0usize;
        for step in 0..t.n_steps() {
            sum += expert_load(t, step, layer)?.distinct_active();
        }
        let mean = sum as f64 / t.n_steps() as f64;
        *slot = ((mean - k as f64).ceil().max(0.0) as usize).min(cap);
    }
    Ok(QueueEstimate {
        per_layer,
        defaulted,
    })
}

/// Share of routed tokens that land on each layer's `k` most loaded experts,
/// pooled over the whole trace.
pub fn measured_hot_share(trace: &ActivationTrace, k: usize) -> Result<f64> {
    let (mut hot, mut total) = (0u64, 0u64);
    for step in 0..trace.n_steps() {
        for layer in 0..trace.n_layers() {
            let load = expert_load(trace, step, layer)?;
            hot += load
                .ranked()
                .iter()
                .take(k)
                .map(|&e| load.counts[e as usize])
                .sum::<u64>();
            total += load.total();
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        hot as f64 / total as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerOptions {
    pub k: usize,
    pub load_model: LoadModel,
    pub placement: PlacementOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub n_batches: usize,
    pub batch_size: usize,
    pub solution: NSolution,
    pub cost: CostProfile,
    pub queue: QueueEstimate,
    pub placement: PlacementPlan,
    pub warnings: Vec<String>,
}

/// Solves for `n`, then lowers it until the placement fits memory.
/// `group.n_batches` is ignored.
pub fn make_plan(
    spec: &ModelSpec,
    hw: &HardwareProfile,
    group: &BatchGroupConfig,
    trace: Option<&ActivationTrace>,
    opts: &PlannerOptions,
) -> Result<PipelinePlan> {
    if opts.k == 0 || opts.k > spec.n_experts_per_layer {
        return Err(Error::Validation(format!(
            "K must be in 1..={}, got {}",
            spec.n_experts_per_layer, opts.k
        )));
    }
    let quant = opts.placement.quant;
    let cost = build_cost_profile(spec, hw, group.batch_size, quant.as_ref());
    let queue = estimate_queue_lengths(trace, spec.n_layers, spec.n_experts_per_layer, opts.k)?;
    let solution = solve_min_n(&cost, opts.k, spec.top_k, &queue.per_layer, opts.load_model)?;
    let mut warnings = Vec::new();
    if !solution.feasible {
        warnings.push(format!(
            "{} cannot be met at any batch count (gap {} ns)",
            solution.binding.name(),
            solution.residual_gap
        ));
    }
    if !queue.defaulted.is_empty() {
        warnings.push(format!(
            "no routing data for {} layer(s); assumed worst-case queue length",
            queue.defaulted.len()
        ));
    }
    let mut n = solution.n;
    let mut last_err = None;
    while n >= 1 {
        let g = BatchGroupConfig {
            n_batches: n,
            ..*group
        };
        match plan_placement(spec, hw, &g, &opts.placement) {
            Ok(placement) => {
                if n < solution.n {
                    warnings.push(format!(
                        "lowered batch count from {} to {n} to fit memory",
                        solution.n
                    ));
                }
                return Ok(PipelinePlan {
                    n_batches: n,
                    batch_size: group.batch_size,
                    solution,
                    cost,
                    queue,
                    placement,
                    warnings,
                });
            }
            Err(e @ Error::MemoryInfeasible(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
        n -= 1;
    }
    Err(last_err.expect("tried at least n = 1"))
}
