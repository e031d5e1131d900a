use serde::{Deserialize, Serialize};

use super::SimResult;
use crate::error::Result;
use crate::model::{nanos_to_secs, Nanos};
use crate::schedule::{OpKind, Schedule, Stream};
use crate::workload::{expert_load, ActivationTrace};

/// Idle compute time split by what the compute stream was waiting between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BubbleBreakdown {
    /// Before the first compute.
    pub startup: Nanos,
    /// Between the last gate of a layer and its first expert.
    pub attn_to_moe: Nanos,
    /// Between the last expert of a layer and the next attention.
    pub moe_to_attn: Nanos,
    /// Between two expert computes.
    pub intra_moe: Nanos,
    /// Between attention or gate computes of one layer.
    pub intra_attention: Nanos,
    /// After the last compute.
    pub tail: Nanos,
}

impl BubbleBreakdown {
    pub fn total(&self) -> Nanos {
        self.startup
            + self.attn_to_moe
            + self.moe_to_attn
            + self.intra_moe
            + self.intra_attention
            + self.tail
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub makespan_ns: Nanos,
    pub compute_busy_ns: Nanos,
    pub bubble_ns: Nanos,
    pub bubble_fraction: f64,
    pub bubbles: BubbleBreakdown,
    /// Generated tokens per second.
    pub throughput: f64,
    pub peak_vram: u64,
    /// Fraction of prefetched experts that received tokens.
    pub prefetch_participation: Option<f64>,
    /// Fraction of prefetched experts that were among the true top-K.
    pub hot_accuracy: Option<f64>,
}

impl Metrics {
    pub fn compute(
        schedule: &Schedule,
        result: &SimResult,
        trace: &ActivationTrace,
    ) -> Result<Self> {
        let compute: Vec<_> = result
            .events
            .iter()
            .filter(|e| e.stream == Stream::Compute && e.kind.is_compute())
            .collect();
        let compute_busy: Nanos = compute.iter().map(|e| e.end - e.start).sum();
        let mut b = BubbleBreakdown::default();
        if let Some(first) = compute.first() {
            b.startup = first.start;
        }
        for w in compute.windows(2) {
            let gap = w[1].start.saturating_sub(w[0].end);
            let slot = match (w[0].kind, w[1].kind) {
                (OpKind::ComputeExpert, OpKind::ComputeExpert) => &mut b.intra_moe,
                (OpKind::ComputeExpert, _) => &mut b.moe_to_attn,
                (_, OpKind::ComputeExpert) => &mut b.attn_to_moe,
                _ => &mut b.intra_attention,
            };
            *slot += gap;
        }
        if let Some(last) = compute.last() {
            b.tail = result.makespan - last.end;
        }
        let g = &trace.meta.group;
        let secs = nanos_to_secs(result.makespan);
        let generated = (g.batch_size * g.n_batches * g.gen_len) as f64;
        let (participation, accuracy) = prefetch_quality(schedule, trace)?;
        Ok(Metrics {
            makespan_ns: result.makespan,
            compute_busy_ns: compute_busy,
            bubble_ns: result.makespan - compute_busy,
            bubble_fraction: if result.makespan > 0 {
                (result.makespan - compute_busy) as f64 / result.makespan as f64
            } else {
                0.0
            },
            bubbles: b,
            throughput: if secs > 0.0 { generated / secs } else { 0.0 },
            peak_vram: result.peak_vram,
            prefetch_participation: participation,
            hot_accuracy: accuracy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracy {
    pub layer: usize,
    pub participation: f64,
    pub hot_accuracy: f64,
}

/// (participated, in true top-K, predicted) per layer.
fn tallies(schedule: &Schedule, trace: &ActivationTrace) -> Result<Vec<(u64, u64, u64)>> {
    let mut per_layer = vec![(0u64, 0u64, 0u64); schedule.n_layers];
    for step in 0..schedule.n_steps {
        for layer in 0..schedule.n_layers {
            let Some(d) = schedule.decision(step, layer) else {
                continue;
            };
            let load = expert_load(trace, step, layer)?;
            let top: Vec<_> = load.ranked().into_iter().take(d.expert_ids.len()).collect();
            let t = &mut per_layer[layer];
            for e in &d.expert_ids {
                t.0 += (load.counts[*e as usize] > 0) as u64;
                t.1 += top.contains(e) as u64;
                t.2 += 1;
            }
        }
    }
    Ok(per_layer)
}

fn prefetch_quality(
    schedule: &Schedule,
    trace: &ActivationTrace,
) -> Result<(Option<f64>, Option<f64>)> {
    let t = tallies(schedule, trace)?;
    let (a, b, n) = t
        .iter()
        .fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    if n == 0 {
        return Ok((None, None));
    }
    Ok((Some(a as f64 / n as f64), Some(b as f64 / n as f64)))
}

pub fn prefetch_accuracy_by_layer(
    schedule: &Schedule,
    trace: &ActivationTrace,
) -> Result<Vec<LayerAccuracy>> {
    Ok(tallies(schedule, trace)?
        .into_iter()
        .enumerate()
        .filter(|(_, t)| t.2 > 0)
        .map(|(layer, (a, b, n))| LayerAccuracy {
            layer,
            participation: a as f64 / n as f64,
            hot_accuracy: b as f64 / n as f64,
        })
        .collect())
}
