//! Discrete-event replay of a [`Schedule`].
//!
//! Each stream runs its ops in order; an op starts once its stream is free
//! and every dependency has finished. Compute ops and transfers progress in
//! integer work units so shared-link runs stay deterministic.

mod export;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Nanos;
use crate::placement::{MemoryLedger, Tier, TierBytes};
use crate::schedule::{OpId, OpKind, Schedule, Stream};
use crate::workload::ExpertId;

pub use export::{events_csv, memory_csv, trace_event_json};
pub use metrics::{prefetch_accuracy_by_layer, BubbleBreakdown, LayerAccuracy, Metrics};

/// How concurrent host-to-device transfers share the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// Every stream runs at its own full rate.
    #[default]
    Independent,
    /// Active weight, expert and KV loads split the PCIe bandwidth evenly.
    SharedPcie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimConfig {
    pub bandwidth: BandwidthMode,
    /// Fail with [`Error::MemoryInfeasible`] if VRAM use exceeds this.
    pub vram_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub op: OpId,
    pub stream: Stream,
    pub kind: OpKind,
    pub step: usize,
    pub layer: usize,
    pub batch: Option<usize>,
    pub expert: Option<ExpertId>,
    pub start: Nanos,
    pub end: Nanos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// One event per op, indexed by op id.
    pub events: Vec<SimEvent>,
    pub makespan: Nanos,
    pub peak_vram: u64,
    /// VRAM in use after each change, `(time, bytes)`.
    pub vram_timeline: Vec<(Nanos, u64)>,
}

/// Work units per nanosecond at full rate; divisible by every possible
/// number of concurrent host-to-device streams.
const UNITS: u64 = 12;

pub fn simulate(schedule: &Schedule, cfg: &SimConfig) -> Result<SimResult> {
    let ops = &schedule.ops;
    let n = ops.len();
    for o in ops {
        if let Some(&d) = o.deps.iter().chain(&o.frees).find(|&&d| d >= n) {
            return Err(Error::Validation(format!(
                "op {} references missing op {d}",
                o.id
            )));
        }
    }
    let mut queues: Vec<Vec<OpId>> = vec![Vec::new(); Stream::ALL.len()];
    for o in ops {
        queues[o.stream.index()].push(o.id);
    }
    let mut head = vec![0usize; queues.len()];
    let mut busy = vec![false; queues.len()];
    let mut start: Vec<Option<Nanos>> = vec![None; n];
    let mut end: Vec<Option<Nanos>> = vec![None; n];
    // (op, remaining work units)
    let mut running: Vec<(OpId, u64)> = Vec::new();
    let mut finished = 0usize;
    let mut now: Nanos = 0;

    loop {
        // Start everything that can start now; zero-length ops finish at once
        // and may release further ops at the same instant.
        let mut progressed = true;
        while progressed {
            progressed = false;
            for s in 0..queues.len() {
                while !busy[s] && head[s] < queues[s].len() {
                    let id = queues[s][head[s]];
                    if !ops[id].deps.iter().all(|&d| end[d].is_some()) {
                        break;
                    }
                    head[s] += 1;
                    start[id] = Some(now);
                    progressed = true;
                    if ops[id].duration == 0 {
                        end[id] = Some(now);
                        finished += 1;
                    } else {
                        busy[s] = true;
                        running.push((id, ops[id].duration * UNITS));
                    }
                }
            }
        }
        if running.is_empty() {
            if finished == n {
                break;
            }
            let waiting: Vec<OpId> = (0..queues.len())
                .filter(|&s| head[s] < queues[s].len())
                .map(|s| queues[s][head[s]])
                .collect();
            return Err(Error::Deadlock(waiting));
        }
        let shared = match cfg.bandwidth {
            BandwidthMode::Independent => 1,
            BandwidthMode::SharedPcie => running
                .iter()
                .filter(|r| ops[r.0].stream.is_h2d())
                .count()
                .max(1) as u64,
        };
        let rate = |id: OpId| {
            if cfg.bandwidth == BandwidthMode::SharedPcie && ops[id].stream.is_h2d() {
                UNITS / shared
            } else {
                UNITS
            }
        };
        let dt = running
            .iter()
            .map(|&(id, rem)| rem.div_ceil(rate(id)))
            .min()
            .expect("running is not empty");
        now += dt;
        running.retain_mut(|(id, rem)| {
            *rem = rem.saturating_sub(dt * rate(*id));
            if *rem == 0 {
                end[*id] = Some(now);
                busy[ops[*id].stream.index()] = false;
                finished += 1;
                false
            } else {
                true
            }
        });
    }

    let events: Vec<SimEvent> = ops
        .iter()
        .map(|o| SimEvent {
            op: o.id,
            stream: o.stream,
            kind: o.kind,
            step: o.step,
            layer: o.layer,
            batch: o.batch,
            expert: o.expert,
            start: start[o.id].expect("every op ran"),
            end: end[o.id].expect("every op ran"),
        })
        .collect();
    let makespan = events.iter().map(|e| e.end).max().unwrap_or(0);
    let (peak_vram, vram_timeline) = replay_memory(schedule, &events, cfg.vram_budget)?;
    Ok(SimResult {
        events,
        makespan,
        peak_vram,
        vram_timeline,
    })
}

/// Applies allocations at op start and releases at the releasing op's end,
/// releases first on ties.
fn replay_memory(
    schedule: &Schedule,
    events: &[SimEvent],
    budget: Option<u64>,
) -> Result<(u64, Vec<(Nanos, u64)>)> {
    // (time, 0 = release / 1 = allocate, op, released op)
    let mut changes: Vec<(Nanos, u8, OpId, Option<OpId>)> = Vec::new();
    for o in &schedule.ops {
        if o.vram_alloc > 0 {
            changes.push((events[o.id].start, 1, o.id, None));
        }
        for &t in &o.frees {
            changes.push((events[o.id].end, 0, o.id, Some(t)));
        }
    }
    changes.sort_unstable();
    let mut ledger = MemoryLedger::new(TierBytes {
        vram: budget.unwrap_or(u64::MAX),
        dram: u64::MAX,
        disk: u64::MAX,
    });
    const BASE: u64 = u64::MAX;
    ledger.alloc(BASE, Tier::Vram, schedule.vram_base)?;
    let mut timeline = vec![(0, ledger.used(Tier::Vram))];
    for (time, _, op, target) in changes {
        match target {
            Some(t) => ledger.free(t as u64)?,
            None => ledger.alloc(op as u64, Tier::Vram, schedule.ops[op].vram_alloc)?,
        }
        timeline.push((time, ledger.used(Tier::Vram)));
    }
    Ok((ledger.peak(Tier::Vram), timeline))
}
