//! Output files and their readers.
//!
//! Per run point: `metrics.json`, `timeline.json` (trace-event format),
//! `memory.csv` and `accuracy.csv`. Per experiment: `comparison.csv` or
//! `sweep.csv` with one row per point.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use moepipe::{
    memory_csv, nanos_to_secs, trace_event_json, LayerAccuracy, Metrics, Nanos, Variant,
};
use serde::{Deserialize, Serialize};

use crate::runner::PointOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub variant: Variant,
    pub n: usize,
    pub k: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub n: usize,
    pub k: usize,
    pub throughput_tok_s: f64,
    pub makespan_s: f64,
    pub compute_busy_s: f64,
    pub bubble_fraction: f64,
    pub peak_vram_bytes: u64,
    pub participation: Option<f64>,
}

impl ComparisonRow {
    pub fn of(p: &PointOutput, k: usize) -> Self {
        let m = &p.metrics;
        ComparisonRow {
            variant: p.variant,
            n: p.n,
            k,
            throughput_tok_s: m.throughput,
            makespan_s: nanos_to_secs(m.makespan_ns),
            compute_busy_s: nanos_to_secs(m.compute_busy_ns),
            bubble_fraction: m.bubble_fraction,
            peak_vram_bytes: m.peak_vram,
            participation: m.prefetch_participation,
        }
    }
}

/// One complete event read back from a timeline file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimelineEvent {
    pub op: usize,
    pub stream: String,
    pub kind: String,
    pub start: Nanos,
    pub end: Nanos,
}

#[derive(Deserialize)]
struct RawTimeline {
    #[serde(rename = "traceEvents")]
    trace_events: Vec<RawEvent>,
}

#[derive(Deserialize)]
struct RawEvent {
    name: String,
    cat: String,
    ts: f64,
    dur: f64,
    args: RawArgs,
}

#[derive(Deserialize)]
struct RawArgs {
    op: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct MemoryRow {
    time_ns: Nanos,
    vram_bytes: u64,
}

pub fn point_dir(root: &Path, p: &PointOutput, sweep: bool) -> PathBuf {
    if sweep {
        root.join(format!("n{:03}-{}", p.n, p.variant.name()))
    } else {
        root.join(p.variant.name())
    }
}

pub fn write_point(dir: &Path, p: &PointOutput, k: usize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let m = MetricsFile {
        variant: p.variant,
        n: p.n,
        k,
        metrics: p.metrics.clone(),
    };
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&m)? + "\n",
    )?;
    fs::write(dir.join("timeline.json"), trace_event_json(&p.result)?)?;
    fs::write(dir.join("memory.csv"), memory_csv(&p.result))?;
    write_rows(&dir.join("accuracy.csv"), &p.accuracy)?;
    Ok(())
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_metrics(path: &Path) -> Result<MetricsFile> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_comparison(path: &Path) -> Result<Vec<ComparisonRow>> {
    read_rows(path)
}

pub fn read_accuracy(path: &Path) -> Result<Vec<LayerAccuracy>> {
    read_rows(path)
}

pub fn read_memory(path: &Path) -> Result<Vec<(Nanos, u64)>> {
    let rows: Vec<MemoryRow> = read_rows(path)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.time_ns, r.vram_bytes))
        .collect())
}

pub fn read_timeline(path: &Path) -> Result<Vec<TimelineEvent>> {
    let raw: RawTimeline = serde_json::from_str(&fs::read_to_string(path)?)?;
    // timestamps are microseconds with nanosecond fractions
    let ns = |us: f64| (us * 1e3).round() as Nanos;
    Ok(raw
        .trace_events
        .into_iter()
        .map(|e| TimelineEvent {
            op: e.args.op,
            stream: e.cat,
            kind: e.name,
            start: ns(e.ts),
            end: ns(e.ts) + ns(e.dur),
        })
        .collect())
}
