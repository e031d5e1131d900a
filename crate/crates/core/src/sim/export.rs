use std::fmt::Write as _;

use serde::Serialize;

use super::SimResult;
use crate::error::Result;

#[derive(Serialize)]
struct TraceEvent<'a> {
    name: &'a str,
    cat: &'a str,
    ph: &'a str,
    ts: f64,
    dur: f64,
    pid: u32,
    tid: usize,
    args: Args,
}

#[derive(Serialize)]
struct Args {
    op: usize,
    step: usize,
    layer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expert: Option<u16>,
}

#[derive(Serialize)]
struct TraceFile<'a> {
    #[serde(rename = "traceEvents")]
    trace_events: Vec<TraceEvent<'a>>,
    #[serde(rename = "displayTimeUnit")]
    display_time_unit: &'a str,
}

/// Chrome trace-event JSON, one complete event per op, timestamps in µs.
pub fn trace_event_json(result: &SimResult) -> Result<String> {
    let file = TraceFile {
        trace_events: result
            .events
            .iter()
            .map(|e| TraceEvent {
                name: e.kind.name(),
                cat: e.stream.name(),
                ph: "X",
                ts: e.start as f64 / 1e3,
                dur: (e.end - e.start) as f64 / 1e3,
                pid: 0,
                tid: e.stream.index(),
                args: Args {
                    op: e.op,
                    step: e.step,
                    layer: e.layer,
                    batch: e.batch,
                    expert: e.expert,
                },
            })
            .collect(),
        display_time_unit: "ms",
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn events_csv(result: &SimResult) -> String {
    let mut s = String::from("op,stream,kind,step,layer,batch,expert,start_ns,end_ns\n");
    let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
    for e in &result.events {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            e.op,
            e.stream.name(),
            e.kind.name(),
            e.step,
            e.layer,
            opt(e.batch),
            opt(e.expert.map(usize::from)),
            e.start,
            e.end
        );
    }
    s
}

pub fn memory_csv(result: &SimResult) -> String {
    let mut s = String::from("time_ns,vram_bytes\n");
    for (t, b) in &result.vram_timeline {
        let _ = writeln!(s, "{t},{b}");
    }
    s
}
