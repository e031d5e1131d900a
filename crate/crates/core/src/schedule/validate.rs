use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::Serialize;

use super::{OpId, OpKind, Schedule, Stream};
use crate::model::TensorKind;
use crate::workload::{expert_load, ActivationTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DanglingDependency,
    Cycle,
    ComputeBeforeLoad,
    DoubleLoad,
    OffloadBeforeCompute,
    BadFree,
    Leak,
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: Rule,
    pub op: Option<OpId>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Some(op) => write!(f, "{:?} at op {op}: {}", self.rule, self.detail),
            None => write!(f, "{:?}: {}", self.rule, self.detail),
        }
    }
}

struct Checker<'a> {
    s: &'a Schedule,
    out: Vec<Violation>,
    /// Previous op on the same stream.
    stream_prev: Vec<Option<OpId>>,
}

impl Checker<'_> {
    fn flag(&mut self, rule: Rule, op: Option<OpId>, detail: impl Into<String>) {
        self.out.push(Violation {
            rule,
            op,
            detail: detail.into(),
        });
    }

    /// True if `target` finishes before `from` may start.
    fn precedes(&self, target: OpId, from: OpId) -> bool {
        let ops = &self.s.ops;
        if ops[target].stream == ops[from].stream {
            return target < from;
        }
        let mut seen = vec![false; ops.len()];
        let mut queue = VecDeque::from([from]);
        while let Some(x) = queue.pop_front() {
            let preds = ops[x].deps.iter().copied().chain(self.stream_prev[x]);
            for p in preds {
                if p == target {
                    return true;
                }
                if p < ops.len() && !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        false
    }
}

/// Checks structural soundness of a schedule against the routing trace it
/// was built for. Returns every violation found.
pub fn validate_schedule(s: &Schedule, trace: &ActivationTrace) -> Vec<Violation> {
    let n = s.ops.len();
    let mut last_on = [None; Stream::ALL.len()];
    let mut stream_prev = vec![None; n];
    for (i, o) in s.ops.iter().enumerate() {
        stream_prev[i] = last_on[o.stream.index()];
        last_on[o.stream.index()] = Some(i);
    }
    let mut c = Checker {
        s,
        out: Vec::new(),
        stream_prev,
    };

    for (i, o) in s.ops.iter().enumerate() {
        if o.id != i {
            c.flag(
                Rule::DanglingDependency,
                Some(i),
                format!("op stored at {i} has id {}", o.id),
            );
        }
        for &d in o.deps.iter().chain(&o.frees) {
            if d >= n || d == i {
                c.flag(
                    Rule::DanglingDependency,
                    Some(i),
                    format!("reference to op {d}"),
                );
            }
        }
    }
    if !c.out.is_empty() {
        return c.out;
    }

    // Kahn over explicit deps plus stream order.
    let mut indeg = vec![0usize; n];
    let mut succ: Vec<Vec<OpId>> = vec![Vec::new(); n];
    for (i, o) in s.ops.iter().enumerate() {
        for &p in o.deps.iter().chain(c.stream_prev[i].as_ref()) {
            succ[p].push(i);
            indeg[i] += 1;
        }
    }
    let mut ready: VecDeque<OpId> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut done = 0;
    while let Some(x) = ready.pop_front() {
        done += 1;
        for &y in &succ[x] {
            indeg[y] -= 1;
            if indeg[y] == 0 {
                ready.push_back(y);
            }
        }
    }
    if done < n {
        let stuck: Vec<OpId> = (0..n).filter(|&i| indeg[i] > 0).take(8).collect();
        c.flag(
            Rule::Cycle,
            stuck.first().copied(),
            format!("ops never become ready: {stuck:?}"),
        );
        return c.out;
    }

    // Loads per (step, layer).
    let mut weight_loads: HashMap<(usize, usize, TensorKind), Vec<OpId>> = HashMap::new();
    let mut expert_loads: HashMap<(usize, usize, u16), Vec<OpId>> = HashMap::new();
    let mut cache_loads: HashMap<(usize, usize, usize), Vec<OpId>> = HashMap::new();
    for o in &s.ops {
        match o.kind {
            OpKind::LoadWeights => {
                if let Some(t) = o.tensor {
                    weight_loads
                        .entry((o.step, o.layer, t))
                        .or_default()
                        .push(o.id);
                }
            }
            OpKind::LoadExpert => {
                if let Some(e) = o.expert {
                    expert_loads
                        .entry((o.step, o.layer, e))
                        .or_default()
                        .push(o.id);
                }
            }
            OpKind::LoadCache => {
                if let Some(b) = o.batch {
                    cache_loads
                        .entry((o.step, o.layer, b))
                        .or_default()
                        .push(o.id);
                }
            }
            _ => {}
        }
    }
    let mut doubles: Vec<(OpId, String)> = Vec::new();
    for (k, v) in &weight_loads {
        if v.len() > 1 {
            doubles.push((
                v[1],
                format!(
                    "{:?} of step {} layer {} loaded {} times",
                    k.2,
                    k.0,
                    k.1,
                    v.len()
                ),
            ));
        }
    }
    for (k, v) in &expert_loads {
        if v.len() > 1 {
            doubles.push((
                v[1],
                format!(
                    "expert {} of step {} layer {} loaded {} times",
                    k.2,
                    k.0,
                    k.1,
                    v.len()
                ),
            ));
        }
    }
    for (k, v) in &cache_loads {
        if v.len() > 1 {
            doubles.push((
                v[1],
                format!(
                    "KV of batch {} step {} layer {} loaded {} times",
                    k.2,
                    k.0,
                    k.1,
                    v.len()
                ),
            ));
        }
    }
    doubles.sort();
    for (op, d) in doubles {
        c.flag(Rule::DoubleLoad, Some(op), d);
    }

    // Every compute depends directly on the loads that feed it.
    for o in &s.ops {
        let mut needs: Vec<OpId> = Vec::new();
        let wl = |t| {
            weight_loads
                .get(&(o.step, o.layer, t))
                .into_iter()
                .flatten()
                .copied()
        };
        match o.kind {
            OpKind::ComputeAttention => {
                needs.extend(wl(TensorKind::Attention));
                if let Some(b) = o.batch {
                    needs.extend(cache_loads.get(&(o.step, o.layer, b)).into_iter().flatten());
                }
            }
            OpKind::ComputeGate => {
                needs.extend(wl(TensorKind::Gate));
                needs.extend(wl(TensorKind::MoeLayer));
            }
            OpKind::ComputeExpert => {
                needs.extend(wl(TensorKind::MoeLayer));
                if let Some(e) = o.expert {
                    needs.extend(
                        expert_loads
                            .get(&(o.step, o.layer, e))
                            .into_iter()
                            .flatten(),
                    );
                }
            }
            _ => {}
        }
        for l in needs {
            if !o.deps.contains(&l) {
                c.flag(
                    Rule::ComputeBeforeLoad,
                    Some(o.id),
                    format!("{} does not wait for load op {l}", o.kind.name()),
                );
            }
        }
    }

    // Offloads release a loaded expert after all of its computes.
    let mut computes_of: HashMap<(usize, usize, u16), Vec<OpId>> = HashMap::new();
    for o in s.ops.iter().filter(|o| o.kind == OpKind::ComputeExpert) {
        if let Some(e) = o.expert {
            computes_of
                .entry((o.step, o.layer, e))
                .or_default()
                .push(o.id);
        }
    }
    for o in s.ops.iter().filter(|o| o.kind == OpKind::OffloadExpert) {
        let Some(e) = o.expert else {
            c.flag(
                Rule::OffloadBeforeCompute,
                Some(o.id),
                "offload without expert",
            );
            continue;
        };
        let key = (o.step, o.layer, e);
        let frees_own = o
            .frees
            .iter()
            .any(|&f| expert_loads.get(&key).is_some_and(|v| v.contains(&f)));
        if !frees_own {
            c.flag(
                Rule::OffloadBeforeCompute,
                Some(o.id),
                format!("offload of expert {e} does not release its load"),
            );
        }
        let late: Vec<OpId> = computes_of
            .get(&key)
            .into_iter()
            .flatten()
            .copied()
            .filter(|&x| !c.precedes(x, o.id))
            .collect();
        if !late.is_empty() {
            c.flag(
                Rule::OffloadBeforeCompute,
                Some(o.id),
                format!("expert {e} offloaded before computes {late:?}"),
            );
        }
    }

    // Allocation lifetimes.
    let mut freed_by: Vec<Option<OpId>> = vec![None; n];
    let mut consumers: Vec<Vec<OpId>> = vec![Vec::new(); n];
    for o in s.ops.iter().filter(|o| o.kind.is_compute()) {
        for &d in &o.deps {
            consumers[d].push(o.id);
        }
    }
    for o in &s.ops {
        for &t in &o.frees {
            if s.ops[t].vram_alloc == 0 {
                c.flag(
                    Rule::BadFree,
                    Some(o.id),
                    format!("op {t} holds no allocation"),
                );
            } else if let Some(prev) = freed_by[t] {
                c.flag(
                    Rule::BadFree,
                    Some(o.id),
                    format!("op {t} already released by op {prev}"),
                );
            } else {
                freed_by[t] = Some(o.id);
            }
        }
    }
    for t in 0..n {
        let Some(f) = freed_by[t] else {
            if s.ops[t].vram_alloc > 0 {
                c.flag(
                    Rule::Leak,
                    Some(t),
                    format!("{} allocation never released", s.ops[t].kind.name()),
                );
            }
            continue;
        };
        let early: Vec<OpId> = consumers[t]
            .iter()
            .copied()
            .filter(|&u| u != f && !c.precedes(u, f))
            .collect();
        if !early.is_empty() {
            c.flag(
                Rule::BadFree,
                Some(f),
                format!("releases op {t} before its users {early:?} finish"),
            );
        }
    }

    coverage(&mut c, trace);
    c.out
}

fn coverage(c: &mut Checker<'_>, trace: &ActivationTrace) {
    let s = c.s;
    if trace.n_steps() != s.n_steps
        || trace.n_layers() != s.n_layers
        || trace.n_batches() != s.n_batches
    {
        c.flag(
            Rule::Coverage,
            None,
            "schedule dimensions differ from the trace",
        );
        return;
    }
    let passes = s.n_steps * s.n_layers;
    let nb = s.n_batches;
    let ne = trace.n_experts();
    let mut attn = vec![0u32; passes * nb];
    let mut gate = vec![0u32; passes * nb];
    let mut tokens = vec![0u64; passes * ne];
    for o in &s.ops {
        let p = o.step * s.n_layers + o.layer;
        if p >= passes {
            c.flag(Rule::Coverage, Some(o.id), "op outside the run");
            continue;
        }
        match (o.kind, o.batch, o.expert) {
            (OpKind::ComputeAttention, Some(b), _) if b < nb => attn[p * nb + b] += 1,
            (OpKind::ComputeGate, Some(b), _) if b < nb => gate[p * nb + b] += 1,
            (OpKind::ComputeExpert, _, Some(e)) if (e as usize) < ne => {
                if o.tokens == 0 {
                    c.flag(Rule::Coverage, Some(o.id), "expert compute with no tokens");
                }
                tokens[p * ne + e as usize] += o.tokens;
            }
            (k, _, _) if k.is_compute() => c.flag(
                Rule::Coverage,
                Some(o.id),
                "compute op with bad batch or expert",
            ),
            _ => {}
        }
    }
    for p in 0..passes {
        let (step, layer) = (p / s.n_layers, p % s.n_layers);
        for b in 0..nb {
            if attn[p * nb + b] != 1 || gate[p * nb + b] != 1 {
                c.flag(
                    Rule::Coverage,
                    None,
                    format!(
                        "step {step} layer {layer} batch {b}: {} attention, {} gate computes",
                        attn[p * nb + b],
                        gate[p * nb + b]
                    ),
                );
            }
        }
        let Ok(load) = expert_load(trace, step, layer) else {
            continue;
        };
        for e in 0..ne {
            if tokens[p * ne + e] != load.counts[e] {
                c.flag(
                    Rule::Coverage,
                    None,
                    format!(
                        "step {step} layer {layer} expert {e}: computed {} tokens, routed {}",
                        tokens[p * ne + e],
                        load.counts[e]
                    ),
                );
            }
        }
    }
}
