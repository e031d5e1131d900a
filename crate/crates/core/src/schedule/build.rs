use serde::{Deserialize, Serialize};

use super::{OffloadMode, OpId, OpKind, Schedule, Stream, StreamOp, Variant};
use crate::error::{Error, Result};
use crate::model::{
    compute_nanos, dequant_time, expert_call_nanos, secs_to_nanos, transfer_nanos, HardwareProfile,
    KvPolicy, LayerKind, ModelSpec, Nanos, Route, TensorKind,
};
use crate::placement::{PlacementPlan, Tier};
use crate::prefetch::PrefetchProvider;
use crate::quant::QuantConfig;
use crate::workload::{expert_load, ActivationTrace, ExpertId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub variant: Variant,
    #[serde(default)]
    pub offload: OffloadMode,
    /// Experts prefetched per layer.
    pub k: usize,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub kv_policy: KvPolicy,
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    hw: &'a HardwareProfile,
    placement: &'a PlacementPlan,
    trace: &'a ActivationTrace,
    cfg: &'a ScheduleConfig,
    ops: Vec<StreamOp>,
    /// Window staging op per global layer pass.
    staged: Vec<Option<OpId>>,
    dequant: Nanos,
}

/// Per-pass carry-over: loads issued for the next pass during this one.
#[derive(Default, Clone, Copy)]
struct Carry {
    attention: Option<OpId>,
    cache0: Option<OpId>,
    /// Dependency that cache loads of batches 0 and 1 wait on.
    cache_trigger: Option<OpId>,
    last_compute: Option<OpId>,
}

impl<'a> Builder<'a> {
    fn push(&mut self, stream: Stream, kind: OpKind, step: usize, layer: usize) -> OpId {
        let id = self.ops.len();
        self.ops.push(StreamOp {
            id,
            stream,
            kind,
            step,
            layer,
            batch: None,
            expert: None,
            tensor: None,
            duration: 0,
            bytes: 0,
            tokens: 0,
            deps: Vec::new(),
            vram_alloc: 0,
            frees: Vec::new(),
        });
        id
    }

    fn n_layers(&self) -> usize {
        self.spec.n_layers
    }

    fn pass_index(&self, step: usize, layer: usize) -> usize {
        step * self.n_layers() + layer
    }

    fn load_nanos(&self, tier: Tier, bytes: u64) -> Nanos {
        match tier {
            Tier::Vram => 0,
            Tier::Dram => transfer_nanos(self.hw, bytes, Route::DramToVramPinned),
            Tier::Disk if self.placement.window > 0 => {
                transfer_nanos(self.hw, bytes, Route::DramToVramUnpinned)
            }
            Tier::Disk => {
                transfer_nanos(self.hw, bytes, Route::DiskToDram)
                    + transfer_nanos(self.hw, bytes, Route::DramToVramUnpinned)
            }
        }
    }

    /// Deps a load of `tier` data for `(step, layer)` picks up from staging.
    fn stage_dep(&self, tier: Tier, step: usize, layer: usize) -> Option<OpId> {
        if tier == Tier::Disk {
            self.staged[self.pass_index(step, layer)]
        } else {
            None
        }
    }

    fn load(
        &mut self,
        stream: Stream,
        kind: OpKind,
        step: usize,
        layer: usize,
        parts: &[(Tier, u64)],
        deps: &[Option<OpId>],
    ) -> Option<OpId> {
        let parts: Vec<(Tier, u64)> = parts
            .iter()
            .copied()
            .filter(|(t, _)| *t != Tier::Vram)
            .collect();
        if parts.is_empty() {
            return None;
        }
        let bytes: u64 = parts.iter().map(|p| p.1).sum();
        let duration = parts.iter().map(|&(t, b)| self.load_nanos(t, b)).sum();
        let stage = parts
            .iter()
            .find_map(|&(t, _)| self.stage_dep(t, step, layer));
        let id = self.push(stream, kind, step, layer);
        let op = &mut self.ops[id];
        op.bytes = bytes;
        op.duration = duration;
        op.vram_alloc = bytes;
        op.deps = deps.iter().flatten().copied().chain(stage).collect();
        Some(id)
    }

    fn load_attention(&mut self, step: usize, layer: usize, deps: &[Option<OpId>]) -> Option<OpId> {
        let tier = self.placement.layers[layer].attention;
        let id = self.load(
            Stream::WeightLoad,
            OpKind::LoadWeights,
            step,
            layer,
            &[(tier, self.placement.attention_bytes)],
            deps,
        )?;
        self.ops[id].tensor = Some(TensorKind::Attention);
        Some(id)
    }

    fn load_expert(
        &mut self,
        stream: Stream,
        step: usize,
        layer: usize,
        e: ExpertId,
        deps: &[Option<OpId>],
    ) -> Option<OpId> {
        let tier = self.placement.layers[layer].experts[e as usize];
        let id = self.load(
            stream,
            OpKind::LoadExpert,
            step,
            layer,
            &[(tier, self.placement.expert_bytes)],
            deps,
        )?;
        self.ops[id].expert = Some(e);
        self.ops[id].tensor = Some(TensorKind::Expert);
        Some(id)
    }

    fn kv_offloaded(&self) -> bool {
        self.placement.kv != Tier::Vram
    }

    fn cache_load(
        &mut self,
        step: usize,
        layer: usize,
        batch: usize,
        deps: &[Option<OpId>],
    ) -> Option<OpId> {
        if !self.kv_offloaded() || step == 0 {
            return None;
        }
        let g = &self.trace.meta.group;
        let context = self.cfg.kv_policy.retained_tokens(g.prompt_len + step - 1) as u64;
        let bytes = g.batch_size as u64 * context * self.spec.kv_bytes_per_token;
        let id = self.push(Stream::CacheLoad, OpKind::LoadCache, step, layer);
        let op = &mut self.ops[id];
        op.batch = Some(batch);
        op.bytes = bytes;
        op.duration = transfer_nanos(self.hw, bytes, Route::DramToVramPinned);
        op.vram_alloc = bytes;
        op.deps = deps.iter().flatten().copied().collect();
        Some(id)
    }

    fn cache_store(
        &mut self,
        step: usize,
        layer: usize,
        batch: usize,
        attn: OpId,
        cache: Option<OpId>,
    ) {
        if !self.kv_offloaded() {
            return;
        }
        let tokens = self.trace.tokens_per_batch(step) as u64;
        let bytes = tokens * self.spec.kv_bytes_per_token;
        let id = self.push(Stream::CacheStore, OpKind::StoreCache, step, layer);
        let op = &mut self.ops[id];
        op.batch = Some(batch);
        op.bytes = bytes;
        op.duration = transfer_nanos(self.hw, bytes, Route::VramToDram);
        op.deps = vec![attn];
        op.frees = cache.into_iter().collect();
    }

    fn stage(&mut self, pass: usize, deps: &[Option<OpId>]) {
        let total = self.staged.len();
        if self.placement.window == 0 || pass >= total {
            return;
        }
        let (step, layer) = (pass / self.n_layers(), pass % self.n_layers());
        let bytes = self.placement.disk_bytes_of_layer(layer);
        if bytes == 0 {
            return;
        }
        let id = self.push(Stream::DiskStage, OpKind::StageWindow, step, layer);
        let op = &mut self.ops[id];
        op.bytes = bytes;
        op.duration = transfer_nanos(self.hw, bytes, Route::DiskToDram);
        op.deps = deps.iter().flatten().copied().collect();
        self.staged[pass] = Some(id);
    }

    fn compute(
        &mut self,
        kind: OpKind,
        step: usize,
        layer: usize,
        batch: Option<usize>,
        tokens: u64,
    ) -> OpId {
        let lk = match kind {
            OpKind::ComputeAttention => LayerKind::Attention,
            OpKind::ComputeGate => LayerKind::Gate,
            _ => LayerKind::Expert,
        };
        let id = self.push(Stream::Compute, kind, step, layer);
        let op = &mut self.ops[id];
        op.batch = batch;
        op.tokens = tokens;
        op.duration = match lk {
            LayerKind::Expert => {
                expert_call_nanos(self.hw, tokens, self.spec.tensor_bytes(TensorKind::Expert))
            }
            _ => compute_nanos(self.hw, lk, tokens),
        };
        id
    }

    fn expert_compute(
        &mut self,
        step: usize,
        layer: usize,
        batch: Option<usize>,
        e: ExpertId,
        tokens: u64,
        load: Option<OpId>,
        first_use: bool,
    ) -> OpId {
        let id = self.compute(OpKind::ComputeExpert, step, layer, batch, tokens);
        if first_use && load.is_some() {
            self.ops[id].duration += self.dequant;
        }
        self.ops[id].expert = Some(e);
        self.ops[id].deps = load.into_iter().collect();
        id
    }

    fn offload(
        &mut self,
        step: usize,
        layer: usize,
        e: ExpertId,
        load: OpId,
        after: Option<OpId>,
    ) -> OpId {
        let id = self.push(Stream::Compute, OpKind::OffloadExpert, step, layer);
        let op = &mut self.ops[id];
        op.expert = Some(e);
        op.deps = after.into_iter().chain([load]).collect();
        op.frees = vec![load];
        id
    }

    fn pass(
        &mut self,
        step: usize,
        layer: usize,
        carry: Carry,
        provider: &mut dyn PrefetchProvider,
    ) -> Result<(Carry, Option<crate::prefetch::PrefetchDecision>)> {
        let n = self.trace.n_batches();
        let tokens = self.trace.tokens_per_batch(step) as u64;
        let variant = self.cfg.variant;
        let lp = self.placement.layers[layer].clone();
        let prev = carry.last_compute;
        let pass = self.pass_index(step, layer);

        // Gate and expert weights, loaded while attention runs.
        let mut moe_load = None;
        let mut gate_load = None;
        let mut hot: Vec<(ExpertId, Option<OpId>)> = Vec::new();
        let mut decision = None;
        if variant.prefetches_hot() {
            gate_load = self.load(
                Stream::WeightLoad,
                OpKind::LoadWeights,
                step,
                layer,
                &[(lp.gate, self.placement.gate_bytes)],
                &[prev],
            );
            if let Some(g) = gate_load {
                self.ops[g].tensor = Some(TensorKind::Gate);
            }
            let d = provider.predict(self.trace, step, layer, self.cfg.k)?;
            let ne = self.spec.n_experts_per_layer;
            if let Some(&e) = d.expert_ids.iter().find(|&&e| e as usize >= ne) {
                return Err(Error::OutOfRange {
                    what: "predicted expert",
                    index: e as usize,
                    limit: ne,
                });
            }
            for &e in &d.expert_ids {
                let l = self.load_expert(Stream::WeightLoad, step, layer, e, &[prev]);
                hot.push((e, l));
            }
            decision = Some(d);
        } else {
            let mut parts = vec![(lp.gate, self.placement.gate_bytes)];
            parts.extend(lp.experts.iter().map(|&t| (t, self.placement.expert_bytes)));
            moe_load = self.load(
                Stream::WeightLoad,
                OpKind::LoadWeights,
                step,
                layer,
                &parts,
                &[prev],
            );
            if let Some(m) = moe_load {
                self.ops[m].tensor = Some(TensorKind::MoeLayer);
            }
        }

        // Attention, double-buffered KV loads, stores.
        let mut caches = vec![carry.cache0];
        let mut attns: Vec<OpId> = Vec::with_capacity(n);
        for b in 0..n {
            if b + 1 < n {
                let trigger = if b == 0 {
                    carry.cache_trigger
                } else {
                    Some(attns[b - 1])
                };
                let c = self.cache_load(step, layer, b + 1, &[trigger]);
                caches.push(c);
            }
            let a = self.compute(OpKind::ComputeAttention, step, layer, Some(b), tokens);
            self.ops[a].deps = carry.attention.into_iter().chain(caches[b]).collect();
            if b == 0 {
                // bring the next disk layer into the staging window
                let ahead = pass + self.placement.window;
                self.stage(ahead, &[Some(a)]);
            }
            attns.push(a);
        }
        if let Some(al) = carry.attention {
            self.ops[attns[n - 1]].frees.push(al);
        }
        for b in 0..n {
            self.cache_store(step, layer, b, attns[b], caches[b]);
        }

        // Gates, each followed by on-demand loads for newly routed experts.
        let weights = moe_load.or(gate_load);
        let mut issued = vec![false; self.spec.n_experts_per_layer];
        for &(e, _) in &hot {
            issued[e as usize] = true;
        }
        let mut cold: Vec<(ExpertId, OpId)> = Vec::new();
        let last_hot = hot.iter().rev().find_map(|h| h.1);
        let mut gates = Vec::with_capacity(n);
        for b in 0..n {
            let g = self.compute(OpKind::ComputeGate, step, layer, Some(b), tokens);
            self.ops[g].deps = weights.into_iter().collect();
            gates.push(g);
            if !variant.prefetches_hot() {
                continue;
            }
            for (e, _) in self.trace.batch_demand(step, layer, b) {
                if issued[e as usize] || lp.experts[e as usize] == Tier::Vram {
                    continue;
                }
                issued[e as usize] = true;
                let after = if cold.is_empty() { last_hot } else { None };
                if let Some(l) =
                    self.load_expert(Stream::ExpertLoad, step, layer, e, &[Some(g), after])
                {
                    cold.push((e, l));
                }
            }
        }
        let last_gate = gates[n - 1];
        if let Some(g) = gate_load {
            self.ops[last_gate].frees.push(g);
        }

        // Weights and first KV slice of the next pass stream in during the
        // expert phase.
        let next = pass + 1;
        let mut next_carry = Carry::default();
        if next < self.staged.len() {
            let (ns, nl) = (next / self.n_layers(), next % self.n_layers());
            let last_cold = cold.last().map(|c| c.1);
            next_carry.attention = self.load_attention(ns, nl, &[Some(last_gate), last_cold]);
            next_carry.cache_trigger = Some(last_gate);
            next_carry.cache0 = self.cache_load(ns, nl, 0, &[Some(last_gate)]);
        }

        let load = expert_load(self.trace, step, layer)?;
        let last = match variant {
            Variant::Simple | Variant::MultibatchFullPrefetch => {
                let mut seen = vec![false; self.spec.n_experts_per_layer];
                let mut last = last_gate;
                for b in 0..n {
                    for (e, cnt) in self.trace.batch_demand(step, layer, b) {
                        let first = !seen[e as usize];
                        seen[e as usize] = true;
                        let streamed = lp.experts[e as usize] != Tier::Vram;
                        last = self.expert_compute(
                            step,
                            layer,
                            Some(b),
                            e,
                            cnt,
                            moe_load,
                            first && streamed,
                        );
                    }
                }
                if let Some(m) = moe_load {
                    self.ops[last].frees.push(m);
                }
                last
            }
            Variant::StrawmanNoReorder => {
                self.batch_major_experts(step, layer, &hot, &cold, last_gate)
            }
            Variant::ExpertAware => {
                self.expert_major_experts(step, layer, &load.counts, &hot, &cold, last_gate)
            }
        };
        next_carry.last_compute = Some(last);
        Ok((next_carry, decision))
    }

    fn loaded_of(
        hot: &[(ExpertId, Option<OpId>)],
        cold: &[(ExpertId, OpId)],
        e: ExpertId,
    ) -> Option<OpId> {
        hot.iter()
            .find(|h| h.0 == e)
            .and_then(|h| h.1)
            .or_else(|| cold.iter().find(|c| c.0 == e).map(|c| c.1))
    }

    fn batch_major_experts(
        &mut self,
        step: usize,
        layer: usize,
        hot: &[(ExpertId, Option<OpId>)],
        cold: &[(ExpertId, OpId)],
        last_gate: OpId,
    ) -> OpId {
        let n = self.trace.n_batches();
        let ne = self.spec.n_experts_per_layer;
        let mut last_use = vec![None; ne];
        for b in 0..n {
            for (e, _) in self.trace.batch_demand(step, layer, b) {
                last_use[e as usize] = Some(b);
            }
        }
        let mut last = last_gate;
        let mut pending = Vec::new();
        for &(e, l) in hot {
            if let (None, Some(l)) = (last_use[e as usize], l) {
                last = self.offload(step, layer, e, l, None);
            }
        }
        let mut seen = vec![false; ne];
        for b in 0..n {
            for (e, cnt) in self.trace.batch_demand(step, layer, b) {
                let l = Self::loaded_of(hot, cold, e);
                let first = !seen[e as usize];
                seen[e as usize] = true;
                last = self.expert_compute(step, layer, Some(b), e, cnt, l, first);
                if let (Some(l), true) = (l, last_use[e as usize] == Some(b)) {
                    match self.cfg.offload {
                        OffloadMode::Immediate => {
                            last = self.offload(step, layer, e, l, Some(last))
                        }
                        OffloadMode::Deferred => pending.push((e, l)),
                    }
                }
            }
        }
        let after = last;
        for (e, l) in pending {
            last = self.offload(step, layer, e, l, Some(after));
        }
        last
    }

    fn expert_major_experts(
        &mut self,
        step: usize,
        layer: usize,
        counts: &[u64],
        hot: &[(ExpertId, Option<OpId>)],
        cold: &[(ExpertId, OpId)],
        last_gate: OpId,
    ) -> OpId {
        let lp = &self.placement.layers[layer];
        let by_count =
            |v: &mut Vec<ExpertId>| v.sort_by_key(|&e| (std::cmp::Reverse(counts[e as usize]), e));
        let is_hot = |e: ExpertId| hot.iter().any(|h| h.0 == e);
        let mut resident: Vec<ExpertId> = (0..counts.len() as ExpertId)
            .filter(|&e| {
                counts[e as usize] > 0 && lp.experts[e as usize] == Tier::Vram && !is_hot(e)
            })
            .collect();
        by_count(&mut resident);
        let mut hot_active: Vec<ExpertId> = hot
            .iter()
            .map(|h| h.0)
            .filter(|&e| counts[e as usize] > 0)
            .collect();
        by_count(&mut hot_active);

        let mut last = last_gate;
        let mut freeing = Vec::new();
        for &(e, l) in hot {
            if let (0, Some(l)) = (counts[e as usize], l) {
                last = self.offload(step, layer, e, l, None);
                freeing.push(last);
            }
        }
        let order = resident
            .into_iter()
            .chain(hot_active)
            .chain(cold.iter().map(|c| c.0));
        let mut pending = Vec::new();
        for e in order.collect::<Vec<_>>() {
            let l = Self::loaded_of(hot, cold, e);
            last = self.expert_compute(step, layer, None, e, counts[e as usize], l, true);
            if let Some(l) = l {
                match self.cfg.offload {
                    OffloadMode::Immediate => {
                        last = self.offload(step, layer, e, l, Some(last));
                        freeing.push(last);
                    }
                    OffloadMode::Deferred => pending.push((e, l)),
                }
            }
        }
        let after = last;
        for (e, l) in pending {
            last = self.offload(step, layer, e, l, Some(after));
        }
        // Expert buffers: K hot slots plus two spares. Cold load `c` reuses
        // the slot released by the `(c - 2)`-th offload.
        if self.cfg.offload == OffloadMode::Immediate {
            for (c, &(_, l)) in cold.iter().enumerate().skip(2) {
                if let Some(&f) = freeing.get(c - 2) {
                    self.ops[l].deps.push(f);
                }
            }
        }
        last
    }
}

impl ScheduleConfig {
    /// Expert buffers the variant can hold at once in one layer: `K` hot plus
    /// two cold slots with immediate offload, otherwise every expert.
    pub fn expert_slots(&self, spec: &ModelSpec) -> usize {
        let ne = spec.n_experts_per_layer;
        match (self.variant, self.offload) {
            (Variant::ExpertAware, OffloadMode::Immediate) => (self.k.max(spec.top_k) + 2).min(ne),
            _ => ne,
        }
    }
}

/// Builds the full schedule of `cfg.variant` for every step and layer of
/// `trace`.
pub fn build_schedule(
    spec: &ModelSpec,
    hw: &HardwareProfile,
    placement: &PlacementPlan,
    trace: &ActivationTrace,
    cfg: &ScheduleConfig,
    provider: &mut dyn PrefetchProvider,
) -> Result<Schedule> {
    spec.validate()?;
    trace.check_against(spec)?;
    if placement.layers.len() != spec.n_layers
        || placement
            .layers
            .iter()
            .any(|l| l.experts.len() != spec.n_experts_per_layer)
    {
        return Err(Error::Validation(
            "placement does not match model dimensions".into(),
        ));
    }
    if cfg.variant.prefetches_hot() && (cfg.k == 0 || cfg.k > spec.n_experts_per_layer) {
        return Err(Error::Validation(format!(
            "K must be in 1..={}, got {}",
            spec.n_experts_per_layer, cfg.k
        )));
    }
    let group = trace.meta.group;
    if cfg.variant == Variant::Simple && group.n_batches != 1 {
        return Err(Error::Validation(
            "the simple variant runs a single batch".into(),
        ));
    }
    let n_passes = trace.n_steps() * spec.n_layers;
    let dequant = match cfg.quant {
        Some(_) => secs_to_nanos(dequant_time(hw, placement.expert_bytes)),
        None => 0,
    };
    let mut b = Builder {
        spec,
        hw,
        placement,
        trace,
        cfg,
        ops: Vec::new(),
        staged: vec![None; n_passes],
        dequant,
    };
    for p in 0..placement.window.min(n_passes) {
        b.stage(p, &[]);
    }
    let mut carry = Carry {
        attention: b.load_attention(0, 0, &[]),
        cache0: None,
        cache_trigger: None,
        last_compute: None,
    };
    let mut decisions = Vec::new();
    for step in 0..trace.n_steps() {
        for layer in 0..spec.n_layers {
            let (next, d) = b.pass(step, layer, carry, provider)?;
            decisions.extend(d);
            provider.observe(trace, step, layer)?;
            carry = next;
        }
    }
    let activations =
        spec.activation_bytes_per_token * group.tokens_per_batch(0) as u64 * group.n_batches as u64;
    let resident_kv = if placement.kv == Tier::Vram {
        placement.kv_bytes
    } else {
        0
    };
    let resident_weights = placement.usage.vram - placement.working_set - resident_kv;
    Ok(Schedule {
        variant: cfg.variant,
        offload: cfg.offload,
        n_steps: trace.n_steps(),
        n_layers: spec.n_layers,
        n_batches: group.n_batches,
        batch_size: group.batch_size,
        k: if cfg.variant.prefetches_hot() {
            cfg.k
        } else {
            0
        },
        vram_base: resident_weights + resident_kv + activations,
        ops: b.ops,
        decisions,
    })
}
