//! Tensor and KV-cache placement across VRAM, DRAM and disk, plus a
//! byte-exact memory ledger.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TierDeficit};
use crate::model::{HardwareProfile, KvPolicy, ModelSpec, TensorKind};
use crate::quant::QuantConfig;
use crate::workload::BatchGroupConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Vram,
    Dram,
    Disk,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Vram, Tier::Dram, Tier::Disk];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Vram => "vram",
            Tier::Dram => "dram",
            Tier::Disk => "disk",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TierBytes {
    pub vram: u64,
    pub dram: u64,
    pub disk: u64,
}

impl TierBytes {
    pub fn get(&self, t: Tier) -> u64 {
        match t {
            Tier::Vram => self.vram,
            Tier::Dram => self.dram,
            Tier::Disk => self.disk,
        }
    }

    fn add(&mut self, t: Tier, b: u64) {
        match t {
            Tier::Vram => self.vram += b,
            Tier::Dram => self.dram += b,
            Tier::Disk => self.disk += b,
        }
    }

    pub fn capacities(hw: &HardwareProfile) -> Self {
        TierBytes {
            vram: hw.vram_capacity,
            dram: hw.dram_capacity,
            disk: hw.disk_capacity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementOptions {
    pub kv_policy: KvPolicy,
    pub quant: Option<QuantConfig>,
    /// Largest disk staging window considered, in layers. 0 disables staging.
    pub max_window: usize,
    /// Keep whole tensors resident in leftover VRAM.
    pub fill_vram: bool,
    /// Keep the KV cache off the GPU even if it would fit.
    pub kv_offload: bool,
    /// Streamed expert buffers in the working set. `None` means `top_k + 2`.
    #[serde(default)]
    pub expert_slots: Option<usize>,
}

impl Default for PlacementOptions {
    fn default() -> Self {
        PlacementOptions {
            kv_policy: KvPolicy::Full,
            quant: None,
            max_window: 4,
            fill_vram: true,
            kv_offload: false,
            expert_slots: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlacement {
    pub attention: Tier,
    pub gate: Tier,
    pub experts: Vec<Tier>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub layers: Vec<LayerPlacement>,
    pub kv: Tier,
    pub kv_bytes: u64,
    /// Layers staged from disk ahead of use; 0 when nothing lives on disk.
    pub window: usize,
    pub staging_bytes: u64,
    /// VRAM held back for streamed weights and activations.
    pub working_set: u64,
    pub usage: TierBytes,
    pub attention_bytes: u64,
    pub gate_bytes: u64,
    pub expert_bytes: u64,
}

/// VRAM needed to stream one layer while computing another: double-buffered
/// attention and gate, `expert_slots` expert buffers and activations for
/// every batch in flight.
pub fn working_set_bytes(
    spec: &ModelSpec,
    group: &BatchGroupConfig,
    quant: Option<&QuantConfig>,
    expert_slots: usize,
) -> u64 {
    let attn = spec.transfer_bytes(TensorKind::Attention, quant);
    let expert = spec.transfer_bytes(TensorKind::Expert, quant);
    // the prefill step has the most tokens in flight
    let peak_tokens = group.tokens_per_batch(0) as u64;
    2 * (attn + spec.gate_bytes)
        + expert_slots as u64 * expert
        + spec.activation_bytes_per_token * peak_tokens * group.n_batches as u64
}

/// KV bytes for all sequences of the batch group at full context.
pub fn kv_cache_bytes(spec: &ModelSpec, group: &BatchGroupConfig, policy: KvPolicy) -> u64 {
    let ctx = policy.retained_tokens(group.prompt_len + group.gen_len) as u64;
    (group.batch_size * group.n_batches) as u64
        * ctx
        * spec.kv_bytes_per_token
        * spec.n_layers as u64
}

#[derive(Clone, Copy)]
struct Slot {
    layer: usize,
    kind: TensorKind,
    expert: usize,
    bytes: u64,
}

pub fn plan_placement(
    spec: &ModelSpec,
    hw: &HardwareProfile,
    group: &BatchGroupConfig,
    opts: &PlacementOptions,
) -> Result<PlacementPlan> {
    spec.validate()?;
    hw.validate()?;
    group.validate()?;
    let q = opts.quant.as_ref();
    let attention_bytes = spec.transfer_bytes(TensorKind::Attention, q);
    let gate_bytes = spec.gate_bytes;
    let expert_bytes = spec.transfer_bytes(TensorKind::Expert, q);
    let nl = spec.n_layers;
    let ne = spec.n_experts_per_layer;

    let slots = opts.expert_slots.unwrap_or(spec.top_k + 2).min(ne);
    let working_set = working_set_bytes(spec, group, q, slots);
    if working_set > hw.vram_capacity {
        return Err(Error::MemoryInfeasible(vec![TierDeficit {
            tier: "vram",
            needed: working_set,
            available: hw.vram_capacity,
        }]));
    }
    let mut vram_left = hw.vram_capacity - working_set;
    let mut usage = TierBytes {
        vram: working_set,
        ..TierBytes::default()
    };

    let kv_bytes = kv_cache_bytes(spec, group, opts.kv_policy);
    let kv = if !opts.kv_offload && kv_bytes <= vram_left {
        vram_left -= kv_bytes;
        Tier::Vram
    } else {
        Tier::Dram
    };
    usage.add(kv, kv_bytes);

    let mut layers = vec![
        LayerPlacement {
            attention: Tier::Dram,
            gate: Tier::Dram,
            experts: vec![Tier::Dram; ne],
        };
        nl
    ];

    // Experts of the earliest layers first, then attention and gate.
    let experts: Vec<Slot> = (0..nl)
        .flat_map(|layer| {
            (0..ne).map(move |expert| Slot {
                layer,
                kind: TensorKind::Expert,
                expert,
                bytes: expert_bytes,
            })
        })
        .collect();
    let non_experts: Vec<Slot> = (0..nl)
        .flat_map(|layer| {
            [
                Slot {
                    layer,
                    kind: TensorKind::Attention,
                    expert: 0,
                    bytes: attention_bytes,
                },
                Slot {
                    layer,
                    kind: TensorKind::Gate,
                    expert: 0,
                    bytes: gate_bytes,
                },
            ]
        })
        .collect();
    let mut resident = vec![false; experts.len() + non_experts.len()];
    if opts.fill_vram {
        for (i, s) in experts.iter().chain(&non_experts).enumerate() {
            if s.bytes <= vram_left {
                vram_left -= s.bytes;
                resident[i] = true;
            }
        }
    }
    let host: Vec<Slot> = experts
        .iter()
        .chain(&non_experts)
        .zip(&resident)
        .filter(|(_, &r)| !r)
        .map(|(s, _)| *s)
        .collect();
    for (s, _) in experts
        .iter()
        .chain(&non_experts)
        .zip(&resident)
        .filter(|(_, &r)| r)
    {
        set_tier(&mut layers, s, Tier::Vram);
        usage.vram += s.bytes;
    }

    if kv == Tier::Dram && kv_bytes > hw.dram_capacity {
        return Err(Error::MemoryInfeasible(vec![TierDeficit {
            tier: "dram",
            needed: kv_bytes,
            available: hw.dram_capacity,
        }]));
    }
    let dram_for_weights = hw.dram_capacity - usage.dram;
    let host_total: u64 = host.iter().map(|s| s.bytes).sum();

    let (window, staging_bytes, spilled) = if host_total <= dram_for_weights {
        (0, 0, Vec::new())
    } else {
        let layer_stored = attention_bytes + gate_bytes + ne as u64 * expert_bytes;
        let mut chosen = None;
        let mut last_deficit = Vec::new();
        let candidates: Vec<usize> = if opts.max_window == 0 {
            vec![0]
        } else {
            (1..=opts.max_window.min(nl)).rev().collect()
        };
        for l in candidates {
            let reserve = l as u64 * layer_stored;
            let avail = dram_for_weights.saturating_sub(reserve);
            let spill = spill_order(&host, avail);
            let spill_bytes: u64 = spill.iter().map(|&i| host[i].bytes).sum();
            if reserve <= dram_for_weights && spill_bytes <= hw.disk_capacity {
                chosen = Some((l, reserve, spill));
                break;
            }
            last_deficit = vec![
                TierDeficit {
                    tier: "dram",
                    needed: usage.dram + reserve + host_total - spill_bytes.min(host_total),
                    available: hw.dram_capacity,
                },
                TierDeficit {
                    tier: "disk",
                    needed: spill_bytes,
                    available: hw.disk_capacity,
                },
            ];
        }
        chosen.ok_or(Error::MemoryInfeasible(last_deficit))?
    };

    let mut on_disk = vec![false; host.len()];
    for &i in &spilled {
        on_disk[i] = true;
    }
    for (s, &d) in host.iter().zip(&on_disk) {
        let t = if d { Tier::Disk } else { Tier::Dram };
        set_tier(&mut layers, s, t);
        usage.add(t, s.bytes);
    }
    usage.dram += staging_bytes;

    Ok(PlacementPlan {
        layers,
        kv,
        kv_bytes,
        window,
        staging_bytes,
        working_set,
        usage,
        attention_bytes,
        gate_bytes,
        expert_bytes,
    })
}

/// Indices of `host` that go to disk when only `avail` DRAM bytes remain.
/// Experts claim DRAM first, so non-expert tensors spill first; within a
/// class the latest layers spill first.
fn spill_order(host: &[Slot], avail: u64) -> Vec<usize> {
    let mut kept = 0u64;
    let mut spill = Vec::new();
    let experts = host
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == TensorKind::Expert);
    let others = host
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind != TensorKind::Expert);
    for (i, s) in experts.chain(others) {
        if spill.is_empty() && kept + s.bytes <= avail {
            kept += s.bytes;
        } else {
            spill.push(i);
        }
    }
    spill.sort_unstable();
    spill
}

fn set_tier(layers: &mut [LayerPlacement], s: &Slot, t: Tier) {
    let l = &mut layers[s.layer];
    match s.kind {
        TensorKind::Attention => l.attention = t,
        TensorKind::Gate => l.gate = t,
        _ => l.experts[s.expert] = t,
    }
}

impl PlacementPlan {
    pub fn tier_of(&self, layer: usize, kind: TensorKind, expert: usize) -> Tier {
        let l = &self.layers[layer];
        match kind {
            TensorKind::Attention => l.attention,
            TensorKind::Gate => l.gate,
            TensorKind::Expert => l.experts[expert],
            TensorKind::MoeLayer => l
                .experts
                .iter()
                .copied()
                .chain([l.gate])
                .max()
                .unwrap_or(Tier::Dram),
        }
    }

    pub fn layer_on_disk(&self, layer: usize) -> bool {
        self.tier_of(layer, TensorKind::MoeLayer, 0) == Tier::Disk
            || self.layers[layer].attention == Tier::Disk
    }

    /// Bytes of `layer` that live on disk.
    pub fn disk_bytes_of_layer(&self, layer: usize) -> u64 {
        let l = &self.layers[layer];
        let mut b = 0;
        if l.attention == Tier::Disk {
            b += self.attention_bytes;
        }
        if l.gate == Tier::Disk {
            b += self.gate_bytes;
        }
        b + l.experts.iter().filter(|&&t| t == Tier::Disk).count() as u64 * self.expert_bytes
    }

    pub fn count_on(&self, tier: Tier) -> usize {
        self.layers
            .iter()
            .map(|l| {
                (l.attention == tier) as usize
                    + (l.gate == tier) as usize
                    + l.experts.iter().filter(|&&t| t == tier).count()
            })
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "kv {} {}\nwindow {} staging {}\nworking_set {}",
            self.kv.name(),
            self.kv_bytes,
            self.window,
            self.staging_bytes,
            self.working_set
        );
        for t in Tier::ALL {
            let _ = writeln!(s, "usage {} {}", t.name(), self.usage.get(t));
        }
        for (j, l) in self.layers.iter().enumerate() {
            let experts: Vec<&str> = l.experts.iter().map(|t| t.name()).collect();
            let _ = writeln!(
                s,
                "layer {j} attention={} gate={} experts={}",
                l.attention.name(),
                l.gate.name(),
                experts.join(",")
            );
        }
        s
    }
}

/// Staging step for a disk window of `window` layers: when `current` starts
/// computing, layer `stage` is brought into DRAM and `evict` is released.
/// Indices wrap across decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowMove {
    pub stage: usize,
    pub evict: usize,
}

pub fn window_advance(window: usize, current: usize, n_layers: usize) -> WindowMove {
    WindowMove {
        stage: (current + window) % n_layers,
        evict: current % n_layers,
    }
}

/// Tracks live allocations per tier and reports the peak.
#[derive(Debug, Clone)]
pub struct MemoryLedger {
    capacity: [u64; 3],
    used: [u64; 3],
    peak: [u64; 3],
    live: HashMap<u64, (Tier, u64)>,
}

impl MemoryLedger {
    pub fn new(capacity: TierBytes) -> Self {
        MemoryLedger {
            capacity: [capacity.vram, capacity.dram, capacity.disk],
            used: [0; 3],
            peak: [0; 3],
            live: HashMap::new(),
        }
    }

    pub fn alloc(&mut self, id: u64, tier: Tier, bytes: u64) -> Result<()> {
        if self.live.contains_key(&id) {
            return Err(Error::Accounting(format!(
                "allocation {id} is already live"
            )));
        }
        let i = tier.index();
        let after = self.used[i] + bytes;
        if after > self.capacity[i] {
            return Err(Error::MemoryInfeasible(vec![TierDeficit {
                tier: tier.name(),
                needed: after,
                available: self.capacity[i],
            }]));
        }
        self.used[i] = after;
        self.peak[i] = self.peak[i].max(after);
        self.live.insert(id, (tier, bytes));
        Ok(())
    }

    pub fn free(&mut self, id: u64) -> Result<()> {
        let (tier, bytes) = self
            .live
            .remove(&id)
            .ok_or_else(|| Error::Accounting(format!("free of unknown allocation {id}")))?;
        self.used[tier.index()] -= bytes;
        Ok(())
    }

    pub fn used(&self, tier: Tier) -> u64 {
        self.used[tier.index()]
    }

    pub fn peak(&self, tier: Tier) -> u64 {
        self.peak[tier.index()]
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }
}
