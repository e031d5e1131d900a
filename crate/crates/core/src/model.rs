//! Static model and hardware descriptions plus the affine cost model.
//!
//! Transfers cost `fixed_latency + bytes / bandwidth(route)`; compute costs
//! `rate(kind) * tokens`. Everything the planner and simulator consume is
//! converted to integer nanoseconds through [`CostProfile`].

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantized_bytes, QuantConfig};

/// Simulated time, in integer nanoseconds.
pub type Nanos = u64;

pub const NANOS_PER_SEC: f64 = 1e9;

/// Round a duration in seconds to the nearest nanosecond.
pub fn secs_to_nanos(secs: f64) -> Nanos {
    debug_assert!(secs >= 0.0 && secs.is_finite());
    (secs * NANOS_PER_SEC).round() as Nanos
}

pub fn nanos_to_secs(ns: Nanos) -> f64 {
    ns as f64 / NANOS_PER_SEC
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DTypeSpec {
    pub name: String,
    pub bits_per_element: u32,
}

impl DTypeSpec {
    pub fn bf16() -> Self {
        DTypeSpec {
            name: "bf16".into(),
            bits_per_element: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bits_per_element {
            4 | 8 | 16 | 32 => Ok(()),
            b => Err(Error::Validation(format!(
                "dtype {} has unsupported width {b} bits",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Attention,
    Gate,
    Expert,
    MoeLayer,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: usize,
    pub n_experts_per_layer: usize,
    pub top_k: usize,
    pub attention_bytes: u64,
    pub gate_bytes: u64,
    pub expert_bytes: u64,
    pub kv_bytes_per_token: u64,
    /// Hidden-state bytes per token, used to size activation buffers.
    #[serde(default)]
    pub activation_bytes_per_token: u64,
    pub dtype: DTypeSpec,
}

impl ModelSpec {
    /// Mixtral-8x7B shaped model: hidden 4096, ffn 14336, 8 kv heads of 128.
    pub fn mixtral_8x7b() -> Self {
        let hidden = 4096u64;
        let ffn = 14336u64;
        let kv_dim = 1024u64;
        ModelSpec {
            name: "mixtral-8x7b".into(),
            n_layers: 32,
            n_experts_per_layer: 8,
            top_k: 2,
            attention_bytes: (2 * hidden * hidden + 2 * hidden * kv_dim) * 2,
            gate_bytes: hidden * 8 * 2,
            expert_bytes: 3 * hidden * ffn * 2,
            kv_bytes_per_token: 2 * kv_dim * 2,
            activation_bytes_per_token: hidden * 2,
            dtype: DTypeSpec::bf16(),
        }
    }

    /// Mixtral-8x22B shaped model: hidden 6144, ffn 16384, 56 layers.
    pub fn mixtral_8x22b() -> Self {
        let hidden = 6144u64;
        let ffn = 16384u64;
        let kv_dim = 1024u64;
        ModelSpec {
            name: "mixtral-8x22b".into(),
            n_layers: 56,
            n_experts_per_layer: 8,
            top_k: 2,
            attention_bytes: (2 * hidden * hidden + 2 * hidden * kv_dim) * 2,
            gate_bytes: hidden * 8 * 2,
            expert_bytes: 3 * hidden * ffn * 2,
            kv_bytes_per_token: 2 * kv_dim * 2,
            activation_bytes_per_token: hidden * 2,
            dtype: DTypeSpec::bf16(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dtype.validate()?;
        let bad = |m: &str| Err(Error::Validation(format!("model {}: {m}", self.name)));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.top_k == 0 || self.top_k > self.n_experts_per_layer {
            return bad("top_k must be in 1..=n_experts_per_layer");
        }
        if self.n_experts_per_layer > u16::MAX as usize {
            return bad("too many experts per layer");
        }
        if self.attention_bytes == 0
            || self.gate_bytes == 0
            || self.expert_bytes == 0
            || self.kv_bytes_per_token == 0
        {
            return bad("all byte sizes must be > 0");
        }
        Ok(())
    }

    pub fn tensor_bytes(&self, kind: TensorKind) -> u64 {
        match kind {
            TensorKind::Attention => self.attention_bytes,
            TensorKind::Gate => self.gate_bytes,
            TensorKind::Expert => self.expert_bytes,
            TensorKind::MoeLayer => {
                self.gate_bytes + self.n_experts_per_layer as u64 * self.expert_bytes
            }
        }
    }

    /// Weight bytes of one transformer block.
    pub fn layer_bytes(&self) -> u64 {
        self.attention_bytes + self.tensor_bytes(TensorKind::MoeLayer)
    }

    pub fn total_weight_bytes(&self) -> u64 {
        self.layer_bytes() * self.n_layers as u64
    }

    /// Element count of a tensor of `bytes` stored in this model's dtype.
    pub fn elements_of(&self, bytes: u64) -> u64 {
        bytes * 8 / self.dtype.bits_per_element as u64
    }

    /// Bytes moved for a tensor of `kind`, after optional quantization.
    /// Gates stay at full precision.
    pub fn transfer_bytes(&self, kind: TensorKind, quant: Option<&QuantConfig>) -> u64 {
        let raw = self.tensor_bytes(kind);
        match (kind, quant) {
            (TensorKind::Attention | TensorKind::Expert, Some(q)) => {
                quantized_bytes(self.elements_of(raw), q)
            }
            (TensorKind::MoeLayer, Some(q)) => {
                self.gate_bytes
                    + self.n_experts_per_layer as u64
                        * quantized_bytes(self.elements_of(self.expert_bytes), q)
            }
            _ => raw,
        }
    }
}

/// How much KV state is retained per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KvPolicy {
    #[default]
    Full,
    /// Attention-sink retention: the first `sink_tokens` plus the most recent
    /// `window_tokens` are kept, everything in between is dropped.
    Streaming {
        sink_tokens: usize,
        window_tokens: usize,
    },
}

impl KvPolicy {
    pub fn retained_tokens(&self, context_len: usize) -> usize {
        match *self {
            KvPolicy::Full => context_len,
            KvPolicy::Streaming {
                sink_tokens,
                window_tokens,
            } => context_len.min(sink_tokens + window_tokens),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    pub vram_capacity: u64,
    pub dram_capacity: u64,
    pub disk_capacity: u64,
    /// Host-to-device bandwidth from pageable memory, bytes/s.
    pub pcie_bandwidth: f64,
    pub pinned_bandwidth_factor: f64,
    pub disk_bandwidth: f64,
    /// Seconds.
    pub transfer_fixed_latency: f64,
    /// Seconds per token.
    pub attn_compute_per_token: f64,
    pub gate_compute_per_token: f64,
    pub expert_compute_per_token: f64,
    /// Seconds per quantized byte.
    pub dequant_per_byte: f64,
    /// Device memory bandwidth, bytes/s. When set, an expert call takes at
    /// least the time to stream its weights once. 0 disables the floor.
    #[serde(default)]
    pub hbm_bandwidth: f64,
}

impl HardwareProfile {
    /// RTX 3090 class box (24 GB VRAM, 256 GB DRAM, 1 GB/s SSD) calibrated for
    /// Mixtral-8x7B: batch-16 attention ~2.6 ms, one expert over pinned PCIe ~21 ms.
    pub fn env1() -> Self {
        HardwareProfile {
            name: "env1".into(),
            vram_capacity: 24_000_000_000,
            dram_capacity: 256_000_000_000,
            disk_capacity: 2_000_000_000_000,
            pcie_bandwidth: 16.75e9 / 1.5,
            pinned_bandwidth_factor: 1.5,
            disk_bandwidth: 1e9,
            transfer_fixed_latency: 0.0,
            attn_compute_per_token: 162.5e-6,
            gate_compute_per_token: 1.625e-6,
            expert_compute_per_token: 40e-6,
            dequant_per_byte: 1e-12,
            hbm_bandwidth: 936e9,
        }
    }

    /// H800 class box (80 GB VRAM, 800 GB DRAM, PCIe 5.0).
    pub fn env2() -> Self {
        HardwareProfile {
            name: "env2".into(),
            vram_capacity: 80_000_000_000,
            dram_capacity: 800_000_000_000,
            disk_capacity: 1_000_000_000_000,
            pcie_bandwidth: 33.5e9 / 1.5,
            pinned_bandwidth_factor: 1.5,
            disk_bandwidth: 1e9,
            transfer_fixed_latency: 0.0,
            attn_compute_per_token: 54e-6,
            gate_compute_per_token: 0.54e-6,
            expert_compute_per_token: 13e-6,
            dequant_per_byte: 0.3e-12,
            hbm_bandwidth: 3.35e12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("hardware {}: {m}", self.name)));
        if self.vram_capacity == 0 || self.dram_capacity == 0 || self.disk_capacity == 0 {
            return bad("capacities must be > 0");
        }
        if !(self.pcie_bandwidth > 0.0) || !(self.disk_bandwidth > 0.0) {
            return bad("bandwidths must be > 0");
        }
        if !(self.pinned_bandwidth_factor >= 1.0) {
            return bad("pinned_bandwidth_factor must be >= 1");
        }
        let rates = [
            self.transfer_fixed_latency,
            self.attn_compute_per_token,
            self.gate_compute_per_token,
            self.expert_compute_per_token,
            self.dequant_per_byte,
            self.hbm_bandwidth,
        ];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return bad("latency and compute rates must be finite and >= 0");
        }
        Ok(())
    }

    pub fn effective_bandwidth(&self, route: Route) -> f64 {
        match route {
            Route::DramToVramPinned | Route::VramToDram => {
                self.pcie_bandwidth * self.pinned_bandwidth_factor
            }
            Route::DramToVramUnpinned => self.pcie_bandwidth,
            Route::DiskToDram => self.disk_bandwidth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    DramToVramPinned,
    DramToVramUnpinned,
    DiskToDram,
    VramToDram,
}

impl FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dram->vram pinned" | "dram_to_vram_pinned" => Ok(Route::DramToVramPinned),
            "dram->vram unpinned" | "dram_to_vram_unpinned" => Ok(Route::DramToVramUnpinned),
            "disk->dram" | "disk_to_dram" => Ok(Route::DiskToDram),
            "vram->dram" | "vram_to_dram" => Ok(Route::VramToDram),
            other => Err(Error::Config(format!("unknown transfer route `{other}`"))),
        }
    }
}

/// Seconds to move `bytes` over `route`.
pub fn transfer_time(profile: &HardwareProfile, bytes: u64, route: Route) -> f64 {
    profile.transfer_fixed_latency + bytes as f64 / profile.effective_bandwidth(route)
}

pub fn transfer_nanos(profile: &HardwareProfile, bytes: u64, route: Route) -> Nanos {
    secs_to_nanos(transfer_time(profile, bytes, route))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Attention,
    Gate,
    Expert,
}

/// Seconds to run `tokens` through one layer of `kind`. For experts, `tokens`
/// is the number routed to that expert.
pub fn compute_time(profile: &HardwareProfile, kind: LayerKind, tokens: u64) -> f64 {
    let rate = match kind {
        LayerKind::Attention => profile.attn_compute_per_token,
        LayerKind::Gate => profile.gate_compute_per_token,
        LayerKind::Expert => profile.expert_compute_per_token,
    };
    rate * tokens as f64
}

pub fn compute_nanos(profile: &HardwareProfile, kind: LayerKind, tokens: u64) -> Nanos {
    secs_to_nanos(compute_time(profile, kind, tokens))
}

/// One expert call over `tokens` tokens: the slower of the per-token rate and
/// one pass over the expert's `weight_bytes` in device memory.
pub fn expert_call_nanos(profile: &HardwareProfile, tokens: u64, weight_bytes: u64) -> Nanos {
    let linear = compute_time(profile, LayerKind::Expert, tokens);
    let floor = if profile.hbm_bandwidth > 0.0 {
        weight_bytes as f64 / profile.hbm_bandwidth
    } else {
        0.0
    };
    secs_to_nanos(linear.max(floor))
}

/// Seconds to dequantize one expert's worth of quantized bytes.
pub fn dequant_time(profile: &HardwareProfile, quantized_bytes: u64) -> f64 {
    profile.dequant_per_byte * quantized_bytes as f64
}

/// Per-layer timings consumed by the planner, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CostProfile {
    /// Attention compute for one batch.
    pub t_c_a: Nanos,
    /// Gate compute for one batch.
    pub t_c_g: Nanos,
    /// Expert compute per routed token (dequantization folded in).
    pub t_c_e_per_token: Nanos,
    pub t_io_a: Nanos,
    pub t_io_g: Nanos,
    pub t_io_e: Nanos,
    /// Tokens per batch this profile was built for.
    pub tokens_per_batch: u64,
}

/// Decode-step cost profile: each batch contributes `batch_size` tokens.
/// Weights are assumed to stream from pinned DRAM.
pub fn build_cost_profile(
    spec: &ModelSpec,
    profile: &HardwareProfile,
    batch_size: usize,
    quant: Option<&QuantConfig>,
) -> CostProfile {
    build_cost_profile_for_tokens(spec, profile, batch_size as u64, quant)
}

pub fn build_cost_profile_for_tokens(
    spec: &ModelSpec,
    profile: &HardwareProfile,
    tokens_per_batch: u64,
    quant: Option<&QuantConfig>,
) -> CostProfile {
    let route = Route::DramToVramPinned;
    let expert_bytes = spec.transfer_bytes(TensorKind::Expert, quant);
    let mut per_token = profile.expert_compute_per_token;
    if quant.is_some() && tokens_per_batch > 0 {
        // One dequantization per loaded expert, spread over a batch's tokens.
        per_token += dequant_time(profile, expert_bytes) / tokens_per_batch as f64;
    }
    CostProfile {
        t_c_a: compute_nanos(profile, LayerKind::Attention, tokens_per_batch),
        t_c_g: compute_nanos(profile, LayerKind::Gate, tokens_per_batch),
        t_c_e_per_token: secs_to_nanos(per_token),
        t_io_a: transfer_nanos(
            profile,
            spec.transfer_bytes(TensorKind::Attention, quant),
            route,
        ),
        t_io_g: transfer_nanos(profile, spec.gate_bytes, route),
        t_io_e: transfer_nanos(profile, expert_bytes, route),
        tokens_per_batch,
    }
}

/// Memoizes [`build_cost_profile_for_tokens`] keyed on all of its inputs.
#[derive(Debug, Default)]
pub struct CostCache {
    entries: RwLock<HashMap<String, CostProfile>>,
}

impl CostCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &self,
        spec: &ModelSpec,
        profile: &HardwareProfile,
        tokens_per_batch: u64,
        quant: Option<&QuantConfig>,
    ) -> CostProfile {
        let key = serde_json::to_string(&(spec, profile, tokens_per_batch, quant))
            .expect("cost key serializes");
        if let Some(hit) = self.entries.read().unwrap().get(&key) {
            return *hit;
        }
        let built = build_cost_profile_for_tokens(spec, profile, tokens_per_batch, quant);
        self.entries.write().unwrap().insert(key, built);
        built
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
