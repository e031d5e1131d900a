#![allow(dead_code)]

use moepipe::*;

/// Mixtral-8x7B shaped model cut down to `n_layers`, with `n_experts`.
pub fn model(n_layers: usize, n_experts: usize, top_k: usize) -> ModelSpec {
    ModelSpec {
        name: format!("test-{n_layers}x{n_experts}"),
        n_layers,
        n_experts_per_layer: n_experts,
        top_k,
        ..ModelSpec::mixtral_8x7b()
    }
}

pub fn group(
    batch_size: usize,
    n_batches: usize,
    prompt_len: usize,
    gen_len: usize,
) -> BatchGroupConfig {
    BatchGroupConfig {
        batch_size,
        n_batches,
        prompt_len,
        gen_len,
    }
}

/// Everything streamed from DRAM, KV cache off the GPU.
pub fn streamed_placement(
    spec: &ModelSpec,
    hw: &HardwareProfile,
    g: &BatchGroupConfig,
) -> PlacementPlan {
    let opts = PlacementOptions {
        fill_vram: false,
        kv_offload: true,
        ..PlacementOptions::default()
    };
    plan_placement(spec, hw, g, &opts).expect("placement")
}

pub fn run(
    spec: &ModelSpec,
    hw: &HardwareProfile,
    placement: &PlacementPlan,
    trace: &ActivationTrace,
    cfg: &ScheduleConfig,
    provider: &mut dyn PrefetchProvider,
) -> (Schedule, SimResult, Metrics) {
    let s = build_schedule(spec, hw, placement, trace, cfg, provider).expect("schedule");
    let r = simulate(&s, &SimConfig::default()).expect("simulate");
    let m = Metrics::compute(&s, &r, trace).expect("metrics");
    (s, r, m)
}

pub fn config(variant: Variant, k: usize) -> ScheduleConfig {
    ScheduleConfig {
        variant,
        offload: OffloadMode::Immediate,
        k,
        quant: None,
        kv_policy: KvPolicy::Full,
    }
}
