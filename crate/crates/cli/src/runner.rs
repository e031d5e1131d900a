use anyhow::{Context, Result};
use moepipe::{
    build_schedule, build_table, generate_trace_with_routing, make_plan, measured_hot_share,
    plan_placement, prefetch_accuracy_by_layer, simulate, ActivationTrace, BatchGroupConfig,
    LayerAccuracy, Metrics, OraclePrefetcher, PipelinePlan, PlannerOptions, PrefetchProvider,
    Schedule, SimConfig, SimResult, TablePrefetcher, Variant,
};
use rayon::prelude::*;

use crate::config::{BatchCount, ExperimentConfig, PrefetcherKind};

/// Batch group size used for the warm-up trace behind `n = "auto"`.
const PLANNING_BATCHES: usize = 8;

pub struct PointOutput {
    pub variant: Variant,
    pub n: usize,
    pub schedule: Schedule,
    pub result: SimResult,
    pub metrics: Metrics,
    pub accuracy: Vec<LayerAccuracy>,
}

pub fn group(cfg: &ExperimentConfig, n: usize) -> BatchGroupConfig {
    BatchGroupConfig {
        batch_size: cfg.workload.batch_size,
        n_batches: n,
        prompt_len: cfg.workload.prompt_len,
        gen_len: cfg.workload.gen_len,
    }
}

pub fn trace(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<ActivationTrace> {
    let w = &cfg.workload;
    Ok(generate_trace_with_routing(
        &cfg.model,
        &group(cfg, n),
        w.skew,
        seed,
        w.routing_seed,
    )?)
}

/// Runs the planner on a warm-up trace of the configured workload.
pub fn plan(cfg: &ExperimentConfig, variant: Variant) -> Result<PipelinePlan> {
    let warm = trace(cfg, PLANNING_BATCHES, cfg.warmup_seed())?;
    let share = measured_hot_share(&warm, cfg.run.k)?;
    let opts = PlannerOptions {
        k: cfg.run.k,
        load_model: cfg.load_model(share),
        placement: cfg.placement_options(variant),
    };
    Ok(make_plan(
        &cfg.model,
        &cfg.hardware,
        &group(cfg, 1),
        Some(&warm),
        &opts,
    )?)
}

/// Batch count for `variant`: the simple pipeline always runs one batch.
pub fn batch_count(cfg: &ExperimentConfig, variant: Variant) -> Result<usize> {
    if variant == Variant::Simple {
        return Ok(1);
    }
    match cfg.workload.n {
        BatchCount::Fixed(n) => Ok(n),
        BatchCount::Auto => Ok(plan(cfg, variant)?.n_batches),
    }
}

pub fn run_point(cfg: &ExperimentConfig, variant: Variant, n: usize) -> Result<PointOutput> {
    let n = if variant == Variant::Simple { 1 } else { n };
    let ctx = || format!("{} at n = {n}", variant.name());
    let g = group(cfg, n);
    let trace = trace(cfg, n, cfg.workload.seed)?;
    let placement = plan_placement(
        &cfg.model,
        &cfg.hardware,
        &g,
        &cfg.placement_options(variant),
    )
    .with_context(ctx)?;
    let mut provider: Box<dyn PrefetchProvider> = match cfg.run.prefetcher {
        PrefetcherKind::Oracle => Box::new(OraclePrefetcher),
        PrefetcherKind::Table => {
            let warm = self::trace(cfg, n, cfg.warmup_seed())?;
            let mut p = TablePrefetcher::new(build_table(&warm, &cfg.model)?);
            p.online_update = cfg.run.online_update;
            Box::new(p)
        }
    };
    let sc = cfg.schedule_config(variant);
    let schedule = build_schedule(
        &cfg.model,
        &cfg.hardware,
        &placement,
        &trace,
        &sc,
        provider.as_mut(),
    )
    .with_context(ctx)?;
    let sim = SimConfig {
        bandwidth: cfg.run.bandwidth,
        vram_budget: Some(cfg.hardware.vram_capacity),
    };
    let result = simulate(&schedule, &sim).with_context(ctx)?;
    let metrics = Metrics::compute(&schedule, &result, &trace)?;
    let accuracy = prefetch_accuracy_by_layer(&schedule, &trace)?;
    Ok(PointOutput {
        variant,
        n,
        schedule,
        result,
        metrics,
        accuracy,
    })
}

/// Every configured variant at its own batch count, in config order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<PointOutput>> {
    cfg.run
        .variants
        .par_iter()
        .map(|&v| run_point(cfg, v, batch_count(cfg, v)?))
        .collect()
}

/// Every (n, variant) pair of the sweep, ordered by n then config order.
pub fn sweep(cfg: &ExperimentConfig, ns: &[usize]) -> Result<Vec<PointOutput>> {
    let points: Vec<(usize, Variant)> = ns
        .iter()
        .flat_map(|&n| cfg.run.variants.iter().map(move |&v| (n, v)))
        .collect();
    points
        .par_iter()
        .map(|&(n, v)| run_point(cfg, v, n))
        .collect()
}
