mod common;

use std::path::Path;

use common::*;
use moepipe::*;
use proptest::prelude::*;

fn expert_computes(s: &Schedule, step: usize, layer: usize) -> Vec<ExpertId> {
    s.ops_on(Stream::Compute)
        .filter(|o| o.kind == OpKind::ComputeExpert && o.step == step && o.layer == layer)
        .filter_map(|o| o.expert)
        .collect()
}

fn build(
    spec: &ModelSpec,
    trace: &ActivationTrace,
    variant: Variant,
    k: usize,
    provider: &mut dyn PrefetchProvider,
) -> Schedule {
    let hw = HardwareProfile::env1();
    let p = streamed_placement(spec, &hw, &trace.meta.group);
    build_schedule(spec, &hw, &p, trace, &config(variant, k), provider).unwrap()
}

/// Three batches of two tokens, one expert per token: hot experts 2 and 4,
/// cold experts first demanded in the order 5, 3, 1.
fn hot_cold_trace(spec: &ModelSpec) -> ActivationTrace {
    let routes = [[2, 5], [4, 3], [2, 1]];
    trace_from_fn(spec, &group(2, 3, 1, 1), |_, _, b, t| vec![routes[b][t]]).unwrap()
}

#[test]
fn hot_experts_run_first_then_colds_in_load_order() {
    let spec = model(1, 6, 1);
    let trace = hot_cold_trace(&spec);
    let s = build(&spec, &trace, Variant::ExpertAware, 2, &mut FixedPrefetcher(vec![2, 4]));
    assert_eq!(expert_computes(&s, 0, 0), vec![2, 4, 5, 3, 1]);

    let gates: Vec<OpId> = s.ops.iter().filter(|o| o.kind == OpKind::ComputeGate).map(|o| o.id).collect();
    let cold: Vec<&StreamOp> = s
        .ops_on(Stream::ExpertLoad)
        .filter(|o| o.kind == OpKind::LoadExpert && !matches!(o.expert, Some(2 | 4)))
        .collect();
    let order: Vec<ExpertId> = cold.iter().filter_map(|o| o.expert).collect();
    assert_eq!(order, vec![5, 3, 1]);
    for (load, gate) in cold.iter().zip(&gates) {
        assert!(load.deps.contains(gate), "load of {:?} waits for gate {gate}", load.expert);
    }
}

#[test]
fn batch_order_without_reordering() {
    let spec = model(1, 6, 1);
    let trace = hot_cold_trace(&spec);
    let s = build(&spec, &trace, Variant::StrawmanNoReorder, 2, &mut FixedPrefetcher(vec![2, 4]));
    assert_eq!(expert_computes(&s, 0, 0), vec![2, 5, 4, 3, 2, 1]);
}

#[test]
fn all_hot_routing_needs_no_cold_loads() {
    let spec = model(2, 8, 2);
    let trace = trace_from_fn(&spec, &group(4, 3, 2, 3), |_, _, _, _| vec![0, 1]).unwrap();
    let s = build(&spec, &trace, Variant::ExpertAware, 2, &mut FixedPrefetcher(vec![0, 1]));
    let loads: Vec<_> = s.ops.iter().filter(|o| o.kind == OpKind::LoadExpert).collect();
    assert_eq!(loads.len(), 2 * s.n_steps * s.n_layers);
    assert!(loads.iter().all(|o| matches!(o.expert, Some(0 | 1))));
}

#[test]
fn full_prefetch_loads_whole_layer_once_per_pass() {
    let spec = model(3, 8, 2);
    let trace = generate_trace(&spec, &group(4, 3, 2, 2), Skew::Zipf { s: 1.2 }, 3).unwrap();
    let s = build(&spec, &trace, Variant::MultibatchFullPrefetch, 2, &mut OraclePrefetcher);
    let moe: Vec<_> = s.ops.iter().filter(|o| o.tensor == Some(TensorKind::MoeLayer)).collect();
    assert_eq!(moe.len(), s.n_steps * s.n_layers);
    for o in moe {
        assert_eq!(o.bytes, spec.tensor_bytes(TensorKind::MoeLayer));
    }
    assert_eq!(s.ops.iter().filter(|o| o.kind == OpKind::LoadExpert).count(), 0);
}

#[test]
fn simple_variant_runs_one_batch() {
    let spec = model(2, 4, 2);
    let hw = HardwareProfile::env1();
    let g = group(4, 2, 1, 1);
    let trace = generate_trace(&spec, &g, Skew::Uniform, 1).unwrap();
    let p = streamed_placement(&spec, &hw, &g);
    let err = build_schedule(&spec, &hw, &p, &trace, &config(Variant::Simple, 1), &mut OraclePrefetcher);
    assert!(matches!(err, Err(Error::Validation(_))));
}

#[test]
fn weight_loads_are_shared_by_the_batch_group() {
    let spec = model(2, 4, 2);
    let one = generate_trace(&spec, &group(4, 1, 1, 2), Skew::Uniform, 1).unwrap();
    let many = generate_trace(&spec, &group(4, 6, 1, 2), Skew::Uniform, 1).unwrap();
    let count = |s: &Schedule| s.ops.iter().filter(|o| o.kind == OpKind::LoadWeights).count();
    let a = build(&spec, &one, Variant::Simple, 1, &mut OraclePrefetcher);
    let b = build(&spec, &many, Variant::ExpertAware, 1, &mut OraclePrefetcher);
    // six batches share the weight loads one batch needs
    assert_eq!(count(&a), count(&b));
}

#[test]
fn out_of_range_prediction_is_rejected() {
    let spec = model(1, 4, 1);
    let trace = generate_trace(&spec, &group(2, 2, 1, 1), Skew::Uniform, 1).unwrap();
    let hw = HardwareProfile::env1();
    let p = streamed_placement(&spec, &hw, &trace.meta.group);
    let r = build_schedule(&spec, &hw, &p, &trace, &config(Variant::ExpertAware, 1), &mut FixedPrefetcher(vec![9]));
    assert!(matches!(r, Err(Error::Validation(_)) | Err(Error::OutOfRange { .. })), "{r:?}");
}

#[test]
fn toy_schedule_matches_golden() {
    let spec = model(2, 2, 1);
    let routes = [[0, 1], [1, 1]];
    let trace = trace_from_fn(&spec, &group(2, 2, 1, 2), |s, l, b, t| vec![routes[b][(t + l + s) % 2]]).unwrap();
    let s = build(&spec, &trace, Variant::ExpertAware, 1, &mut FixedPrefetcher(vec![1]));
    assert!(validate_schedule(&s, &trace).is_empty());
    let text = s.to_text();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy_2x2x2.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden file");
    assert_eq!(text, golden);
}

fn workload() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, u64)> {
    // layers, experts, top_k, batch size, batches, k, seed
    (1usize..4, 2usize..9, 1usize..3, 1usize..6, 1usize..5, 1usize..4, any::<u64>())
        .prop_map(|(l, e, tk, bs, n, k, seed)| (l, e, tk.min(e), bs, n, k.min(e), seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn variants_conserve_expert_work((l, e, tk, bs, n, k, seed) in workload()) {
        let spec = model(l, e, tk);
        let trace = generate_trace(&spec, &group(bs, n, 2, 2), Skew::Zipf { s: 1.1 }, seed).unwrap();
        let single = generate_trace(&spec, &group(bs, 1, 2, 2), Skew::Zipf { s: 1.1 }, seed).unwrap();
        for v in Variant::ALL {
            let t = if v == Variant::Simple { &single } else { &trace };
            let s = build(&spec, t, v, k, &mut OraclePrefetcher);
            for step in 0..s.n_steps {
                for layer in 0..s.n_layers {
                    let tokens: u64 = s.ops.iter()
                        .filter(|o| o.kind == OpKind::ComputeExpert && o.step == step && o.layer == layer)
                        .map(|o| o.tokens)
                        .sum();
                    let routed = (t.meta.group.tokens_in_step(step) * tk) as u64;
                    prop_assert_eq!(tokens, routed);
                }
            }
        }
    }

    #[test]
    fn expert_aware_loads_and_order((l, e, tk, bs, n, k, seed) in workload()) {
        let spec = model(l, e, tk);
        let trace = generate_trace(&spec, &group(bs, n, 2, 2), Skew::Zipf { s: 1.1 }, seed).unwrap();
        let mut pf = TablePrefetcher::new(build_table(&trace, &spec).unwrap());
        let s = build(&spec, &trace, Variant::ExpertAware, k, &mut pf);
        prop_assert!(validate_schedule(&s, &trace).is_empty());
        for step in 0..s.n_steps {
            for layer in 0..s.n_layers {
                let hot = &s.decision(step, layer).unwrap().expert_ids;
                let load = expert_load(&trace, step, layer).unwrap();
                let cold = load.active().filter(|x| !hot.contains(x)).count();
                let loads = s.ops.iter()
                    .filter(|o| o.kind == OpKind::LoadExpert && o.step == step && o.layer == layer)
                    .count();
                prop_assert!(loads <= hot.len() + cold);
                let order = expert_computes(&s, step, layer);
                let first_cold = order.iter().position(|x| !hot.contains(x)).unwrap_or(order.len());
                prop_assert!(order[first_cold..].iter().all(|x| !hot.contains(x)));
            }
        }
    }
}
