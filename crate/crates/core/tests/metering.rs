use l1pc::analyzer;
use l1pc::metering::{metered_forward, Variant};
use l1pc::model::{Layout, Model, ModelConfig};
use l1pc::transform_model;

fn configs() -> Vec<ModelConfig> {
    let mut small_mqa = ModelConfig::toy(Layout::Parallel);
    small_mqa.dim = 32;
    small_mqa.n_kv_heads = 1;
    small_mqa.hidden_dim = 48;
    vec![ModelConfig::toy(Layout::Serial), ModelConfig::toy(Layout::Parallel), small_mqa]
}

#[test]
fn metered_reads_match_cost_model() {
    for cfg in configs() {
        let m = Model::random(cfg.clone(), 4).unwrap();
        let t = transform_model(&m).unwrap();
        let (d, e) = (cfg.dim as u64, cfg.kv_dim() as u64);
        let eliminated = analyzer::eliminated_weights(&cfg).unwrap();
        for batch in [1u64, 2, 8, 16] {
            let reads = analyzer::reads(&cfg, batch).unwrap();
            let base = metered_forward(&m, batch as usize, 1, 7).unwrap();
            assert_eq!(base.variant, Variant::Baseline);
            assert_eq!(base.embedding_or_table_scalar_reads, batch * d);
            assert_eq!(base.layer1_eliminated_region_weight_reads, eliminated);
            assert_eq!(base.layer1_eliminated_region_raw_reads, batch * eliminated);
            assert_eq!(base.reads_per_step(), reads.without);

            let fast = metered_forward(&t, batch as usize, 1, 7).unwrap();
            assert_eq!(fast.variant, Variant::Precomputed);
            assert_eq!(fast.embedding_or_table_scalar_reads, batch * 2 * (d + e));
            assert_eq!(fast.layer1_eliminated_region_weight_reads, 0);
            assert_eq!(fast.reads_per_step(), reads.with_);
        }
    }
}

#[test]
fn toy_table_reads_are_192_per_token() {
    let cfg = ModelConfig::toy(Layout::Serial);
    assert_eq!((cfg.dim, cfg.kv_dim()), (64, 32));
    let t = transform_model(&Model::random(cfg, 1).unwrap()).unwrap();
    assert_eq!(metered_forward(&t, 1, 1, 0).unwrap().embedding_or_table_scalar_reads, 192);
}

#[test]
fn counters_scale_with_steps_and_batch() {
    let cfg = ModelConfig::toy(Layout::Parallel);
    let m = Model::random(cfg.clone(), 4).unwrap();
    let one = metered_forward(&m, 1, 5, 3).unwrap();
    let eight = metered_forward(&m, 8, 5, 3).unwrap();
    assert_eq!(eight.embedding_or_table_scalar_reads, 8 * one.embedding_or_table_scalar_reads);
    assert_eq!(eight.layer1_eliminated_region_raw_reads, 8 * one.layer1_eliminated_region_raw_reads);
    // Weights are read once per batch step regardless of batch size.
    assert_eq!(eight.layer1_eliminated_region_weight_reads, one.layer1_eliminated_region_weight_reads);
    assert_eq!(one.layer1_eliminated_region_weight_reads, 5 * analyzer::eliminated_weights(&cfg).unwrap());
}

#[test]
fn flop_savings_are_twice_the_eliminated_weights() {
    for cfg in configs() {
        let m = Model::random(cfg.clone(), 9).unwrap();
        let t = transform_model(&m).unwrap();
        let (batch, steps) = (3u64, 6u64);
        let base = metered_forward(&m, batch as usize, steps as usize, 1).unwrap();
        let fast = metered_forward(&t, batch as usize, steps as usize, 1).unwrap();
        let eliminated = analyzer::eliminated_weights(&cfg).unwrap();
        assert_eq!(base.flops_layer1 - fast.flops_layer1, 2 * eliminated * batch * steps);
    }
}

#[test]
fn metering_is_deterministic() {
    let m = Model::random(ModelConfig::toy(Layout::Serial), 2).unwrap();
    let a = metered_forward(&m, 4, 3, 11).unwrap();
    let b = metered_forward(&m, 4, 3, 11).unwrap();
    assert!(a.same_counts(&b));
}

#[test]
fn moe_baseline_reads_router_and_selected_experts_only() {
    let cfg = ModelConfig { n_experts: 4, experts_top_k: 2, ..ModelConfig::toy(Layout::Parallel) };
    let m = Model::random(cfg.clone(), 6).unwrap();
    let r = metered_forward(&m, 1, 1, 0).unwrap();
    let (d, e, h) = (64u64, 32u64, 128u64);
    let expert = 2 * d * h;
    assert_eq!(r.layer1_eliminated_region_weight_reads, d * d + 2 * d * e + d * 4 + 2 * expert);
}
