use proptest::prelude::*;

use sdtp::model::{ModelConfig, ModelParams};
use sdtp::profiler::{self, bench_toy, flops_prefill, ArchProfile, Pruning};
use sdtp::pruner::{PruneSchedule, ScorerParams};

fn toy(max_seq_len: usize) -> ModelParams<f32> {
    ModelParams::init(&ModelConfig {
        max_seq_len,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn tokens(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 31 + 7) % 256).collect()
}

#[test]
fn identity_schedule_times_match() {
    let p = toy(512);
    let s = PruneSchedule::identity(&[2, 4, 6]).unwrap();
    let sc = ScorerParams::init(128, 3, 0);
    let r = bench_toy(&p, &sc, &s, &tokens(384), 0, 5).unwrap();
    assert!((r.prefill_speedup - 1.0).abs() <= 0.1, "{r:?}");
    assert_eq!(r.overlap, 1.0);
}

#[test]
fn pruning_speeds_up_long_prefill() {
    let n = 4096;
    let p = toy(n);
    let s = PruneSchedule::build(3, 0.7, 2, 2, 8).unwrap();
    let sc = ScorerParams::init(128, 3, 0);
    let r = bench_toy(&p, &sc, &s, &tokens(n), 0, 1).unwrap();
    assert!(r.prefill_speedup > 1.0, "{r:?}");
    let pr = ArchProfile::builtin("toy").unwrap();
    let predicted = 1.0
        / profiler::report(&pr, n, 0, Some(Pruning::new(&s, &pr)), 4)
            .unwrap()
            .prefill_ratio
            .unwrap();
    assert!(
        predicted > 1.0 && r.prefill_speedup < 2.0 * predicted,
        "{r:?} vs {predicted}"
    );
}

/// Direct per-layer sum, written independently of the profiler.
fn naive_prefill(p: &ArchProfile, tokens: &[f64]) -> f64 {
    let d = p.d_model as f64;
    let dkv = d * p.n_kv_heads as f64 / p.n_heads as f64;
    let mlp = if p.gated_mlp { 3.0 } else { 2.0 } * d * p.d_ff as f64;
    let per_token = 2.0 * d * d + 2.0 * d * dkv + mlp;
    let body: f64 = tokens.iter().map(|&t| 2.0 * t * per_token + 4.0 * t * t * d).sum();
    body + 2.0 * tokens[tokens.len() - 1] * d * p.vocab_size as f64
}

proptest! {
    #[test]
    fn unpruned_prefill_matches_direct_sum(n in 1usize..200_000, name in prop::sample::select(vec!["mistral-7b", "llama2-7b", "bloom-7b"])) {
        let p = ArchProfile::builtin(name).unwrap();
        let f = flops_prefill(&p, n, None).unwrap();
        let want = naive_prefill(&p, &vec![n as f64; p.n_layers]);
        prop_assert!((f.total - want).abs() <= 1e-9 * want);
    }

    #[test]
    fn pruned_prefill_never_exceeds_baseline(n in 64usize..150_000, r in 0.3f64..1.0, stages in 1usize..10) {
        let p = ArchProfile::builtin("mistral-7b").unwrap();
        let s = PruneSchedule::build(stages, r, 4, 3, 32).unwrap();
        let base = flops_prefill(&p, n, None).unwrap();
        let pruned = flops_prefill(&p, n, Some(Pruning::new(&s, &p))).unwrap();
        prop_assert!(pruned.total - pruned.scorer <= base.total * (1.0 + 1e-12));
        prop_assert!(pruned.scorer < 0.01 * base.total);
    }
}
