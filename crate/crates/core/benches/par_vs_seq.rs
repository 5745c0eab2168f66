//! Fan-out of independent forwards: `par::map` against `par::map_seq`.
//! Without the `parallel` feature both paths are sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use memlab_core::model::{ModelConfig, Transformer};
use memlab_core::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> Transformer {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 128,
        n_heads: 4,
        d_head: 32,
        d_mlp: 512,
        vocab_size: 258,
        max_context: 128,
        tie_embeddings: false,
    };
    Transformer::init(cfg, 0).expect("valid config")
}

fn prompts(n: usize, len: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..258)).collect()).collect()
}

fn bench(c: &mut Criterion) {
    let m = model();
    let mut g = c.benchmark_group("forwards");
    g.sample_size(10);
    for n in [8usize, 32] {
        let xs = prompts(n, 64);
        let f = |x: &Vec<u32>| m.predict_next(x).expect("forward");
        g.bench_with_input(BenchmarkId::new("parallel", n), &xs, |b, xs| b.iter(|| par::map(xs, f)));
        g.bench_with_input(BenchmarkId::new("sequential", n), &xs, |b, xs| b.iter(|| par::map_seq(xs, f)));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
