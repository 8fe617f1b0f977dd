use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmilm_core::trainer::Trainer;
use pmilm_core::{evaluator, AliasTable, Config, LstmState, Mode, ModelParams, UnigramDistribution};

fn zipf(v: usize) -> UnigramDistribution {
    let counts: Vec<u64> = (1..=v as u64).map(|r| 1_000_000 / r + 1).collect();
    UnigramDistribution::from_counts(&counts, 1.0).unwrap()
}

fn alias(c: &mut Criterion) {
    let mut g = c.benchmark_group("alias");
    for v in [1_000usize, 10_000, 100_000] {
        let table = AliasTable::new(&zipf(v));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = vec![0; 4096];
        g.throughput(Throughput::Elements(buf.len() as u64));
        g.bench_with_input(BenchmarkId::new("fill_4096", v), &v, |b, _| {
            b.iter(|| table.fill(&mut rng, black_box(&mut buf)))
        });
    }
    g.finish();
}

fn small_config(mode: Mode, threads: usize) -> Config {
    let mut cfg = Config::default();
    cfg.model.mode = mode;
    cfg.model.vocab_size = 10_000;
    cfg.model.embed_dim = 64;
    cfg.model.hidden = 64;
    cfg.model.layers = 1;
    cfg.model.dropout = 0.0;
    cfg.model.k = 20;
    cfg.train.batch_size = 16;
    cfg.train.bptt_len = 20;
    cfg.train.threads = threads;
    cfg
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    for (mode, threads) in [(Mode::Pmi, 1), (Mode::Nce, 1), (Mode::Pmi, 4)] {
        let cfg = small_config(mode, threads);
        let dist = zipf(cfg.model.vocab_size);
        let params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, t) = (cfg.train.batch_size, cfg.train.bptt_len);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = cfg.model.vocab_size as u32;
        let inputs = Array2::from_shape_simple_fn((b, t), || rng.random_range(0..v));
        let targets = Array2::from_shape_simple_fn((b, t), || rng.random_range(0..v));
        let mut trainer = Trainer::new(cfg, params, &dist).unwrap();
        let mut state = LstmState::zeros(&trainer.params, b);
        g.throughput(Throughput::Elements((b * t) as u64));
        g.bench_function(format!("{mode}_threads{threads}"), |bench| {
            bench.iter(|| trainer.step(inputs.view(), targets.view(), &mut state, &dist, 0.01).unwrap())
        });
    }
    g.finish();
}

fn conditional(c: &mut Criterion) {
    let mut g = c.benchmark_group("conditional_distribution");
    for mode in [Mode::Pmi, Mode::Nce] {
        let cfg = small_config(mode, 1);
        let dist = zipf(cfg.model.vocab_size);
        let params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx: Vec<f64> = (0..cfg.model.hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.bench_function(format!("{mode}_v10000"), |b| {
            b.iter(|| evaluator::conditional_distribution(&params, black_box(&ctx), &dist))
        });
    }
    g.finish();
}

criterion_group!(benches, alias, train_step, conditional);
criterion_main!(benches);
