//! Fused kernels against their unfused compositions, on a one-thread pool
//! and on a pool with every core. Build with `--no-default-features` to
//! time the sequential fallback.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use fuseformer::kernels::criterion::fused_criterion_in_place;
use fuseformer::kernels::dropout::{BitMask, DropoutMask};
use fuseformer::kernels::elementwise::{bias_dropout_residual_into, bias_relu_dropout_into};
use fuseformer::kernels::layernorm::layernorm_forward_into;
use fuseformer::kernels::softmax::{
    select_softmax_strategy, softmax_rows_into, AttentionMask, RowLayout,
};
use fuseformer::kernels::unfused;
use fuseformer::numerics::rand_uniform;

const ROWS: usize = 512;
const D: usize = 256;
const D_FF: usize = 1024;
const VOCAB: usize = 4096;
const HEADS: usize = 4;
const LEN: usize = 64;

fn random(seed: u64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (4.0 * rand_uniform(seed, i as u64) - 2.0) as f32)
        .collect()
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut sizes = vec![1];
    if all > 1 {
        sizes.push(all);
    }
    sizes
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool");
            (format!("{n}t"), pool)
        })
        .collect()
}

fn layernorm(c: &mut Criterion) {
    let x = random(1, ROWS * D);
    let w = random(2, D);
    let b = random(3, D);
    let mut y = vec![0.0f32; ROWS * D];
    let (mut mu, mut sigma) = (vec![0.0f32; ROWS], vec![0.0f32; ROWS]);
    let mut g = c.benchmark_group("layernorm");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("fused", &name), |bch| {
            pool.install(|| {
                bch.iter(|| {
                    layernorm_forward_into(&x, D, &w, &b, 1e-5, &mut y, &mut mu, &mut sigma)
                        .unwrap()
                })
            })
        });
    }
    g.bench_function("unfused", |bch| {
        bch.iter(|| black_box(unfused::layernorm(&x, D, &w, &b, 1e-5)))
    });
    g.finish();
}

fn softmax(c: &mut Criterion) {
    let batch = ROWS / LEN;
    let scores = random(4, batch * HEADS * LEN * LEN);
    let lens: Vec<usize> = (0..batch).map(|i| LEN - i * 3).collect();
    let layout = RowLayout {
        batch,
        rows_per_batch: HEADS * LEN,
        queries: LEN,
        cols: LEN,
    };
    let mask = AttentionMask::Padding(lens);
    let limits: Vec<usize> = (0..layout.rows()).map(|r| mask.limit(&layout, r)).collect();
    let strategy = select_softmax_strategy(layout.rows(), LEN, false);
    let mut y = vec![0.0f32; scores.len()];
    let mut g = c.benchmark_group("softmax");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("fused", &name), |bch| {
            pool.install(|| {
                bch.iter(|| softmax_rows_into(&scores, layout, &mask, strategy, &mut y).unwrap())
            })
        });
    }
    g.bench_function("unfused", |bch| {
        bch.iter(|| black_box(unfused::softmax(&scores, LEN, &limits)))
    });
    g.finish();
}

fn elementwise(c: &mut Criterion) {
    let x = random(5, ROWS * D);
    let res = random(6, ROWS * D);
    let bias = random(7, D);
    let drop_d = DropoutMask::generate(8, 0.1, ROWS * D).unwrap();
    let h = random(9, ROWS * D_FF);
    let bias_f = random(10, D_FF);
    let drop_f = DropoutMask::generate(11, 0.1, ROWS * D_FF).unwrap();
    let mut y = vec![0.0f32; ROWS * D];
    let mut a = vec![0.0f32; ROWS * D_FF];
    let mut relu = BitMask::zeros(ROWS * D_FF);

    let mut g = c.benchmark_group("bias_dropout_residual");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("fused", &name), |bch| {
            pool.install(|| {
                bch.iter(|| bias_dropout_residual_into(&x, &bias, &res, &drop_d, &mut y))
            })
        });
    }
    g.bench_function("unfused", |bch| {
        bch.iter(|| black_box(unfused::bias_dropout_residual(&x, &bias, &res, &drop_d)))
    });
    g.finish();

    let mut g = c.benchmark_group("bias_relu_dropout");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("fused", &name), |bch| {
            pool.install(|| {
                bch.iter(|| bias_relu_dropout_into(&h, &bias_f, &drop_f, &mut a, &mut relu))
            })
        });
    }
    g.bench_function("unfused", |bch| {
        bch.iter(|| black_box(unfused::bias_relu_dropout(&h, &bias_f, &drop_f)))
    });
    g.finish();
}

fn criterion_op(c: &mut Criterion) {
    let rows = ROWS / 4;
    let logits = random(12, rows * VOCAB);
    let targets: Vec<usize> = (0..rows).map(|r| (r * 7919) % VOCAB).collect();
    let mut buf = logits.clone();
    let mut g = c.benchmark_group("criterion");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("fused", &name), |bch| {
            pool.install(|| {
                bch.iter(|| {
                    buf.copy_from_slice(&logits);
                    fused_criterion_in_place(&mut buf, VOCAB, &targets, 0.1, None, 1.0).unwrap()
                })
            })
        });
    }
    g.bench_function("unfused", |bch| {
        bch.iter(|| black_box(unfused::criterion(&logits, VOCAB, &targets, 0.1)))
    });
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = layernorm, softmax, elementwise, criterion_op
}
criterion_main!(benches);
