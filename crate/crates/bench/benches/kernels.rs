use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use iclbench_core::construction::{build_construction, gd_step, lsa_forward, LinearModel};
use iclbench_core::models::{forward_distribution, icl_sequence, loss_and_grad};
use iclbench_core::numerics::{matmul, sample_gaussian};
use iclbench_core::tasks::{embed_regression_tokens, sample_demonstrations, sample_regression_task};
use iclbench_core::{ArchSpec, SeededRng, TokenFamily, TransformerParams};

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let mut rng = SeededRng::new(1);
        let a = sample_gaussian(&mut rng, n, n, 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut rng, n, n, 0.0, 1.0).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
    }
    g.finish();
}

fn bench_construction(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let (d_x, d_y, n) = (8, 4, 32);
    let task = sample_regression_task(d_x, d_y, 1.0, 1.0, &mut rng).unwrap();
    let demos = sample_demonstrations(&task, n, &mut rng);
    let xq = sample_gaussian(&mut rng, d_x, 1, 0.0, 1.0).unwrap();
    let w0 = sample_gaussian(&mut rng, d_y, d_x, 0.0, 1.0).unwrap();
    let params = build_construction(&w0, 0.1, n).unwrap();
    let tokens = embed_regression_tokens(&demos, &xq).unwrap();
    let mut attend = vec![true; n + 1];
    attend[n] = false;
    c.bench_function("lsa_forward d_x=8 d_y=4 n=32", |b| {
        b.iter(|| lsa_forward(black_box(&params), black_box(&tokens), &attend).unwrap())
    });
    let model = LinearModel { w: w0.clone(), eta: 0.1 };
    c.bench_function("gd_step d_x=8 d_y=4 n=32", |b| b.iter(|| gd_step(black_box(&model), black_box(&demos)).unwrap()));
}

fn bench_transformer(c: &mut Criterion) {
    let arch = ArchSpec::discrete_default();
    let mut rng = SeededRng::new(3);
    let params = TransformerParams::init(&arch, &mut rng).unwrap();
    let (tokens, targets) = icl_sequence(&TokenFamily::default(), 8, &mut rng).unwrap();
    let mut grad = params.zeros_like();
    c.bench_function("transformer forward (25 tokens)", |b| {
        b.iter(|| forward_distribution(black_box(&params), black_box(&tokens)).unwrap())
    });
    c.bench_function("transformer forward+backward (25 tokens)", |b| {
        b.iter(|| {
            grad.fill(0.0);
            loss_and_grad(black_box(&params), black_box(&tokens), &targets, 1.0, Some(&mut grad)).unwrap()
        })
    });
    c.bench_function("transformer forward+backward (1 token)", |b| {
        b.iter(|| {
            grad.fill(0.0);
            loss_and_grad(black_box(&params), &[3], &[(0, 10)], 1.0, Some(&mut grad)).unwrap()
        })
    });
}

criterion_group!(benches, bench_matmul, bench_construction, bench_transformer);
criterion_main!(benches);
