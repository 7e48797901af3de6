use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use segdiff_bench::random_tensor;
use segdiff_core::autodiff::{gemm, MatRef, Tape};
use segdiff_core::eval::feature_fid;
use segdiff_core::eval::linalg::symmetric_eigen;

fn bench_gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for n in [64usize, 256] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        let mut out = vec![0.0f32; n * n];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                gemm(
                    MatRef::new(a.data(), n, n),
                    MatRef::new(b.data(), n, n),
                    0.0,
                    black_box(&mut out),
                )
            })
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3");
    // (channels, spatial size) at each UNet level of the base-32 denoiser
    for (ch, size) in [(32usize, 32usize), (64, 16), (128, 8)] {
        let x = random_tensor(&[16, ch, size, size], 3);
        let w = random_tensor(&[ch, ch, 3, 3], 4);
        let b = random_tensor(&[ch], 5);
        let id = format!("{ch}ch_{size}px");
        g.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv, bv) = (
                    tape.constant(x.clone()),
                    tape.constant(w.clone()),
                    tape.constant(b.clone()),
                );
                black_box(tape.conv2d(xv, wv, Some(bv), 1, 1).unwrap());
            })
        });
        g.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv, bv) = (
                    tape.param(x.clone()),
                    tape.param(w.clone()),
                    tape.param(b.clone()),
                );
                let y = tape.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
                let loss = tape.mean(y).unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.grad(wv).map(|g| g[0]));
            })
        });
    }
    g.finish();
}

fn bench_fid(c: &mut Criterion) {
    let feats = |seed: u64| -> Vec<Vec<f64>> {
        let t = random_tensor(&[200, 32], seed);
        t.data()
            .chunks(32)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    };
    let (a, b) = (feats(6), feats(7));
    c.bench_function("feature_fid_200x32", |bench| {
        bench.iter(|| black_box(feature_fid(&a, &b).unwrap()))
    });
    let m = random_tensor(&[64, 64], 8);
    let sym: Vec<f64> = (0..64 * 64)
        .map(|k| (m.data()[k] + m.data()[(k % 64) * 64 + k / 64]) as f64)
        .collect();
    c.bench_function("jacobi_eigen_64", |bench| {
        bench.iter(|| black_box(symmetric_eigen(&sym, 64).unwrap()))
    });
}

criterion_group!(benches, bench_gemm, bench_conv, bench_fid);
criterion_main!(benches);
