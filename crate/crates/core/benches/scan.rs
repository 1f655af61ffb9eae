//! Selective-scan kernel throughput.
//!
//! `selective_scan` dispatches rows across threads when the `parallel`
//! feature is on and runs them in place otherwise; `selective_scan_seq` is
//! the always-sequential reference. Run the suite twice to compare:
//!
//! ```text
//! cargo bench --bench scan
//! cargo bench --bench scan --no-default-features
//! ```

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::rngs::StdRng;
use rand::SeedableRng;

use kscan::scan::{selective_scan, selective_scan_seq, SsmParams};
use kscan::tensor::Tensor;

fn case(bsz: usize, d_inner: usize, d_t: usize, d_s: usize, l: usize) -> (Tensor, SsmParams) {
    let mut rng = StdRng::seed_from_u64(0);
    let x = Tensor::uniform(&[bsz, d_inner, l], 1.0, &mut rng);
    let delta = Tensor::uniform(&[bsz, d_t, l], 0.5, &mut rng).map(|v| v.abs() + 0.01);
    let b = Tensor::uniform(&[bsz, d_s, l], 1.0, &mut rng);
    let c = Tensor::uniform(&[bsz, d_s, l], 1.0, &mut rng);
    let a_log = Tensor::uniform(&[d_inner, d_s], 1.0, &mut rng);
    let d_skip = Tensor::uniform(&[d_inner], 1.0, &mut rng);
    (x, SsmParams { delta, b, c, a_log, d_skip })
}

fn bench_scan(cr: &mut Criterion) {
    let mut group = cr.benchmark_group("selective_scan");
    // d_inner = 64 matches a 32-channel model with expansion 2; sequence
    // lengths span one 32x32 map up to one 128x128 map.
    for &l in &[1024usize, 4096, 16384] {
        let (x, p) = case(1, 64, 8, 16, l);
        group.throughput(Throughput::Elements((64 * l) as u64));
        group.bench_with_input(BenchmarkId::new("dispatch", l), &l, |bench, _| {
            bench.iter(|| selective_scan(black_box(&x), black_box(&p)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", l), &l, |bench, _| {
            bench.iter(|| selective_scan_seq(black_box(&x), black_box(&p)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_scan);
criterion_main!(benches);
