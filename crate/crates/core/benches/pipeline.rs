//! End-to-end throughput at desk scale: one full reconstruction and one
//! optimizer step on 64x64 inputs with a 32-channel, two-group model.
//!
//! Compare the threaded and sequential builds with:
//!
//! ```text
//! cargo bench --bench pipeline
//! cargo bench --bench pipeline --no-default-features
//! ```

use std::hint::black_box;
use std::time::Duration;

use criterion::Criterion;

use kscan::data;
use kscan::network::{self, ModelConfig};
use kscan::training::{train_step, AdamW};

fn bench_pipeline(cr: &mut Criterion) {
    let (_mask, samples) = data::phantom_dataset(4, 64, 1, 4, 0.08).unwrap();
    let cfg = ModelConfig { k_groups: 2, patch: 2, channels: 32, ..ModelConfig::default() };
    let (model, mut ps) = network::build_model(&cfg, 0).unwrap();

    let mut group = cr.benchmark_group("pipeline");
    group.sample_size(10).measurement_time(Duration::from_secs(15));

    group.bench_function("reconstruct_64x64", |bench| {
        bench.iter(|| model.reconstruct(&ps, black_box(&samples[0].meas)).unwrap())
    });

    let mut opt = AdamW::new(&ps);
    let batch: Vec<&data::SliceSample> = samples.iter().take(2).collect();
    group.bench_function("train_step_batch2", |bench| {
        bench.iter(|| train_step(&model, &mut ps, &mut opt, black_box(&batch), 1e-3).unwrap())
    });

    group.finish();
}

criterion::criterion_group!(benches, bench_pipeline);
criterion::criterion_main!(benches);
