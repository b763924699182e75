//! Dense versus compiled inference, each with sequential and rayon row
//! partitioning, on an untrained MNIST-shaped MLP with 100x masks.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use freqchain_core::compile::{compile_model, CompileMode};
use freqchain_core::freqreg::MaskFamily;
use freqchain_core::nn::{HiddenBlock, SpatialModel};
use freqchain_core::runtime::{InferenceSession, Parallelism};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARCH: [usize; 4] = [784, 256, 128, 10];
const BATCH: usize = 2_000;

fn masked_model() -> SpatialModel {
    let mut model = SpatialModel::mlp(&ARCH, HiddenBlock::default(), true, 1).unwrap();
    let family = MaskFamily::Rectangular {
        keeps: vec![vec![40, 40], vec![40, 12], vec![12, 10]],
    };
    let plans = model.plans().unwrap();
    model.apply_masks(&family, 0.0, &plans).unwrap();
    model
}

fn inference(c: &mut Criterion) {
    let model = masked_model();
    let compiled = compile_model(&model, CompileMode::Narrow).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = Array2::from_shape_fn((BATCH, ARCH[0]), |_| rng.random::<f64>());

    let mut group = c.benchmark_group("inference");
    group.throughput(Throughput::Elements(BATCH as u64));
    group.sample_size(20);
    for (name, parallelism) in [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)] {
        let sessions = [
            ("dense", InferenceSession::<f64>::dense(&model).unwrap()),
            ("narrow", InferenceSession::<f64>::compiled(&compiled).unwrap()),
        ];
        for (kind, session) in sessions {
            let session = session.with_parallelism(parallelism);
            group.bench_with_input(BenchmarkId::new(kind, name), &batch, |b, x| {
                b.iter(|| session.infer_batch(&x.view()).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
