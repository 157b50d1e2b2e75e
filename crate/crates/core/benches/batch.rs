//! Per-sample generator forward/backward over a batch: sequential map
//! against the rayon map.

use std::hint::black_box;

use alrgan::config::GanConfig;
use alrgan::data::Split;
use alrgan::gan::train::{sample_input, sample_rng};
use alrgan::gan::{Dataset, Mode, Model, SampleInput};
use alrgan::nn::{Binder, Group};
use alrgan::{par, Result, Tape};
use criterion::{criterion_group, criterion_main, Criterion};

fn sample_grad(model: &Model, input: &SampleInput) -> Result<f64> {
    let mut tape = Tape::new();
    let mut p = Binder::new(&model.store, &[Group::Generator]);
    let g = model.generate(&mut tape, &mut p, input, Mode::Train)?;
    let last = *g.images.last().expect("at least one stage");
    let loss = tape.mean(last);
    tape.backward(loss)?;
    Ok(p.grads(&tape).iter().map(|(_, g)| g.iter().sum::<f64>()).sum())
}

fn batch(c: &mut Criterion) {
    let cfg = GanConfig { batch_size: 8, ..GanConfig::default() };
    let model = Model::new(&cfg).unwrap();
    let data = Dataset::build(&cfg, cfg.batch_size, Split::Train).unwrap();
    let inputs: Vec<SampleInput> = data
        .pairs
        .iter()
        .enumerate()
        .map(|(k, pair)| sample_input(&model, pair, &mut sample_rng(cfg.seed, 0, k), true).unwrap())
        .collect();
    let mut group = c.benchmark_group(format!("batch{}_threads{}", inputs.len(), par::threads()));
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| par::sequential::try_map(black_box(&inputs), |x| sample_grad(&model, x)).unwrap())
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        b.iter(|| par::parallel::try_map(black_box(&inputs), |x| sample_grad(&model, x)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
