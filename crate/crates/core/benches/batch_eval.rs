use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use slotadapt::adaptation::{adapt_step, predict_all, AdaptConfig, AdaptState};
use slotadapt::{generate_dataset, Domain, ExecMode, Image, Model, ModelConfig, Rng, SynthConfig};

fn modes() -> Vec<ExecMode> {
    if cfg!(feature = "parallel") {
        vec![ExecMode::Sequential, ExecMode::Parallel]
    } else {
        vec![ExecMode::Sequential]
    }
}

fn forward(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let params = model.init(&mut Rng::new(1));
    let scenes = generate_dataset(7, Domain::Target, 8, &SynthConfig::default(), ExecMode::Sequential);
    let images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    let mut group = c.benchmark_group("predict_batch8");
    group.sample_size(10);
    for mode in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| predict_all(&model, &params, &images, 3, mode).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let params = model.init(&mut Rng::new(1));
    let scenes = generate_dataset(7, Domain::Target, 8, &SynthConfig::default(), ExecMode::Sequential);
    let images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    let cfg = AdaptConfig { burn_in: 0, ..AdaptConfig::default() };
    let mut group = c.benchmark_group("adapt_step_batch8");
    group.sample_size(10);
    for mode in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter_batched(
                || AdaptState::new(params.clone(), &model, &cfg, 5).unwrap(),
                |mut state| adapt_step(&model, &mut state, &images, &cfg, mode).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
