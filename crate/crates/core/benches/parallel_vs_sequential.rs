use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bustr::eval::Dataset;
use bustr::model::{table_rows, ModelConfig, Params};
use bustr::pipeline::{examples_from_traces, world_inputs};
use bustr::shingler::{split_by_week, ShinglerConfig, WeekAssignment};
use bustr::spatial_grid::LatLng;
use bustr::synthworld::{MetroSpec, World, WorldSpec};
use bustr::trainer::{batch_loss_grad, predict_all};
use bustr::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn small_world() -> WorldSpec {
    WorldSpec {
        seed: 1,
        position_noise_m: 5.0,
        metros: vec![MetroSpec::new(LatLng { lat: 1.3, lng: 103.8 }, 6, 3, 2)],
        ..WorldSpec::default()
    }
}

fn bench(c: &mut Criterion) {
    let world = World::generate(&small_world()).unwrap();
    let inputs = world_inputs(&world).unwrap();

    let mut group = c.benchmark_group("shingle_and_quantize");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                examples_from_traces(inputs.traces.clone(), &inputs.feed, &ShinglerConfig::default(), 3, exec).unwrap()
            })
        });
    }
    group.finish();

    let (q, _) = examples_from_traces(
        inputs.traces.clone(),
        &inputs.feed,
        &ShinglerConfig::default(),
        3,
        Execution::Sequential,
    )
    .unwrap();
    let weeks = WeekAssignment {
        train: vec!["2024-W01".parse().unwrap()],
        validation: vec!["2024-W02".parse().unwrap()],
        test: vec!["2024-W03".parse().unwrap()],
    };
    let s = split_by_week(q, &weeks).unwrap();
    let data = Dataset::build(
        &s.train,
        &s.validation,
        &s.test,
        inputs.feed.timezone,
        &inputs.traffic,
        Execution::Sequential,
    )
    .unwrap();
    let p = Params::init(
        ModelConfig::default(),
        table_rows(&data.vocabs),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let batch: Vec<_> = data.train.iter().take(200).map(|x| (x, None)).collect();

    let mut group = c.benchmark_group("batch_gradient");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_loss_grad(&p, &batch, 25, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("predict_test_set");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_all(&p, &data.test, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
