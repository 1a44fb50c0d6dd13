use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cohortsynth::eval::{pearson_matrix, repeated_sampling_experiment, ExperimentConfig};
use cohortsynth::pipeline::{encode_groups, learn_network, train_groups, Method, Prepared, RunConfig, Synthesizer};
use cohortsynth::schema::CohortSchema;
use cohortsynth::surrogate::generate_cohort;
use cohortsynth::Exec;

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn setup() -> (CohortSchema, RunConfig, Prepared) {
    let schema = CohortSchema::default();
    let mut cfg = RunConfig { method: Method::Mt, ..Default::default() };
    cfg.surrogate.n_participants = 300;
    cfg.hivae.epochs = 5;
    cfg.bn.restarts = 4;
    let long = generate_cohort(&cfg.surrogate, &schema, Exec::Parallel).unwrap();
    let prep = Prepared::from_long(&long, &schema).unwrap();
    (schema, cfg, prep)
}

fn benches(c: &mut Criterion) {
    let (schema, cfg, prep) = setup();

    let mut g = c.benchmark_group("group_training");
    g.sample_size(10);
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_groups(&prep, &schema, &cfg, exec).unwrap())
        });
    }
    g.finish();

    let models = train_groups(&prep, &schema, &cfg, Exec::Parallel).unwrap();
    let embeddings = encode_groups(&models, &prep, &schema, Exec::Parallel).unwrap();
    let mut g = c.benchmark_group("structure_restarts");
    g.sample_size(10);
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                learn_network(&models, &embeddings, &prep, &schema, &cfg.bn_config(), exec)
                    .unwrap()
            })
        });
    }
    g.finish();

    let synth = Synthesizer::fit(&prep, &schema, &cfg, Exec::Parallel).unwrap();
    let experiment = ExperimentConfig {
        k: 8,
        outcome: "ZUZU_p".into(),
        predictor: "age".into(),
        grid: (0..=60).map(|i| 3.0 + 0.25 * i as f64).collect(),
        seed: 1,
        max_time: None,
        alpha: 0.05,
    };
    let sampler = |s: u64| synth.sample(300, s, Exec::Sequential);
    let mut g = c.benchmark_group("resampling");
    g.sample_size(10);
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| repeated_sampling_experiment(&sampler, &schema, &experiment, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("correlation_matrix");
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pearson_matrix(&prep.raw, &schema, exec)));
    }
    g.finish();
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
