//! Sequential vs parallel execution of a full cross-fitted estimate and of
//! the Monte Carlo oracle.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ldml::simlab::study::study_learners;
use ldml::simlab::{generate_dgp, true_quantile_oracle, DgpConfig, NoiseConvention};
use ldml::{quantile_moment, run_ldml, Execution, LdmlConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn estimate(c: &mut Criterion) {
    let table = generate_dgp(&DgpConfig {
        n: 1600,
        seed: 11,
        convention: NoiseConvention::Variance,
    })
    .expect("dgp");
    let model = quantile_moment(2.0 / 3.0).expect("moment");
    let mut group = c.benchmark_group("run_ldml_n1600");
    group.sample_size(10);
    for (name, execution) in MODES {
        let config = LdmlConfig {
            learners: study_learners(),
            seed: 3,
            execution,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_ldml(&table, &model, &config).expect("estimate"))
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_2e6_draws");
    group.sample_size(10);
    for (name, execution) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                true_quantile_oracle(2.0 / 3.0, 2_000_000, 5, NoiseConvention::Variance, execution).expect("oracle")
            })
        });
    }
    group.finish();
}

criterion_group!(benches, estimate, oracle);
criterion_main!(benches);
