use criterion::{criterion_group, criterion_main, Criterion};

use eqvar_core::datagen::{generate_microstructure, solve_elasticity, ElasticSpec};

fn bench_datagen(c: &mut Criterion) {
    let spec = ElasticSpec::default();
    c.bench_function("solve_elasticity 32x32 contrast 10", |b| {
        let micro = generate_microstructure(7, 32, 4.0, 0.4).unwrap();
        b.iter(|| solve_elasticity(&micro, &spec, 1e-4, 10_000).unwrap())
    });
}

criterion_group!(benches, bench_datagen);
criterion_main!(benches);
