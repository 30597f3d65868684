use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ppalab_core::modes::{adiabatic_mode, integrate_mode, r_lambda_iterate, TimeGrid};
use ppalab_core::{FrequencyProfile, Switch};

fn modes(c: &mut Criterion) {
    let p = FrequencyProfile::new(1.0, 0.25, 1.0, 10.0, Switch::Smoothstep).unwrap();
    let grid = TimeGrid::for_profile(&p, 2.0, 4.0).unwrap();
    c.bench_function("integrate_mode_mu10", |b| b.iter(|| integrate_mode(black_box(&p), &grid).unwrap()));
    let ta = adiabatic_mode(&p, &grid).unwrap();
    c.bench_function("r_lambda_three_terms_mu10", |b| b.iter(|| r_lambda_iterate(black_box(&p), &ta, 3).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = modes
}
criterion_main!(benches);
