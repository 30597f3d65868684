use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ppalab_bench::lattice;
use ppalab_core::kms::ThermalState;
use ppalab_core::propagators::{kms_two_point, retarded, vacuum_two_point};
use ppalab_core::{KleinGordonOp, SpatialTorus};

fn kernels(c: &mut Criterion) {
    let l = lattice();
    let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
    c.bench_function("retarded_8x8", |b| b.iter(|| retarded(black_box(&op))));
    c.bench_function("vacuum_two_point_8x8", |b| b.iter(|| vacuum_two_point(black_box(&op)).unwrap()));
    c.bench_function("kms_two_point_8x8", |b| b.iter(|| kms_two_point(black_box(&op), 1.0).unwrap()));
    let state = ThermalState::new(SpatialTorus::new(1, 64, 0.25).unwrap(), 1.0, 2.0).unwrap();
    c.bench_function("kms_boundary_64_sites", |b| b.iter(|| state.kms_boundary_residual(black_box(&[-1.0, 0.0, 0.5]))));
}

criterion_group!(benches, kernels);
criterion_main!(benches);
