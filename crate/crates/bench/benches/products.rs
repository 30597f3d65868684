use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ppalab_bench::{coupled_local, density, lattice, vacuum};
use ppalab_core::functionals::{star_product, time_ordered_product, PolyFunctional};
use ppalab_core::moller_quantum::{BetaMap, Interaction};
use ppalab_core::{Orders, PointSet};

fn products(c: &mut Criterion) {
    let l = lattice();
    let o = Orders::new(2, 2);
    let t = vacuum(&l, 2).unwrap();
    let p = PointSet::from_lattice(&l);
    let n = p.len();
    let f = PolyFunctional::local(&p, &density(n, &[l.index(5, 1), l.index(6, 2)]), 4, o).unwrap();
    let g = PolyFunctional::local(&p, &density(n, &[l.index(2, 1)]), 4, o).unwrap();
    c.bench_function("star_quartic_pair", |b| b.iter(|| star_product(black_box(&f), black_box(&g), &t.plus).unwrap()));
    let feynman = t.feynman();
    c.bench_function("time_ordered_quartic_pair", |b| b.iter(|| time_ordered_product(black_box(&f), black_box(&g), &feynman).unwrap()));
    let v = coupled_local(&p, &[l.index(3, 0), l.index(3, 1)], 4, o).unwrap();
    c.bench_function("interaction_forward_quartic", |b| {
        b.iter(|| {
            let it = Interaction::new(&t, black_box(&v)).unwrap();
            it.forward(&f).unwrap()
        })
    });
    let mass = density(n, &[l.index(2, 1), l.index(2, 2)]);
    c.bench_function("beta_map_build_and_apply", |b| {
        b.iter(|| {
            let beta = BetaMap::new(&t, black_box(&mass), o).unwrap();
            beta.apply(&f).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = products
}
criterion_main!(benches);
