//! Shared fixtures for the benchmarks.

use ppalab_core::functionals::PolyFunctional;
use ppalab_core::moller_classical::Theory;
use ppalab_core::{build_lattice, KleinGordonOp, LatticeSpec, Orders, PointSet, Result, C64};

/// Eight slices of eight sites with `dt = 0.1`, `dx = 0.2`.
pub fn lattice() -> LatticeSpec {
    build_lattice(8, 0.1, 1, 8, 0.2).expect("fixed lattice is valid")
}

pub fn vacuum(l: &LatticeSpec, max_lambda: usize) -> Result<Theory> {
    Theory::lattice_vacuum(&KleinGordonOp::constant_mass(l, 1.0)?, max_lambda)
}

/// A density that is `1 + 0.1 i` on the listed points and zero elsewhere.
pub fn density(n: usize, points: &[usize]) -> Vec<f64> {
    (0..n).map(|i| if points.contains(&i) { 1.0 + 0.1 * i as f64 } else { 0.0 }).collect()
}

/// `lambda int h phi^k` with `h` from [`density`].
pub fn coupled_local(p: &PointSet, points: &[usize], k: u32, o: Orders) -> Result<PolyFunctional> {
    Ok(PolyFunctional::local(p, &density(p.len(), points), k, o)?.shift(0, &[C64::new(0.0, 0.0), C64::new(1.0, 0.0)]))
}
