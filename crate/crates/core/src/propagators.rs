//! Discrete Klein-Gordon operator and its propagator family.
//!
//! The operator is `(phi(t+1) - 2 phi(t) + phi(t-1)) / dt^2 - nabla^2 phi + M phi` with the
//! spatial lattice Laplacian and open time boundaries. The retarded kernel is the exact
//! inverse obtained by forward substitution in time; the two-point kernels are built from
//! exact positive-frequency solutions of the discrete time stencil, so their antisymmetric
//! part equals half the causal kernel to rounding.
//!
//! Kernels are matrices `K(x, y)` with respect to the measure: an operator acts on fields
//! by `(K f)(x) = sum_y K(x, y) f(y) w_y`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{DensityFunction, Field, LatticeSpec, PointSet, SpatialTorus};
use crate::series::C64;

/// Which member of the propagator family a kernel represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Retarded,
    Advanced,
    Causal,
    Hadamard,
    Thermal,
    Feynman,
    Deformation,
}

/// Two-point kernel over the points of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct BiKernel {
    pub kind: KernelKind,
    pub matrix: DMatrix<C64>,
}

impl BiKernel {
    pub fn new(kind: KernelKind, matrix: DMatrix<C64>) -> Self {
        Self { kind, matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Writes the matrix as CSV rows `row, col, re, im` for nonzero entries.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "row,col,re,im")?;
        for j in 0..self.matrix.ncols() {
            for i in 0..self.matrix.nrows() {
                let z = self.matrix[(i, j)];
                if z.re != 0.0 || z.im != 0.0 {
                    writeln!(out, "{i},{j},{:.17e},{:.17e}", z.re, z.im)?;
                }
            }
        }
        Ok(())
    }
}

/// Largest entry modulus of a complex matrix.
pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Smallest eigenvalue of the hermitian part `(K + K^dagger) / 2`.
pub fn hermitian_min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    nalgebra::SymmetricEigen::new(h).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Discrete Klein-Gordon operator with a (possibly site-dependent) mass profile.
#[derive(Clone, Debug, PartialEq)]
pub struct KleinGordonOp {
    pub lattice: LatticeSpec,
    pub mass2: Vec<f64>,
}

/// Builds the operator for a real mass profile over the lattice sites.
pub fn build_operator(lattice: &LatticeSpec, mass: &DensityFunction) -> Result<KleinGordonOp> {
    if mass.values.len() != lattice.sites() {
        return Err(Error::Mismatch(format!("mass profile has {} values for {} sites", mass.values.len(), lattice.sites())));
    }
    if mass.values.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidArgument("mass profile must be finite".into()));
    }
    Ok(KleinGordonOp { lattice: *lattice, mass2: mass.values.clone() })
}

impl KleinGordonOp {
    pub fn constant_mass(lattice: &LatticeSpec, mass2: f64) -> Result<Self> {
        build_operator(lattice, &DensityFunction::constant(lattice.sites(), mass2))
    }

    /// The operator plus a mass perturbation.
    pub fn perturbed(&self, extra: &DensityFunction) -> Result<Self> {
        if extra.values.len() != self.mass2.len() {
            return Err(Error::Mismatch("mass perturbation has the wrong length".into()));
        }
        Ok(Self { lattice: self.lattice, mass2: self.mass2.iter().zip(extra.values.iter()).map(|(a, b)| a + b).collect() })
    }

    /// The common mass squared if the profile is constant.
    pub fn uniform_mass2(&self) -> Option<f64> {
        let m0 = self.mass2[0];
        self.mass2.iter().all(|m| *m == m0).then_some(m0)
    }

    /// Full operator matrix, acting on site values without measure factors.
    pub fn matrix(&self) -> DMatrix<f64> {
        let l = &self.lattice;
        let n = l.sites();
        let ns = l.spatial_sites();
        let torus = l.torus;
        let inv_dt2 = 1.0 / (l.dt * l.dt);
        let inv_dx2 = 1.0 / (torus.dx * torus.dx);
        let mut p = DMatrix::<f64>::zeros(n, n);
        for t in 0..l.n_t {
            for s in 0..ns {
                let i = l.index(t, s);
                p[(i, i)] += -2.0 * inv_dt2 + self.mass2[i];
                if t + 1 < l.n_t {
                    p[(i, l.index(t + 1, s))] += inv_dt2;
                }
                if t > 0 {
                    p[(i, l.index(t - 1, s))] += inv_dt2;
                }
                for axis in 0..torus.d {
                    let mut step = [0i64; 3];
                    step[axis] = 1;
                    let up = torus.shift(s, &step);
                    step[axis] = -1;
                    let down = torus.shift(s, &step);
                    p[(i, i)] += 2.0 * inv_dx2;
                    p[(i, l.index(t, up))] -= inv_dx2;
                    p[(i, l.index(t, down))] -= inv_dx2;
                }
            }
        }
        p
    }

    /// `P f` on site values.
    pub fn apply(&self, f: &Field) -> Result<Field> {
        if f.lattice != self.lattice {
            return Err(Error::Mismatch("field and operator lattices differ".into()));
        }
        let p = self.matrix();
        let v = nalgebra::DVector::from_vec(f.values.clone());
        let pc = p.map(|x| C64::new(x, 0.0));
        Ok(Field { lattice: self.lattice, values: (pc * v).iter().cloned().collect() })
    }

    /// Largest spatial frequency `sqrt(max mass^2 + max Laplacian eigenvalue)`.
    pub fn max_frequency(&self) -> f64 {
        let m = self.mass2.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
        (m + self.lattice.torus.max_laplacian_eigenvalue()).sqrt()
    }
}

/// Exact retarded kernel: `P (mu G) = 1` on every slice whose successor is on the grid,
/// with `G(t, s) = 0` for `t <= s`.
pub fn retarded(op: &KleinGordonOp) -> BiKernel {
    let l = &op.lattice;
    let n = l.sites();
    let ns = l.spatial_sites();
    let torus = l.torus;
    let dt2 = l.dt * l.dt;
    let inv_dx2 = 1.0 / (torus.dx * torus.dx);
    let source = dt2 / l.measure();
    let neighbours: Vec<Vec<usize>> = (0..ns)
        .map(|s| {
            let mut v = Vec::new();
            for axis in 0..torus.d {
                let mut step = [0i64; 3];
                step[axis] = 1;
                v.push(torus.shift(s, &step));
                step[axis] = -1;
                v.push(torus.shift(s, &step));
            }
            v
        })
        .collect();
    let mut g = DMatrix::<f64>::zeros(n, n);
    for t in 0..l.n_t - 1 {
        for s in 0..ns {
            let row = l.index(t, s);
            let next = l.index(t + 1, s);
            for col in 0..n {
                let cur = g[(row, col)];
                let prev = if t > 0 { g[(l.index(t - 1, s), col)] } else { 0.0 };
                let mut lap = 2.0 * torus.d as f64 * cur;
                for &nb in &neighbours[s] {
                    lap -= g[(l.index(t, nb), col)];
                }
                lap *= inv_dx2;
                let mut v = 2.0 * cur - prev - dt2 * (lap + op.mass2[row] * cur);
                if col == row {
                    v += source;
                }
                g[(next, col)] = v;
            }
        }
    }
    BiKernel::new(KernelKind::Retarded, g.map(|x| C64::new(x, 0.0)))
}

/// Advanced kernel, the transpose of the retarded one.
pub fn advanced(op: &KleinGordonOp) -> BiKernel {
    let r = retarded(op);
    BiKernel::new(KernelKind::Advanced, r.matrix.transpose())
}

/// Causal kernel `retarded - advanced`.
pub fn causal(op: &KleinGordonOp) -> BiKernel {
    let r = retarded(op);
    BiKernel::new(KernelKind::Causal, &r.matrix - r.matrix.transpose())
}

/// Feynman kernel `hadamard + i advanced`.
pub fn feynman(hadamard: &BiKernel, advanced: &BiKernel) -> BiKernel {
    BiKernel::new(KernelKind::Feynman, &hadamard.matrix + advanced.matrix.map(|z| z * C64::new(0.0, 1.0)))
}

/// Residual of `P (mu K) = 1` restricted to rows with time index in `rows`.
pub fn identity_residual(op: &KleinGordonOp, kernel: &BiKernel, rows: std::ops::Range<usize>) -> f64 {
    let l = &op.lattice;
    let p = op.matrix().map(|x| C64::new(x, 0.0));
    let prod = p * &kernel.matrix * C64::new(l.measure(), 0.0);
    let ns = l.spatial_sites();
    let mut worst: f64 = 0.0;
    for i in rows.start * ns..rows.end.min(l.n_t) * ns {
        for j in 0..l.sites() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((prod[(i, j)] - target).norm());
        }
    }
    worst
}

/// Time discretisation underlying a mode basis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TimeStepping {
    /// Exact solutions of the central second difference with step `dt`.
    Lattice { dt: f64 },
    /// Continuous time with lattice space.
    Continuous,
}

/// Per-mode data of a free two-point function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub mode: usize,
    pub k: Vec<f64>,
    /// Frequency `sqrt(k_hat^2 + m^2)` of the spatially discrete operator.
    pub omega: f64,
    /// Frequency of the exact discrete-time solution.
    pub omega_tilde: f64,
    /// Normalisation `c` in `Delta+_k(t, s) = c e^{i omega_tilde (t - s)}`.
    pub amplitude: f64,
    /// Bose factor, zero for the vacuum.
    pub n_beta: f64,
}

/// Spatial modes with their discrete frequencies and occupation numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeBasis {
    pub torus: SpatialTorus,
    pub mass2: f64,
    pub stepping: TimeStepping,
    pub beta: Option<f64>,
    pub modes: Vec<ModeRecord>,
}

/// Bose factor `1 / (e^{beta w} - 1)`.
pub fn bose(beta: f64, omega: f64) -> f64 {
    1.0 / (beta * omega).exp_m1()
}

impl ModeBasis {
    /// Builds the modes; the massless zero mode is dropped when `exclude_zero_mode` is set
    /// and rejected otherwise.
    pub fn new(torus: SpatialTorus, mass2: f64, stepping: TimeStepping, beta: Option<f64>, exclude_zero_mode: bool) -> Result<Self> {
        if !(mass2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("mass squared {mass2} must be non-negative")));
        }
        if let Some(b) = beta {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::InvalidBeta(b));
            }
        }
        let mut modes = Vec::new();
        for mode in 0..torus.sites() {
            let w2 = torus.laplacian_eigenvalue(mode) + mass2;
            if w2 <= 0.0 {
                if exclude_zero_mode {
                    continue;
                }
                return Err(Error::MasslessZeroMode);
            }
            let omega = w2.sqrt();
            let (omega_tilde, amplitude) = match stepping {
                TimeStepping::Lattice { dt } => {
                    let x = omega * dt / 2.0;
                    if x >= 1.0 {
                        return Err(Error::Unstable(omega * dt));
                    }
                    let wt = 2.0 / dt * x.asin();
                    (wt, dt / (2.0 * (wt * dt).sin()))
                }
                TimeStepping::Continuous => (omega, 1.0 / (2.0 * omega)),
            };
            let n_beta = beta.map_or(0.0, |b| bose(b, omega_tilde));
            modes.push(ModeRecord { mode, k: torus.momentum(mode).to_vec(), omega, omega_tilde, amplitude, n_beta });
        }
        Ok(Self { torus, mass2, stepping, beta, modes })
    }

    /// Thermal version of the same modes.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.torus, self.mass2, self.stepping, Some(beta), self.modes.len() < self.torus.sites())
    }

    /// Two-point kernel evaluator for these modes.
    pub fn kernel(&self) -> ModeKernel {
        ModeKernel { basis: self.clone(), shift: 0.0 }
    }

    /// Discrete positive-frequency solution `u_k(t) = sqrt(c) e^{-i omega_tilde t}`.
    pub fn mode_function(&self, idx: usize, t: f64) -> C64 {
        let m = &self.modes[idx];
        C64::from_polar(m.amplitude.sqrt(), -m.omega_tilde * t)
    }

    /// Per-mode JSON records `{k, omega_tilde, n_beta}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.modes.iter().map(|m| serde_json::json!({"k": m.k, "omega_tilde": m.omega_tilde, "n_beta": m.n_beta})).collect(),
        )
    }

    /// Coincidence value of the thermal minus vacuum kernel, `sum_k 2 c_k n_k / V`.
    pub fn thermal_coincidence(&self) -> f64 {
        self.modes.iter().map(|m| 2.0 * m.amplitude * m.n_beta).sum::<f64>() / self.torus.volume()
    }
}

/// Mode-analytic two-point kernel, evaluable at complex time separations.
///
/// `value(tau, x, y) = V^{-1} sum_k e^{i k (x - y)} c_k [(1 + n_k) e^{i w (tau + i u)} + n_k e^{-i w (tau + i u)}]`
/// where `u` is the imaginary shift set by [`ModeKernel::continued`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModeKernel {
    pub basis: ModeBasis,
    pub shift: f64,
}

impl ModeKernel {
    /// Kernel continued by an additional imaginary time `u`, allowed in `[0, beta]`.
    pub fn continued(&self, u: f64) -> Result<Self> {
        let beta = self.basis.beta.unwrap_or(f64::INFINITY);
        let total = self.shift + u;
        if !(-1e-12..=beta + 1e-12).contains(&total) {
            return Err(Error::OffsetOutOfRange { u: total, beta });
        }
        Ok(Self { basis: self.basis.clone(), shift: total })
    }

    /// Per-mode coefficients `(a_k, b_k)` of `e^{i w tau}` and `e^{-i w tau}` at shift `v`.
    fn coefficients(&self, v: f64) -> Vec<(f64, f64)> {
        self.basis
            .modes
            .iter()
            .map(|m| {
                let w = m.omega_tilde;
                (m.amplitude * (1.0 + m.n_beta) * (-w * v).exp(), m.amplitude * m.n_beta * (w * v).exp())
            })
            .collect()
    }

    /// Kernel value at real time separation `tau` between spatial sites `s1` and `s2`.
    pub fn value(&self, tau: f64, s1: usize, s2: usize) -> C64 {
        self.value_shifted(tau, 0.0, s1, s2)
    }

    /// Kernel value at `tau + i (shift + v)`.
    pub fn value_shifted(&self, tau: f64, v: f64, s1: usize, s2: usize) -> C64 {
        let torus = &self.basis.torus;
        let mut acc = C64::new(0.0, 0.0);
        for (m, (a, b)) in self.basis.modes.iter().zip(self.coefficients(self.shift + v)) {
            let phase = C64::from_polar(1.0, torus.phase(m.mode, s1, s2));
            let w = m.omega_tilde * tau;
            acc += phase * (C64::from_polar(a, w) + C64::from_polar(b, -w));
        }
        acc / torus.volume()
    }

    /// Matrix `K(p, q)` over a point set, at the stored shift plus `v`.
    pub fn matrix_shifted(&self, points: &PointSet, v: f64) -> DMatrix<C64> {
        let n = points.len();
        let torus = &self.basis.torus;
        let mut out = DMatrix::<C64>::zeros(n, n);
        for (m, (a, b)) in self.basis.modes.iter().zip(self.coefficients(self.shift + v)) {
            // e^{i k x_p} e^{i w t_p}
            let u: Vec<C64> = (0..n)
                .map(|p| C64::from_polar(1.0, torus.phase(m.mode, points.sites[p], 0) + m.omega_tilde * points.times[p]))
                .collect();
            for q in 0..n {
                let uq = u[q];
                for p in 0..n {
                    let up = u[p];
                    out[(p, q)] += up * uq.conj() * a + (up * uq.conj()).conj() * b;
                }
            }
        }
        out / C64::new(torus.volume(), 0.0)
    }

    /// Block `K(p, q)` for `p` in `rows` and `q` in `cols`, at the stored shift plus `v`.
    pub fn block_shifted(&self, points: &PointSet, rows: &[u32], cols: &[u32], v: f64) -> DMatrix<C64> {
        let torus = &self.basis.torus;
        let mut out = DMatrix::<C64>::zeros(rows.len(), cols.len());
        for (m, (a, b)) in self.basis.modes.iter().zip(self.coefficients(self.shift + v)) {
            let wave = |p: &u32| {
                let p = *p as usize;
                C64::from_polar(1.0, torus.phase(m.mode, points.sites[p], 0) + m.omega_tilde * points.times[p])
            };
            let ur: Vec<C64> = rows.iter().map(wave).collect();
            let uc: Vec<C64> = cols.iter().map(wave).collect();
            for (j, uq) in uc.iter().enumerate() {
                for (i, up) in ur.iter().enumerate() {
                    let z = up * uq.conj();
                    out[(i, j)] += z * a + z.conj() * b;
                }
            }
        }
        out / C64::new(torus.volume(), 0.0)
    }

    pub fn matrix(&self, points: &PointSet) -> DMatrix<C64> {
        self.matrix_shifted(points, 0.0)
    }

    /// Causal kernel `-i (K - K^T)` of the unshifted kernel.
    pub fn causal_matrix(&self, points: &PointSet) -> DMatrix<C64> {
        let k = self.matrix(points);
        (&k - k.transpose()) * C64::new(0.0, -1.0)
    }

    /// Retarded kernel `theta(t_p - t_q) Delta(p, q)` with `theta(0) = 0`.
    pub fn retarded_matrix(&self, points: &PointSet) -> DMatrix<C64> {
        let c = self.causal_matrix(points);
        DMatrix::from_fn(points.len(), points.len(), |p, q| if points.times[p] > points.times[q] { c[(p, q)] } else { C64::new(0.0, 0.0) })
    }
}

fn lattice_basis(op: &KleinGordonOp, beta: Option<f64>) -> Result<ModeBasis> {
    let m2 = op.uniform_mass2().ok_or_else(|| Error::InvalidArgument("two-point functions need a constant mass".into()))?;
    ModeBasis::new(op.lattice.torus, m2, TimeStepping::Lattice { dt: op.lattice.dt }, beta, m2 == 0.0)
}

/// Vacuum two-point kernel over the lattice and its modes.
pub fn vacuum_two_point(op: &KleinGordonOp) -> Result<(BiKernel, ModeBasis)> {
    let basis = lattice_basis(op, None)?;
    let points = PointSet::from_lattice(&op.lattice);
    Ok((BiKernel::new(KernelKind::Hadamard, basis.kernel().matrix(&points)), basis))
}

/// Thermal two-point kernel at inverse temperature `beta`.
pub fn kms_two_point(op: &KleinGordonOp, beta: f64) -> Result<(BiKernel, ModeBasis)> {
    if !(beta > 0.0) {
        return Err(Error::InvalidBeta(beta));
    }
    let basis = lattice_basis(op, Some(beta))?;
    let points = PointSet::from_lattice(&op.lattice);
    Ok((BiKernel::new(KernelKind::Thermal, basis.kernel().matrix(&points)), basis))
}

/// Lattice kernel of a thermal basis continued by imaginary time `u`.
pub fn continue_imaginary(basis: &ModeBasis, lattice: &LatticeSpec, u: f64) -> Result<BiKernel> {
    let k = basis.kernel().continued(u)?;
    Ok(BiKernel::new(KernelKind::Thermal, k.matrix(&PointSet::from_lattice(lattice))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_lattice;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice() -> LatticeSpec {
        build_lattice(8, 0.1, 1, 8, 0.2).unwrap()
    }

    #[test]
    fn stencil_of_single_mode() {
        // n_x = 2 with one time direction: the k = pi/dx mode has Laplacian eigenvalue 4/dx^2
        let l = build_lattice(3, 0.5, 1, 2, 1.0).unwrap();
        let op = KleinGordonOp::constant_mass(&l, 0.0).unwrap();
        let p = op.matrix();
        assert!((p[(0, 0)] - (-2.0 / 0.25 + 2.0)).abs() < 1e-12);
        assert!((p[(0, 2)] - 4.0).abs() < 1e-12);
        assert!((p[(0, 1)] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn operator_symmetric_and_mass_shift() {
        let l = lattice();
        let p0 = KleinGordonOp::constant_mass(&l, 0.0).unwrap().matrix();
        let p1 = KleinGordonOp::constant_mass(&l, 0.7).unwrap().matrix();
        assert!((&p0 - p0.transpose()).amax() < 1e-12);
        let diff = &p1 - &p0;
        for i in 0..l.sites() {
            for j in 0..l.sites() {
                let expected = if i == j { 0.7 } else { 0.0 };
                assert!((diff[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn retarded_inverts_operator_on_interior_rows() {
        let l = lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mass = DensityFunction::on_lattice(&l, |_, _| rng.gen_range(0.0..2.0));
        let op = build_operator(&l, &mass).unwrap();
        let r = retarded(&op);
        assert!(identity_residual(&op, &r, 0..l.n_t - 1) < 1e-12);
        let a = advanced(&op);
        assert!(identity_residual(&op, &a, 1..l.n_t) < 1e-12);
        for i in 0..l.sites() {
            for j in 0..l.sites() {
                if l.time_index(i) <= l.time_index(j) {
                    assert_eq!(r.matrix[(i, j)], C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn retarded_three_slices_by_hand() {
        // single mode (n_x = 2, k = 0 component via uniform source), omega = 0
        let l = build_lattice(3, 0.5, 1, 2, 1.0).unwrap();
        let op = KleinGordonOp::constant_mass(&l, 0.0).unwrap();
        let g = retarded(&op).matrix;
        let mu = l.measure();
        // G(1, 0) = dt^2 / mu on the same site, G(2, 0) = 2 dt^2/mu - dt^2 * lap(G(1,0)) dt^2
        assert!((g[(2, 0)].re - 0.25 / mu).abs() < 1e-14);
        let lap = 2.0 * (0.25 / mu); // (2 G_s - 2 G_{s+1}) / dx^2 with G_{s+1} = 0
        assert!((g[(4, 0)].re - (2.0 * 0.25 / mu - 0.25 * lap)).abs() < 1e-12);
        assert!((g[(5, 0)].re - 0.25 * 2.0 * 0.25 / mu).abs() < 1e-12);
    }

    #[test]
    fn causal_is_antisymmetric() {
        let op = KleinGordonOp::constant_mass(&lattice(), 1.0).unwrap();
        let c = causal(&op);
        assert!(max_abs(&(&c.matrix + c.matrix.transpose())) == 0.0);
        let r = retarded(&op);
        assert!(max_abs(&(&c.matrix - (&r.matrix - r.matrix.transpose()))) < 1e-14);
    }

    #[test]
    fn hadamard_imaginary_part_is_half_causal() {
        let op = KleinGordonOp::constant_mass(&lattice(), 1.0).unwrap();
        let (plus, _) = vacuum_two_point(&op).unwrap();
        let delta = causal(&op).matrix;
        let anti = (&plus.matrix - plus.matrix.transpose()) * C64::new(0.0, -1.0);
        assert!(max_abs(&(anti - &delta)) < 1e-12);
        assert!(hermitian_min_eigenvalue(&plus.matrix) > -1e-12);
        // the mode-formula retarded kernel matches the forward substitution on lattice times
        let basis = lattice_basis(&op, None).unwrap();
        let rm = basis.kernel().retarded_matrix(&PointSet::from_lattice(&op.lattice));
        assert!(max_abs(&(rm - retarded(&op).matrix)) < 1e-12);
    }

    #[test]
    fn massless_hadamard_excludes_zero_mode() {
        let op = KleinGordonOp::constant_mass(&lattice(), 0.0).unwrap();
        let (plus, basis) = vacuum_two_point(&op).unwrap();
        assert_eq!(basis.modes.len(), 7);
        assert!(hermitian_min_eigenvalue(&plus.matrix) > -1e-12);
        let torus = SpatialTorus::new(1, 4, 0.5).unwrap();
        assert!(matches!(ModeBasis::new(torus, 0.0, TimeStepping::Continuous, None, false), Err(Error::MasslessZeroMode)));
    }

    #[test]
    fn unstable_step_rejected() {
        let l = build_lattice(8, 0.2, 1, 8, 0.2).unwrap();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        assert!(matches!(vacuum_two_point(&op), Err(Error::Unstable(_))));
    }

    #[test]
    fn continuum_limit_is_second_order() {
        // c e^{i w~ tau} -> e^{i w tau} / (2 w) at fixed tau
        let err = |dt: f64| {
            let w: f64 = 1.7;
            let wt = 2.0 / dt * (w * dt / 2.0).asin();
            let c = dt / (2.0 * (wt * dt).sin());
            let tau = 0.8;
            (C64::from_polar(c, wt * tau) - C64::from_polar(1.0 / (2.0 * w), w * tau)).norm()
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        let p1 = (e1 / e2).log2();
        let p2 = (e2 / e3).log2();
        assert!((p1 - 2.0).abs() < 0.05 && (p2 - 2.0).abs() < 0.05, "orders {p1} {p2}");
    }

    #[test]
    fn thermal_kernel_properties() {
        let op = KleinGordonOp::constant_mass(&lattice(), 1.0).unwrap();
        let (thermal, basis) = kms_two_point(&op, 2.0).unwrap();
        assert!(hermitian_min_eigenvalue(&thermal.matrix) > -1e-12);
        let delta = causal(&op).matrix;
        let anti = (&thermal.matrix - thermal.matrix.transpose()) * C64::new(0.0, -1.0);
        assert!(max_abs(&(anti - delta)) < 1e-12);
        // KMS boundary per mode: kernel at (t + i beta, t') equals kernel at (t', t)
        let k = basis.kernel();
        for s in 0..8 {
            let lhs = k.value_shifted(0.3, 2.0, s, 0);
            let rhs = k.value(-0.3, 0, s);
            assert!((lhs - rhs).norm() < 1e-12);
        }
        assert!(kms_two_point(&op, 0.0).is_err());
        assert!(k.continued(2.5).is_err());
        assert_eq!(k.continued(0.0).unwrap().matrix(&PointSet::from_lattice(&op.lattice)), thermal.matrix);
    }

    #[test]
    fn zero_temperature_limit_and_bose_factor() {
        let op = KleinGordonOp::constant_mass(&lattice(), 1.0).unwrap();
        let (vac, _) = vacuum_two_point(&op).unwrap();
        let (hot, _) = kms_two_point(&op, 200.0).unwrap();
        assert!(max_abs(&(vac.matrix - hot.matrix)) < 1e-12);
        assert!((bose(2.0f64.ln(), 1.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn feynman_symmetric_and_time_ordered() {
        let op = KleinGordonOp::constant_mass(&lattice(), 1.0).unwrap();
        let (thermal, _) = kms_two_point(&op, 1.0).unwrap();
        let f = feynman(&thermal, &advanced(&op));
        assert!(max_abs(&(&f.matrix - f.matrix.transpose())) < 1e-12);
        let l = op.lattice;
        // per-mode oracle: later argument first
        for i in 0..l.sites() {
            for j in 0..l.sites() {
                let expected = if l.time_index(i) >= l.time_index(j) { thermal.matrix[(i, j)] } else { thermal.matrix[(j, i)] };
                assert!((f.matrix[(i, j)] - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_and_json_exports() {
        let l = build_lattice(3, 0.1, 1, 2, 0.5).unwrap();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let mut buf = Vec::new();
        retarded(&op).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("row,col,re,im"));
        let (_, basis) = kms_two_point(&op, 1.0).unwrap();
        let json = basis.to_json();
        assert_eq!(json.as_array().unwrap().len(), 2);
        assert!(json[0]["n_beta"].as_f64().unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn continuation_is_additive(u1 in 0.0f64..0.5, u2 in 0.0f64..0.5, tau in -1.0f64..1.0) {
            let torus = SpatialTorus::new(1, 6, 0.3).unwrap();
            let b = ModeBasis::new(torus, 0.5, TimeStepping::Continuous, Some(1.0), false).unwrap();
            let k = b.kernel();
            let two = k.continued(u1).unwrap().continued(u2).unwrap();
            let one = k.continued(u1 + u2).unwrap();
            prop_assert!((two.value(tau, 1, 3) - one.value(tau, 1, 3)).norm() < 1e-13);
        }

        #[test]
        fn operator_symmetric_under_pairing(seed in 0u64..200) {
            let l = build_lattice(5, 0.1, 2, 3, 0.3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mass = DensityFunction::on_lattice(&l, |_, _| rng.gen_range(0.0..1.0));
            let op = build_operator(&l, &mass).unwrap();
            let f = Field::from_fn(l, |_, _| C64::new(rng.gen_range(-1.0..1.0), 0.0));
            let g = Field::from_fn(l, |_, _| C64::new(rng.gen_range(-1.0..1.0), 0.0));
            let lhs = crate::lattice::pairing(&op.apply(&f).unwrap(), &g).unwrap();
            let rhs = crate::lattice::pairing(&f, &op.apply(&g).unwrap()).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()));
        }
    }
}
