//! Numerical workbench for perturbative algebraic quantum field theory on a
//! discretised Minkowski torus: propagators, star and time-ordered products,
//! classical and quantum Moller maps, perturbative agreement and interacting
//! thermal states, each realised as a finite, checkable identity.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod functionals;
pub mod kms;
pub mod lattice;
pub mod moller_classical;
pub mod moller_quantum;
pub mod modes;
pub mod propagators;
pub mod quadrature;
pub mod report;
pub mod series;

pub use error::{Error, Result};
pub use functionals::{KernelSeries, PolyFunctional};
pub use kms::{LocalPotential, ThermalState};
pub use lattice::{build_lattice, DensityFunction, Field, LatticeSpec, PointSet, SpatialTorus, TemporalCutoff};
pub use modes::{FrequencyProfile, Switch};
pub use propagators::KleinGordonOp;
pub use quadrature::QuadratureRule;
pub use report::CheckRecord;
pub use series::{FormalSeries, Orders, C64};
