//! Nonlinear vector coherent states of the deformed (k, ε, κ, f) spin-orbit
//! model, with the numerical oracles that check their closed forms.
//!
//! The modules build on one another in this order: [`deformed_algebra`]
//! supplies basic numbers and special functions, [`spectrum`] the eigenvalue
//! problem and tower basis, [`ladder`] the ladder operators, [`nvcs_core`] the
//! S² family, [`measures`] the moment problems and overcompleteness checks,
//! then [`matrix_nvcs`], [`displacement`] and [`s3_nvcs`].

// Negated comparisons such as `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops follow the n-indexed formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod deformed_algebra;
pub mod displacement;
pub mod error;
pub mod ladder;
pub mod matrix_nvcs;
pub mod measures;
pub mod nvcs_core;
pub mod quadrature;
pub mod s3_nvcs;
pub mod series;
pub mod spectrum;

pub use deformed_algebra::{DeformationSpec, MultiParam, PQParams};
pub use error::{NvcsError, Result};
pub use ladder::{LadderClass, LadderSpec};
pub use spectrum::{Coupling, ModelParams, Sign, Space, SpectralData};

pub use num_complex::Complex64;

/// Dense complex matrix used for every truncated operator.
pub type CMatrix = nalgebra::DMatrix<Complex64>;
/// Dense complex vector.
pub type CVector = nalgebra::DVector<Complex64>;

/// Largest entry modulus of a complex matrix or vector.
pub fn max_modulus<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<Complex64, R, C>>(
    m: &nalgebra::Matrix<Complex64, R, C, S>,
) -> f64 {
    m.iter().map(|x| x.norm()).fold(0.0, f64::max)
}
