//! Numerical toolkit for time operators built from commuting operator pairs.
//!
//! The central objects are a Hermitian matrix `H` together with a family of
//! mutually commuting Hermitian "position" operators `Φ = (Φ_1, …, Φ_d)`.
//! From the commutators `H'_j = i[H, Φ_j]` the toolkit constructs
//!
//! * the critical set `κ(H)` where the velocity `(H')²` degenerates,
//! * a conjugate operator `A` and the associated Mourre window estimates,
//! * renormalised localisation averages `R_f` and their gradients,
//! * the time operator `T_f` with its canonical commutation and Weyl
//!   relations, and
//! * time-evolved sojourn integrals whose large-dilation limits are compared
//!   against the stationary expectation `t_f(φ)`.
//!
//! Everything is dense, double precision and seed-deterministic. See the
//! `book/` guide for a chapter-by-chapter tour with runnable snippets.

pub mod commutators;
pub mod linalg;
pub mod localisation;
pub mod models;
pub mod mourre;
pub mod quadrature;
pub mod report;
pub mod sojourn;
pub mod spectral;
pub mod time_operator;

mod guide;

pub use linalg::{HermitianOperator, JointSpectralData, LinalgError, SpectralFilter};
pub use models::{ModelError, OperatorPair};
