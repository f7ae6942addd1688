//! Numerical projective tractor calculus on coordinate charts.
//!
//! Given a torsion-free affine connection on a box chart, this crate finds
//! the solutions of the metrizability equation through its prolonged
//! connection and loop holonomy, and analyzes the induced geometry: strata by
//! signature, degeneracy loci, boundary structures, and projective
//! compactification order.
//!
//! Module layout mirrors the pipeline:
//!
//! * [`expr`] — expression parsing and exact forward-mode jets,
//! * [`chart`] — chart connections, normalization, curvature,
//! * [`tractor`] — tractor algebra in a fixed splitting,
//! * [`bgg`] — splitting operators, residuals, the prolonged connection,
//! * [`solver`] — parallel transport, holonomy, solution spaces,
//! * [`strata`] — pointwise classification and boundary geometry,
//! * [`verify`] — the model acceptance suite.

// Tensor index juggling reads better as plain loops, and the expression
// builder keeps arithmetic method names.
#![allow(clippy::needless_range_loop, clippy::should_implement_trait)]

pub mod bgg;
pub mod chart;
pub mod expr;
pub mod solver;
pub mod strata;
pub mod tractor;
pub mod verify;
