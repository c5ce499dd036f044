//! Continuous compressions, dilations and prescribed diagonals of
//! operator-valued paths, realized at matrix scale with certified error
//! bounds.
//!
//! The infinite-dimensional hypothesis "the essential numerical range
//! contains a region" is modeled by [`instances::ReservoirInstance`]: a
//! diagonal matrix whose anchor eigenvalues each carry a finite multiplicity
//! (the room budget). Constructions draw orthogonal directions from that
//! budget and fail with [`OpcError::RoomExhausted`] when it runs out.

// `!(x > 0.0)` style checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagonals;
pub mod dilation;
pub mod error;
pub mod instances;
pub mod kernel;
pub mod numrange;
pub mod par;
pub mod pathbuild;
pub mod pinch;
pub mod selfadjoint;
pub mod smoothfield;
pub mod tol;

pub use error::{OpcError, Result};
pub use kernel::{ComplexMatrix, Subspace, C64};
pub use tol::Tolerances;
