//! Operator-splitting solver for degenerate, non-local Fokker-Planck equations
//!
//! `∂ₜρ + div(ρ b[ρ]) = div(A(∇ρ + ρ∇f))`
//!
//! Each window of length `h` first transports the density exactly along the
//! divergence-free drift, then takes one entropic JKO step of the free energy
//! `∫fρ + ∫ρ log ρ` under the cost `⟨(A+hI)⁻¹(x−y), x−y⟩`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod cli;
pub mod entropic_ot;
pub mod error;
pub mod grid;
pub(crate) mod interp;
pub mod model;
pub mod scheme;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{Axis, Density, Grid};
pub use interp::Interpolation;
pub use model::Model;
