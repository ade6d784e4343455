//! Numerical laboratory for a nonlocal function space of vector fields.
//!
//! The central object is the seminorm
//!
//! ```text
//! |u|^p  =  ∫_Ω ∫_Ω ρ(y - x) | (u(y) - u(x)) · (y - x) / |y - x|^2 |^p  dy dx
//! ```
//!
//! which measures differences of `u` projected onto the line joining the two
//! points, weighted by a radial interaction kernel ρ.  Everything in this
//! crate exists to make that quantity and the estimates around it computable
//! at desk scale.
//!
//! * [`kernels`]: the kernel catalog, the cone-infimum kernel, and numerical
//!   checkers for the admissibility conditions (radial monotonicity and the
//!   small-ball mass-ratio limits).
//! * [`geometry`]: box, ball, and Lipschitz-graph domains, cones of
//!   directions, cell-centered grids, sphere quadrature, and the graph-patch
//!   inclusion checks.
//! * [`fields`]: sampled vector fields, rigid motions and their removal,
//!   reproducible test sequences, and CSV exchange.
//! * [`nonlocal`]: the seminorm itself, the direction functional, the
//!   cone-matrix mollifier, smoothing gaps, and translation moduli.
//! * [`analysis`]: the one-dimensional averaging lemma, near-boundary mass
//!   control, the discrete Poincaré constant, kernel-sequence experiments,
//!   and compactness probes.
//!
//! All randomness is seeded, all reductions use a fixed pairwise summation
//! tree, and results do not depend on the number of worker threads.

pub mod analysis;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod kernels;
pub mod nonlocal;
pub mod numerics;

pub use error::{Error, Result};
