//! Numerical solution operators for the inhomogeneous Cauchy-Riemann
//! equations on finite products of bounded planar Lipschitz domains.
//!
//! The library builds explicit integral operators T with dbar(T f) = f for
//! dbar-closed (0,1)-data f on products of disks, rectangles, and simple
//! polygons, evaluates the integral kernels those operators are made of,
//! and checks the pointwise kernel bounds, weighted Schur estimates, and
//! exponent bookkeeping that make the construction work.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod expr;
pub mod geometry;
pub mod kernels;
pub mod solver;
pub mod transforms;

pub use error::{Error, Result};
