//! Stochastic primal-dual hybrid gradient (SPDHG) solvers for saddle-point
//! problems of the form
//!
//! ```text
//!   min_x sup_y  sum_i <A_i x, y_i> - f_i*(y_i) + g(x)
//! ```
//!
//! with block-separable duals, arbitrary samplings of the dual blocks, and
//! accelerated variants for strongly convex `g` or strongly convex `f_i*`.
//!
//! Module map:
//! - [`blockspace`]: block vectors, shapes, diagonal block metrics.
//! - [`operators`]: linear operators, block operators with call counters.
//! - [`proxlib`]: proximal operators for the function catalog.
//! - [`sampling`]: samplings over dual blocks and ESO constants.
//! - [`solvers`]: the SPDHG iteration and its accelerated variants.
//! - [`planner`]: closed-form step-size/probability plans for linear rates.
//! - [`diagnostics`]: saddle references, Bregman distances, rate fitting.
//! - [`harness`]: experiment builders, metric tables, CLI.

pub mod blockspace;
pub mod error;
pub mod harness;
pub mod operators;
pub mod proxlib;
pub mod diagnostics;
pub mod planner;
pub mod sampling;
pub mod solvers;

pub use error::{Error, Result};
