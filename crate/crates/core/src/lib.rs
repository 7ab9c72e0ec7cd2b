//! Exact desk-scale laboratory for boundary representations of tree-like
//! hyperbolic groups: conformal densities, square-root Poisson transforms,
//! Harish-Chandra functions, Fatou-type convergence, coefficient decay and the
//! Harish-Chandra–Schwartz convolution algebra.

pub mod boundary_measure;
pub mod boundary_rep;
pub mod cli;
pub mod decay_suite;
pub mod error;
pub mod fatou_lab;
pub mod group_model;
pub mod numeric;
pub mod poisson_kernel;
pub mod report;
pub mod schwartz_algebra;

pub use error::{Error, Result};
pub use group_model::{Backend, GroupElement, GroupModel, Letter};
