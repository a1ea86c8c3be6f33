//! Generalized action-angle coordinates for integrable Hamiltonian systems
//! whose invariant submanifolds need not be compact.

pub mod chart;
pub mod error;
pub mod expr;
pub mod flow;
pub mod lattice;
pub mod pipeline;
pub mod report;
pub mod spec;
pub mod spline;
pub mod structure;
pub mod symplectic;

pub use error::{Error, Result};
