//! Continuation of transversal connecting orbits for Lagrangian systems with a
//! time-dependent potential `f(t) V(q)` that changes sign at a turning point.

// `!(a > b)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod bounds;
pub mod config;
pub mod continuation;
pub mod curvespace;
pub mod expr;
pub mod geometry;
pub mod linalg;
pub mod newton;
pub mod oracle;
pub mod quadrature;
pub mod report;
pub mod threads;
pub mod timescale;

pub use error::{Error, Result};
