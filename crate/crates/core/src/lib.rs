//! Non-intrusive subdomain POD-TPWL toolkit for reservoir history matching.
//!
//! The crate covers the whole workflow on a desk-scale 2D two-phase model:
//!
//! * [`fom`] — full-order incompressible oil–water simulator (IMPES) with
//!   rate-controlled injectors and BHP-controlled producers,
//! * [`geostat`] — Gaussian log-permeability fields and their
//!   Karhunen–Loève parameterization,
//! * [`rom`] — snapshot collection, domain decomposition and per-subdomain
//!   POD bases,
//! * [`rbf`] — radial basis function interpolation with analytic gradients
//!   (the non-intrusive derivative engine),
//! * [`tpwl`] — assembly and online evaluation of the piecewise-linear
//!   reduced model, per subdomain or on the global domain,
//! * [`assim`] — reduced-space adjoint, steepest-descent history matching,
//!   outer-loop rebuilds and RML ensembles,
//! * [`harness`] — twin experiments, error metrics, the finite-difference
//!   baseline and plot-ready exports.

pub mod assim;
pub mod error;
pub mod fom;
pub mod geostat;
pub mod grid;
pub mod harness;
pub mod io;
pub mod rbf;
pub mod rom;
#[cfg(test)]
pub(crate) mod testutil;
pub mod tpwl;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
