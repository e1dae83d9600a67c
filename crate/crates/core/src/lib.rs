//! Three interchangeable solvers for a polydisperse evaporating spray in a
//! decelerating axisymmetric nozzle flow, cross-validated against each other:
//!
//! * a direct quadrature method of moments (`dqmom`) transporting weights and
//!   abscissas of the droplet distribution,
//! * a sectional multi-fluid method (`multifluid`) transporting mass and
//!   momentum per size section,
//! * a stochastic parcel method (`lagrangian`) with Monte Carlo collisions.
//!
//! The physics (two-way-free transport, Stokes drag, d^2-law or linear-volume
//! evaporation, geometric coalescence) lives in `physics`; `quadrature`,
//! `linsolve` and `integrator` supply the numerical machinery; `harness`
//! drives the case matrix and writes comparable diagnostics.

pub mod dqmom;
pub mod harness;
pub mod integrator;
pub mod lagrangian;
pub mod linsolve;
pub mod multifluid;
pub mod physics;
pub mod quadrature;
