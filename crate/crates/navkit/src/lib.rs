//! Layered navigation stack for an input-constrained unicycle robot.
//!
//! The stack has two layers. Offline, [`trajopt`] builds a library of
//! dynamically feasible paths by solving a waypoint-constrained optimal
//! control problem with an ADMM splitting whose inner solver is iLQR; each
//! path comes with nominal inputs, time-varying feedback gains, and the
//! reference trajectory. Online, [`navigator`] selects the nearest path to
//! a one-step prediction, forms a feedforward-plus-feedback nominal
//! command, and [`safety`] filters it through a quadratic program over
//! heading-lifted barrier constraints — optionally with an on-manifold
//! tangential constraint that removes the boundary saddle points of the
//! plain filter. [`sim`] runs the whole stack in a deterministic 2D world
//! with scripted moving obstacles and reports benchmark metrics.

pub mod config;
pub mod dynamics;
pub mod environment;
pub mod navigator;
pub mod safety;
pub mod sim;
pub mod trajopt;
