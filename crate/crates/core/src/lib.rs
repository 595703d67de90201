//! Numerical lab for controlled stochastic delay equations with recursive
//! (BSDE) utilities: simulation, backward solvers, value functions, HJB checks.

pub mod bsde;
pub mod control;
pub mod digest;
pub mod ezapp;
pub mod grid;
pub mod hjb;
pub mod lattice;
pub mod model;
pub mod mollify;
pub mod regression;
pub mod repro;
pub mod rng;
pub mod scenario;
pub mod sdde;
pub mod segment;

pub use grid::{GridError, TimeGrid};
pub use lattice::{ControlLattice, LatticeError, PiecewiseControl};
pub use model::{Coefficients, Generator, GeneratorConstants};
pub use rng::BrownianIncrements;
pub use segment::{sup_norm_distance, PathSegment, Segment, SegmentError};
pub use bsde::{BsdeConfig, BsdeError, BsdeSolution, Scheme};
pub use regression::FeatureBasis;
pub use sdde::{simulate, McEstimate, PathEnsemble, SimError};
