//! Joint reconstruction of sparse 3D tracer particles and a dense,
//! divergence-free 3D fluid velocity field from multi-camera image pairs.
//!
//! The library models a seeded flow volume observed by `K` calibrated cameras
//! at two time steps. Particles are explicit Lagrangian entities (position +
//! intensity), the motion field is a trilinear finite-element grid. Both are
//! recovered by minimizing a single variational energy with an inertial
//! proximal alternating scheme, embedded in a coarse-to-fine schedule that
//! alternates candidate-particle triangulation with energy minimization.
//!
//! Entry points:
//! - [`pipeline::reconstruct`] / [`pipeline::reconstruct_sequential`] — the full solver
//! - [`synth::generate`] — synthetic ground-truth scenes on analytic flows
//! - [`eval::flow_metrics`] / [`eval::particle_metrics`] — quantitative evaluation
//! - `pivrec` binary — `generate`, `reconstruct`, `evaluate`, `export` subcommands

pub mod camera;
pub mod energy;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod ipalm;
pub mod motion;
pub mod pipeline;
pub mod prox;
pub mod scene;
pub mod synth;
pub mod triangulate;

pub use camera::Camera;
pub use error::{Error, Result};
pub use geometry::Box3;
pub use motion::MotionGrid;
pub use scene::{BlobKernel, Image, ImageSet, ParticleSet};
