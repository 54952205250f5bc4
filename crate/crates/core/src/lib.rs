//! Simulator-backed high-altitude monocular mapping and language-conditioned
//! exploration planning.
//!
//! The crate is organized bottom-up:
//!
//! - [`world`]: synthetic terrain and semantics, nadir camera rendering, and
//!   emulators for GPS and batch 3D reconstruction.
//! - [`posegraph`]: submap pose graph with GPS priors, reconstruction and ICP
//!   relative factors, scale estimation and proximity loop closures.
//! - [`mapping`]: known/unknown occupancy and EMA-fused feature grids.
//! - [`taskinfo`]: incremental frontier clusters and task relevancy.
//! - [`planner`]: region-level exploration/exploitation selection and local
//!   tour planning.
//! - [`baselines`]: coverage, nearest-frontier, full-tour and value-map planners.
//! - [`mission`]: the deterministic sense–map–plan–move runner and metrics.
//! - [`scenario`]: scenario files and procedural test worlds.

pub mod baselines;
pub mod geometry;
pub mod grid;
pub mod mission;
pub mod mapping;
pub mod planner;
pub mod posegraph;
pub mod scenario;
pub mod spatial;
pub mod taskinfo;
pub mod world;
