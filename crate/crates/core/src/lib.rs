//! Two-stage hash-grid radiance fields.
//!
//! A global stage fits one anchored hash encoder, a shared decoder and an
//! adaptive occupancy octree to every training view. A focal stage then
//! splits the cameras into balanced blocks and fine-tunes a zero-initialised
//! residual encoder per block while everything from the global stage stays
//! frozen. Pixels for the focal stage are drawn partly in proportion to the
//! global model's per-pixel error.
//!
//! The crate ships a synthetic blob scene with an analytic density field so
//! every stage can be checked against ground truth.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod octree;
pub mod partition;
pub mod renderer;
pub mod sampler;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Aabb, Camera, Ray, Vec3};
