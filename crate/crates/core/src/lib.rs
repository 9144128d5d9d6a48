//! Gaussian-splatting scene maps with photometric visual localization.
//!
//! The crate builds a map of colored 3D Gaussians from a handful of posed
//! images, renders it differentiably (color, depth, occupancy), and estimates
//! 6-DoF camera poses in two stages: a coarse pose from retrieval,
//! covisibility clustering, and PnP-RANSAC; then a fine pose from masked
//! photometric alignment against the rendered map.
//!
//! Modules:
//! - [`geom`] — rotations, SE(3) poses, twists, interpolation, pose metrics
//! - [`splat`] — Gaussian primitives, map storage, point-cloud initialization
//! - [`render`] — tile-based differentiable rasterization and gradients
//! - [`mapping`] — losses, pseudo-views, density control, the training loop
//! - [`localize`] — masks, features, PnP-RANSAC, photometric refinement
//! - [`harness`] — synthetic scenes, perturbations, benchmarks, reports

pub mod error;
pub mod geom;
pub mod harness;
pub mod img;
pub mod localize;
pub mod mapping;
pub mod optim;
pub mod render;
pub mod splat;

pub use error::{Error, Result};
pub use geom::{CameraIntrinsics, Pose, PoseError, Rotation, Twist};
pub use splat::{ColoredPointCloud, GaussianMap, GaussianPrimitive};
