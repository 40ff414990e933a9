//! Synthetic-data-driven 2D/3D deformable registration.
//!
//! The pipeline runs in stages:
//!
//! 1. [`diffeo`] draws random diffeomorphic displacement fields by integrating
//!    Gaussian-kernel velocity fields, with a step-norm gate and a minimum
//!    voxel-volume gate.
//! 2. [`volume`] warps the preoperative volume with that field.
//! 3. [`pose`] samples a residual C-arm pose error and folds it into a
//!    volume-frame rigid motion.
//! 4. [`drr`] renders the deformed volume from the perturbed pose.
//! 5. [`dataset`] packages projection, total target field and pose on disk.
//! 6. [`net`] trains a fully-convolutional 2D→3D displacement regressor.
//! 7. [`eval`] scores predictions with landmark TRE and projection distance.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod diffeo;
pub mod drr;
pub mod error;
pub mod eval;
pub mod io;
pub mod net;
pub mod overlay;
pub mod par;
pub mod phantom;
pub mod pose;
pub mod volume;

pub use error::{Error, Result};

/// World-frame 3-vector in millimeters.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3×3 matrix, used for rotations and Jacobians.
pub type Mat3 = nalgebra::Matrix3<f64>;
