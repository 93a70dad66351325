//! Recovery of 3D global human motion from multiple unsynchronized 2D
//! keypoint sequences of the same action.
//!
//! The library fits a shared neural motion field, per-instance monotone
//! phase warps, low-dimensional instance codes and camera extrinsics
//! against a robust 2D reprojection objective, using an in-crate
//! reverse-mode autodiff tape. A synthetic-scene generator and a full
//! 3D/2D metrics suite make recovery verifiable end to end.

pub mod body;
pub mod diffcore;
pub mod field;
pub mod formats;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod synth;


pub use diffcore::{GradMap, ParamStore, Tape};
pub use geom::{CameraIntrinsics, Rot6D};


