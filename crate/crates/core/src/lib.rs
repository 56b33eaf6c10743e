//! Trajectory-guided diffusion action expert.
//!
//! The crate implements the full pipeline downstream of a high-level
//! waypoint planner: sparse 3D waypoints are lifted from camera
//! observations, interpolated into a continuous guidance trajectory,
//! and refined into dense end-effector action chunks by a conditional
//! diffusion policy that observes proprioception, a guidance pose, and
//! a cropped point cloud. Training follows a two-stage schedule:
//! action pre-training on pure trajectory data with the point-cloud
//! feature masked out, then point-cloud fine-tuning with the full
//! conditioning vector.
//!
//! A synthetic kinematic desk world ([`simworld`]) provides tasks, a
//! scripted demonstration expert, and a waypoint oracle standing in
//! for the planner, so the whole system can be trained and evaluated
//! on CPU.

pub mod config;
pub mod datastore;
pub mod diffkernel;
pub mod diffusion;
pub mod error;
pub mod expert;
pub mod geometry;
pub mod pointcloud;
pub mod seed;
pub mod simworld;
pub mod trajectory;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Extrinsics, PixelDepthPoint, Pose, Quat, Vec3};
