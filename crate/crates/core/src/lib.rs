//! Scene-text loop closure for LiDAR SLAM.
//!
//! Text detections are lifted to posed entities using the LiDAR point cloud,
//! stored in an observation database, and matched against earlier
//! observations. Unique ID texts are verified with ICP; repeatable generic texts
//! are verified by comparing the spatial arrangement of nearby texts. Accepted
//! loops become relative pose constraints for a pose graph back end.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod camera;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod icp;
pub mod loop_closure;
pub mod observation_db;
pub mod pipeline;
pub mod pose_graph;
pub mod records;
pub mod se3;
pub mod simulator;
pub mod text_entity;

pub use camera::{CameraIntrinsics, PixelPoint, PlaneParams};
pub use observation_db::{Observation, ObservationDatabase, ObservationId};
pub use se3::{Pose, Tangent, Trajectory, Vec3};
pub use text_entity::{CalibratedRig, TextCategory, TextDetection, TextEntity};
