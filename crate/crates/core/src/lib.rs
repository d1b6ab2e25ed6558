//! Probabilistic-PnP grasp pose estimation.
//!
//! Grasps are described by the four projected corner keypoints of a
//! parallel-jaw gripper. Poses are recovered with confidence-weighted PnP, and
//! the PnP cost is treated as an unnormalized density over poses so that a KL
//! loss against a ground-truth grasp can be differentiated back to the 2D
//! keypoints and their weights.
//!
//! Module map:
//! - [`geometry`]: SE(3), pinhole projection, gripper model
//! - [`pnp`]: weighted reprojection cost, Jacobians, LM and multi-start solving
//! - [`prob`]: AMIS sampling of the pose density, KL loss and its gradient
//! - [`codec`]: keypoint map encode/decode and the 2D losses
//! - [`matching`]: nearest-neighbor grasp matching
//! - [`scene`]: synthetic primitive scenes and their file format
//! - [`train`]: toy end-to-end trainer over free keypoint parameters
//! - [`eval`]: success/coverage metrics and reports
//! - [`gradcheck`]: finite-difference check of the KL gradient

pub mod chart;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod matching;
pub mod pnp;
pub mod posefile;
pub mod prob;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, GripperModel, Pose, Twist};
pub use pnp::{Correspondence, CorrespondenceSet, SolveReport, SolverConfig};
