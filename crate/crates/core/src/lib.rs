//! Visual-inertial SLAM backend built on a bounded factor graph.
//!
//! The realtime estimator combines reprojection errors, pre-integrated IMU
//! errors and two-pose (posegraph) factors obtained by marginalizing the
//! landmarks two frames share. Posegraph edges keep an archive of what they
//! consumed, so a loop closure can turn them back into landmarks and
//! observations before a full-graph optimization runs in the background.

use serde::{Deserialize, Serialize};

pub mod camera;
pub mod config;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod imu;
pub mod loopclosure;
pub mod marginal;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};

/// Identifier of a frame (one state per frame timestamp).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameId(pub u64);

/// Identifier of a landmark variable in a factor graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkId(pub u64);

impl std::fmt::Display for FrameId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
