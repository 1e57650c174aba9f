//! Quaternion equivariant capsule networks for 3D point clouds.

pub mod autodiff;
pub mod capsnet;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lrf;
pub mod mean;
pub mod pointcloud;
pub mod quat;
pub mod routing;
pub mod verify;
pub mod weiszfeld;

pub use error::{QecError, Result};
pub use quat::UnitQuaternion;
