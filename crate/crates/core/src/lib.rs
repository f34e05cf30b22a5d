//! Camera pitch and roll from per-pixel surface-frame correspondences.
//!
//! The up vector `u` (scene up expressed in camera coordinates) relates a
//! camera-space surface frame `F^c` to the third row of its upright
//! counterpart through `f_z^g = uᵀ F^c`. Given a field of such
//! correspondences, [`solver::solve_weighted`] recovers `u` as the unit vector
//! minimising the weighted squared misalignment, by way of a 6×6 eigenvalue
//! problem on the accumulated normal equations.

pub mod cli;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod solver;
pub mod synth;

mod eigen;

pub use geometry::{
    CameraIntrinsics, GeometryError, HorizonLine, LayoutVector, OrientationAngles, Rotation,
    SurfaceFrame,
};
pub use solver::{ConditionFlag, FrameMap, SolveError, SolveGradients, SolveResult, SolveSystem};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
