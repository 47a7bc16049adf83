//! Manhattan-frame rotation estimation from surface normals, with
//! sliding-window smoothing on SO(3).
//!
//! The pipeline has three stages:
//!
//! * [`single_frame::optimize`] fits a [`ManhattanFrame`] to one frame of
//!   weighted normals and reports an information matrix;
//! * [`multi_frame::Tracker`] smooths the per-frame estimates in a sliding
//!   window with robust measurement factors;
//! * [`evaluation::align`] scores a trajectory against ground truth modulo
//!   the 24 cube symmetries.

pub mod app;
pub mod distribution;
pub mod error;
pub mod evaluation;
pub mod multi_frame;
pub mod normals;
pub mod single_frame;
pub mod so3;

pub use error::{Error, Result};
pub use evaluation::Trajectory;
pub use multi_frame::{Tracker, TrackerConfig};
pub use normals::{NormalMap, NormalSample};
pub use single_frame::{FrameEstimate, LmConfig, ManhattanFrame};
pub use so3::Rotation;
