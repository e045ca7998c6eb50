//! Range-image face recognition.
//!
//! The pipeline turns a scanner point cloud into a set of local descriptors
//! that can be compared between faces:
//!
//! - [`cloud_io`] loads XYZ clouds and dataset manifests, and generates
//!   synthetic faces for testing.
//! - [`registration`] rigidly aligns a scan to a reference with point-to-point ICP.
//! - [`range_image`] rasterizes a registered cloud onto a depth grid, finds the
//!   nose tip and crops an ellipse around it.
//! - [`integral`] provides constant-time rectangle sums.
//! - [`detector`] finds significant points as scale-space maxima of the
//!   box-filter Hessian determinant.
//! - [`suld`] builds SULD descriptors from smoothed Haar response maps.
//! - [`matching`] compares descriptor sets with the nearest-neighbour ratio
//!   test and runs rank-1 identification protocols.
//! - [`pipeline`] glues the stages together.

pub mod cloud_io;
pub mod detector;
mod error;
pub mod grid;
pub mod integral;
pub mod io_util;
mod kdtree;
pub mod matching;
pub mod pipeline;
pub mod range_image;
pub mod registration;
pub mod suld;

pub use error::{Error, Result};
pub use grid::Grid;
