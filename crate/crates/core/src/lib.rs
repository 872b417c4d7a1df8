//! Dual-scale point cloud recognition.
//!
//! Point features are disentangled along the channel dimension: one part is
//! encoded at point scale by a dynamic convolution whose kernels are generated
//! from relative coordinates, the other at voxel scale by multi-head
//! self-attention over a dense low-resolution grid. The two streams are
//! blended by injecting high-frequency encodings of the opposite modality's
//! coordinates before a final linear fusion.
//!
//! The crate is `no_std` + `alloc`; everything is pure computation. File
//! formats, dataset directories and the CLI live in the companion
//! `dspoint-cli` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod error;
pub mod global;
pub mod gradcheck;
pub mod graph;
pub mod hf;
pub mod knn;
pub mod local;
pub mod model;
pub mod pointcloud;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
pub use graph::{Graph, TensorId};
pub use scalar::Scalar;
pub use tensor::Tensor;
