//! Error type shared by all modules of the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operand shapes do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand shape is unusable for the named operation.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    /// Catch-all for bad scalar arguments (k <= 0, L == 0, ...).
    InvalidArgument { op: &'static str, message: String },
    /// `backward` was called on a non-scalar tensor.
    NonScalarLoss { shape: Vec<usize> },
    /// A coordinate fell outside the half-open unit cube during voxelization.
    CoordOutOfRange { point: usize, axis: usize, value: f64 },
    /// NaN or infinity where a finite value is required.
    NonFinite { context: &'static str },
    /// k-nearest-neighbor query with more neighbors than points.
    KnnNeighborCount { k: usize, n: usize },
    /// Class label outside `[0, num_classes)`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// Point count differs from what the model configuration expects.
    PointCountMismatch { expected: usize, actual: usize },
    /// Configuration validation failures, one message per offending field.
    Config(Vec<String>),
    /// Training aborted on a non-finite loss.
    NonFiniteLoss { batch: usize, lr: f64 },
    /// Dataset has no items.
    EmptyDataset,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shapes {lhs:?} and {rhs:?} do not conform")
            }
            Error::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: shape {shape:?} invalid: {reason}")
            }
            Error::InvalidArgument { op, message } => write!(f, "{op}: {message}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::CoordOutOfRange { point, axis, value } => write!(
                f,
                "point {point} axis {axis} coordinate {value} outside [0,1); \
                 run normalize_unit_cube before voxelizing"
            ),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::KnnNeighborCount { k, n } => {
                write!(f, "knn: k={k} exceeds point count n={n}")
            }
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} outside [0, {num_classes})")
            }
            Error::PointCountMismatch { expected, actual } => {
                write!(f, "expected {expected} points, got {actual}")
            }
            Error::Config(issues) => {
                write!(f, "invalid configuration: ")?;
                for (i, issue) in issues.iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    write!(f, "{issue}")?;
                }
                Ok(())
            }
            Error::NonFiniteLoss { batch, lr } => {
                write!(f, "non-finite loss at batch {batch} (lr {lr})")
            }
            Error::EmptyDataset => write!(f, "dataset has no items"),
        }
    }
}

impl core::error::Error for Error {}
