//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, the tape, training, and file I/O.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A constructor received a shape whose element count does not match the data.
    ShapeDataMismatch { shape: Vec<usize>, data_len: usize },
    /// A shape contained a zero dimension.
    EmptyDimension { shape: Vec<usize> },
    /// Two arrays had incompatible shapes for the requested operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation expected a matrix (rank 1 or 2) but got something else.
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    /// An operation produced a NaN or infinity.
    NumericOverflow { op: &'static str },
    /// A constructor received non-finite input data.
    NonFiniteInput { op: &'static str },
    /// A row index was out of bounds.
    RowOutOfBounds { index: usize, rows: usize },
    /// A class label was outside [0, class_count).
    LabelOutOfRange { label: usize, classes: usize },
    /// A pair similarity flag was outside {0, 1}.
    InvalidPairFlag { value: u8 },
    /// A distance that must be non-negative was negative.
    NegativeDistance { value: f64 },
    /// An embedding row was all zeros where a nonzero vector is required.
    ZeroEmbeddingRow { row: usize },
    /// Gradient seed shape did not match the output shape.
    SeedShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// Optimizer was applied to parameters it does not track.
    OptimizerShapeMismatch { param_index: usize },
    /// A model head was required but not configured.
    MissingHead,
    /// The labeled pool was empty where predictions require references.
    EmptyLabeledPool,
    /// kNN was asked for more neighbors than labeled examples exist.
    InvalidNeighborCount { k: usize, labeled: usize },
    /// Selection fraction outside (0, 1].
    InvalidSelectionFraction { p: f64 },
    /// Selection indices contained a duplicate.
    DuplicateSelection { index: usize },
    /// A selection referenced an unlabeled index that does not exist.
    SelectionOutOfBounds { index: usize, unlabeled: usize },
    /// An entire training epoch produced no usable triplets or pairs.
    NoUsableBatches { epoch: usize },
    /// Configuration field failed validation.
    InvalidConfig { field: &'static str, message: String },
    /// A dataset class had too few examples for the requested split.
    InsufficientClassPopulation {
        class: usize,
        available: usize,
        required: usize,
    },
    /// A checkpoint's encoder layout does not match the target spec.
    TransferIncompatible { message: String },
    /// A binary checkpoint or IDX file failed to parse.
    Parse { field: &'static str, message: String },
    /// Wrapper around I/O failures.
    Io { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeDataMismatch { shape, data_len } => write!(
                f,
                "shape {shape:?} implies {} elements but data has {data_len}",
                shape.iter().product::<usize>()
            ),
            Error::EmptyDimension { shape } => {
                write!(f, "shape {shape:?} contains a zero dimension")
            }
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::NotAMatrix { op, shape } => {
                write!(f, "{op}: expected a vector or matrix, got shape {shape:?}")
            }
            Error::NumericOverflow { op } => {
                write!(f, "{op}: produced a non-finite value")
            }
            Error::NonFiniteInput { op } => {
                write!(f, "{op}: input contains NaN or infinity")
            }
            Error::RowOutOfBounds { index, rows } => {
                write!(f, "row index {index} out of bounds for {rows} rows")
            }
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::InvalidPairFlag { value } => {
                write!(f, "pair similarity flag must be 0 or 1, got {value}")
            }
            Error::NegativeDistance { value } => {
                write!(f, "distance must be non-negative, got {value}")
            }
            Error::ZeroEmbeddingRow { row } => {
                write!(f, "embedding row {row} is all zeros and cannot be normalized")
            }
            Error::SeedShapeMismatch { expected, got } => {
                write!(f, "gradient seed shape {got:?} does not match output shape {expected:?}")
            }
            Error::OptimizerShapeMismatch { param_index } => {
                write!(f, "optimizer state does not match parameter {param_index}")
            }
            Error::MissingHead => write!(f, "model has no classification head configured"),
            Error::EmptyLabeledPool => write!(f, "labeled pool is empty"),
            Error::InvalidNeighborCount { k, labeled } => {
                write!(f, "k={k} exceeds labeled pool size {labeled}")
            }
            Error::InvalidSelectionFraction { p } => {
                write!(f, "selection fraction must be in (0, 1], got {p}")
            }
            Error::DuplicateSelection { index } => {
                write!(f, "duplicate unlabeled index {index} in selection")
            }
            Error::SelectionOutOfBounds { index, unlabeled } => {
                write!(f, "selection index {index} out of bounds for {unlabeled} unlabeled examples")
            }
            Error::NoUsableBatches { epoch } => {
                write!(f, "epoch {epoch} produced no usable triplets or pairs; the labeled pool is degenerate")
            }
            Error::InvalidConfig { field, message } => {
                write!(f, "invalid config field `{field}`: {message}")
            }
            Error::InsufficientClassPopulation {
                class,
                available,
                required,
            } => write!(
                f,
                "class {class} has {available} examples but the split requires {required}"
            ),
            Error::TransferIncompatible { message } => {
                write!(f, "checkpoint incompatible with target encoder: {message}")
            }
            Error::Parse { field, message } => write!(f, "parse error in {field}: {message}"),
            Error::Io { message } => write!(f, "i/o error: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            message: e.to_string(),
        }
    }
}
