//! Semi-supervised self-learning at desk scale.
//!
//! A trainable encoder maps inputs to an embedding space under one of four
//! losses (softmax cross-entropy, triplet, contrastive, additive angular
//! margin). Labels spread from a small seed set to unlabeled data through
//! confidence-ranked pseudo-labeling, with optional transfer of pretrained
//! weights from a related source task via binary checkpoints.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod losses;
pub mod mining;
pub mod error;
pub mod optim;
pub mod propagation;
pub mod selftrain;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::DenseArray;
