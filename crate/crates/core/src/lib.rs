//! Key information extraction from OCR'd documents.
//!
//! Tokens are projected from image space onto a sparse 2-D grid of token ids
//! ([`gridder`]), every grid cell is classified by a fully convolutional
//! network built from word embeddings and atrous convolutions ([`model`]),
//! and predictions are read back onto the original tokens and scored with
//! strict and soft average precision ([`metrics`]).
//!
//! The numerical core in [`nn`] is self-contained: every layer has a
//! hand-written backward pass that is verified against central finite
//! differences in 64-bit precision.

pub mod data;
pub mod error;
pub mod gridder;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tokenizer;
pub mod trainer;

pub use data::{BBox, ClassSet, Document, RawToken};
pub use error::{Error, Result};
pub use gridder::{Grid, GridShape};
pub use model::{CutieConfig, CutieModel};
pub use nn::{Param, Scalar, Tensor};
pub use tokenizer::{TokenPiece, Vocabulary};
pub use trainer::TrainConfig;
