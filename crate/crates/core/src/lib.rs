//! Audio-visual expression recognition head.
//!
//! Visual frame features pass through a dilated causal TCN, audio features
//! through a linear adapter, and the two streams are fused with
//! bi-directional cross-attention before mean pooling and an MLP classifier.
//! A text-prompt contrastive term regularizes the pooled visual stream during
//! training.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod model;
pub mod objectives;
pub mod data;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, FormatError, Result};
