//! Vision Transformer inference with pluggable token reduction.
//!
//! The encoder runs DeiT-style blocks and calls a reduction step between
//! each block's attention and MLP. Strategies:
//!
//! * `imagepiece`: merge only the least attended tokens with their most
//!   similar partners, let the next layers re-score the merged pieces, and
//!   prune at selected layers.
//! * `evit`: drop the least attended tokens, fusing them into one.
//! * `tome`: merge the most similar token pairs anywhere in the sequence.
//!
//! [`diag`] holds the analytic token/FLOPs accounting and the metrics used to
//! compare strategies.

pub mod container;
pub mod diag;
pub mod embed;
pub mod error;
pub mod numerics;
pub mod par;
pub mod reduce;
pub mod runspec;
pub mod vit;

pub use error::{Error, ErrorClass, Result};
pub use numerics::Tensor;
