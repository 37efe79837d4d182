//! Probabilistically masked language models.
//!
//! A small `f64` transformer trained under a prior over the masking ratio,
//! generation in arbitrary token order, perplexity in sequential and random
//! order, and exact enumeration checks relating the uniform-prior masked
//! objective to the autoregressive objective averaged over all orders.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod equivalence;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod masking;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod sequence;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use sequence::{TokenId, TokenSequence, MASK_ID, PAD_ID, UNK_ID};
pub use tensor::Tensor;
pub use transformer::{AttentionMode, PositionalKind, Transformer, TransformerConfig};
