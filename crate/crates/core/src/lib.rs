//! Response generation for multi-party conversations from sequence-structured
//! inputs.
//!
//! Dialogue structure (who speaks, whom they address, which utterance they
//! reply to) is written inline as reserved structure tokens. An encoder is
//! post-trained to recover masked structure tokens through an LM head shared
//! with the decoder, then the encoder-decoder is fine-tuned for response
//! generation. At inference, missing structure is masked, predicted, and fed
//! back before decoding.

pub mod artifact;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod structuralizer;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
