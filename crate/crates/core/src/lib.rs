//! Knowledge-injected encoder-decoder pre-training at desk scale.
//!
//! The crate is organized around a small reverse-mode tensor engine
//! ([`tensor`]), an encoder-decoder transformer ([`model`]), a
//! knowledge-annotated document pipeline ([`corpus`]), five self-supervised
//! objectives ([`objectives`]), the training loop and checkpointing
//! ([`train`]), downstream fine-tuning tasks ([`tasks`]), and text-generation
//! metrics ([`metrics`]).

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Tape, Tensor, Var};
