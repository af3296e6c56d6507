//! Speculative early-exit decoding for small decoder-only transformers.
//!
//! A draft model proposes a handful of candidate next tokens. At each
//! scheduled layer of the target model, a small MLP reads the target's
//! logits for just those candidates and predicts whether the token is
//! already settled. Positive predictions are checked against the full LM
//! head before the forward pass stops. A two-level scheduler picks which
//! layers run predictors, and tree speculative decoding is handled by
//! merging each root-to-leaf path into one exit decision.

pub mod corpus;
pub mod engine;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod scheduler;
pub mod speculation;
pub mod tree;

pub use error::{Error, Result};
pub use model::{KvCache, LayerState, ModelConfig, TokenId, TransformerModel};
pub use par::Execution;
