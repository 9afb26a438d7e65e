//! Pattern-based subword alphabets for subword-aware neural language models.
//!
//! The pipeline mines frequent character substrings from a corpus, selects
//! characteristic patterns with an L1-regularized pattern-based CRF, rewrites
//! every word over the alphabet of pattern-prefix states, and trains word-level
//! LSTM language models whose word vectors are composed from character or
//! state embeddings.

pub mod automaton;
pub mod corpus;
pub mod crf;
pub mod error;
pub mod evaluator;
pub mod lm;
pub mod mining;
pub mod owlqn;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LanguageModel32 = lm::LanguageModel<f32>;
pub type LanguageModel64 = lm::LanguageModel<f64>;
pub type LmParams32 = lm::LmParams<f32>;
pub type LmParams64 = lm::LmParams<f64>;
pub type PatternTable32 = crf::PatternTable<f32>;
pub type PatternTable64 = crf::PatternTable<f64>;
pub type OwlqnConfig64 = owlqn::OwlqnConfig<f64>;
pub type TrainOutcome32 = trainer::TrainOutcome<f32>;
pub type TrainOutcome64 = trainer::TrainOutcome<f64>;
