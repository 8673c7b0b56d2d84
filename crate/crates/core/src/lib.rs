//! Definition extraction toolkit.
//!
//! The pipeline reads DEFT-style column corpora, cleans and rebalances them,
//! segments sentences into byte-pair subwords, encodes subwords through a
//! pluggable embedding layer and a feed-forward projector, and trains either a
//! sigmoid sentence classifier or a pair-indexed linear-chain CRF tagger
//! (optionally jointly with tag-id and relation heads). Subword predictions are
//! folded back onto corpus tokens by majority vote with a first-subword
//! tie-break.

pub mod align;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod linalg;
pub mod pipeline;
pub mod preprocess;
pub mod train;

pub use error::{Error, Result};
