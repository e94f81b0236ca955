//! Focal attention for image-text matching.
//!
//! Fragments (words, image regions) of one modality attend over the other's,
//! irrelevant fragments are masked out by a focal score, and the surviving
//! attention gives a bidirectional relevance score trained with a
//! hard-negative triplet loss.

pub mod attention;
pub mod error;
pub mod eval;
pub mod fragments;
pub mod relevance;
pub mod synth;
pub mod training;

pub use attention::{focal_attend, AttentionMap, FocalAttention, FocalConfig, FocalMask, Variant};
pub use error::{FocalError, Result};
pub use fragments::{load_corpus, save_corpus, Corpus, EmbedMatrix, Instance, Modality};
pub use relevance::{direction_relevance, pair_score, PairScore, ScoreDirection, ScoreMatrix};
