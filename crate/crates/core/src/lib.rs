//! Aspect-controlled ad-text generation.
//!
//! The pipeline has two training stages on a small transformer
//! encoder-decoder:
//!
//! 1. controlled pre-training on unpaired reviews, where the review segment
//!    that best matches an aspect term is masked out and regenerated from
//!    `[aspect, SEP, masked review]`;
//! 2. contrastive fine-tuning on A/B-tested pairs of ad texts, combining the
//!    likelihood of both texts with a margin or InfoNCE term that prefers the
//!    higher-CTR text.
//!
//! All model math runs on the in-crate [`numeric`] autodiff so every
//! objective can be checked against finite differences.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod masking;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
