//! A trainable critic for image captioning evaluation.
//!
//! The library scores a candidate caption by the probability that it was
//! written by a person, conditioned on the image (and optionally a reference
//! caption). Around that core sit caption transforms for probing metric
//! robustness, rule-based baseline metrics (BLEU, ROUGE-L, CIDEr), a small
//! reverse-mode autodiff engine the critic trains on, and correlation
//! statistics for comparing metrics against human judgments.

// Indexed loops in the numeric kernels mirror the subscripts in the math.
#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod corpus;
pub mod critic;
pub mod encoder;
pub mod error;
pub mod evalstats;
pub mod fusion;
pub mod stablehash;
pub mod trainer;

pub use error::{Error, Result};
