//! Query-by-example spoken term detection.
//!
//! Frame features ([`features`]) feed either a bottleneck network ([`bnf`])
//! or go straight to matching. Matching is subsequence DTW ([`dtwsearch`]) or
//! a CNN over similarity images ([`simimage`], [`cnnmatch`]); [`e2e`] trains
//! the feature extractor and the CNN jointly. [`evalkit`] scores the output
//! and [`corpus`] generates synthetic data to run all of it on.

pub mod archive;
pub mod bnf;
pub mod cnnmatch;
pub mod config;
pub mod corpus;
pub mod dtwsearch;
pub mod e2e;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod pipeline;
pub mod scores;
pub mod simimage;
mod util;

pub use error::{QbeError, Result};
pub use util::{derive_seed, fmt_f64, parse_f64};
