//! Heterogeneity-aware clusterwise language modelling over browsing sessions.
//!
//! A router assigns each user history to one of several small causal
//! language models; models and router are trained jointly so that clusters
//! specialise on behaviourally distinct users.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod parallel;
pub mod predictor;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
