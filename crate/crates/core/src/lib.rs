//! Semi-supervised open-set fault diagnosis on sensor graphs.
//!
//! The pipeline trains a Chebyshev graph-convolution classifier on labeled
//! known-fault data, scores unlabeled test samples against per-class
//! Gaussians in a fused fully-connected feature space, keeps the rejected
//! samples whose nearest neighbours agree, and retrains with an extra
//! unknown-class output.
//!
//! Data-parallel loops (batch inference, per-sample gradients, neighbour
//! search, scoring) run on rayon when the `parallel` feature is enabled and
//! fall back to plain iterators otherwise. Reductions are performed in a
//! fixed order so both builds produce bit-identical results.

pub mod consistency;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nnet;
pub mod openset;
pub mod par;
pub mod pipeline;
pub mod special;

pub use error::{Error, Result};
