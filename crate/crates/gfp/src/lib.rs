//! Graph-based audio fingerprinting toolkit.
//!
//! Audio is cut into overlapping one-second segments, each segment is encoded
//! into a 128-dimensional unit-norm fingerprint by a graph neural network over
//! time-frequency points, and noisy query snippets are matched against a
//! reference database through an in-repo IVF-PQ index with offset-compensated
//! sequence scoring. The encoder is trained with self-supervised contrastive
//! learning (NT-Xent) over augmented views.

pub mod augment;
pub mod config;
pub mod encoder;
pub mod error;
pub mod features;
pub mod index;
pub mod retrieval;
pub mod synth;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
