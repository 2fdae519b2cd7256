//! Atomic motion analysis and tokenization.
//!
//! The crate turns skeletal motion into per-body-part motion phrases, quantizes
//! motion into residual token stacks, aligns text and motion features with a
//! symmetric InfoNCE objective, and provides the masked generative decoding
//! machinery plus the usual evaluation metrics.
//!
//! Batch-shaped work (descriptor extraction over many motions, k-means
//! assignment, token encoding) runs on rayon when the `parallel` feature is
//! enabled. Every such entry point takes an [`Execution`] so callers can force
//! the sequential path; both paths produce bit-identical results.

pub mod align;
pub mod decompose;
pub mod exec;
pub mod generative;
pub mod llm;
pub mod matrix_io;
pub mod metrics;
pub mod motion;
pub mod rvq;
pub mod synthetic;

pub use exec::Execution;
pub use motion::{BodyPart, MotionDataset, MotionSequence, Skeleton};
