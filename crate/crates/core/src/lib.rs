//! CT-volume COVID-19 diagnosis with a modified Xception slice classifier.
//!
//! Slices are scored by a frozen Xception base plus a small trainable head,
//! thresholded into slice labels, and aggregated into a patient-level
//! diagnosis by majority vote.

pub mod tensor;
pub mod xception;
pub mod weights_io;
pub mod metrics;
pub mod diagnosis;
pub mod ingest;
pub mod trainer;
pub mod pipeline;
