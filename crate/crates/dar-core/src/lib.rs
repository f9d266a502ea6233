//! Core library for studying feature entanglement under spurious correlations.
//!
//! The crate bundles everything needed to train small CNNs on procedurally
//! generated two-panel ("dominoes") images, swap the global-average-pooling
//! aggregation for a learned attention module post hoc, and quantify how much
//! each model relies on the core versus the spurious image component:
//!
//! * [`tensor`] — a minimal reverse-mode autodiff tape (f32 for training,
//!   f64 for gradient checking) plus an Adam optimizer.
//! * [`data`] — the synthetic dominoes generator, counterfactual component
//!   interventions, and group bookkeeping (subsample / reweight).
//! * [`model`] — conv/relu/maxpool backbones, GAP and multi-head attention
//!   aggregation, linear / two-layer classifier heads, checkpoints.
//! * [`train`] — ERM training, the post-hoc retraining family, grid search,
//!   and seeded multi-run aggregation.
//! * [`metrics`] — group accuracies, interventional core-effect percentages,
//!   activation/GradCAM mass ratios, histograms, and file exports.
//!
//! All randomness flows through explicit `u64` seeds and counter-based RNG
//! streams, and every kernel reduces in a fixed order, so identical inputs
//! produce bitwise-identical outputs with or without the `parallel` feature.

pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod train;
