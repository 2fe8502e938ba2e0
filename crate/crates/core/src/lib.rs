//! Desk-scale contrastive training with increasingly hard negatives.
//!
//! The crate is organised around the training pipeline:
//!
//! - [`autodiff`] — reverse-mode automatic differentiation over dense `f64`
//!   tensors, with a built-in finite-difference verifier.
//! - [`geometry`] — embedding-space geometry: prior hard-negative mining,
//!   MoCHi mixing, segment projection, harder-negative synthesis, the
//!   hardness schedule, and the expository triplet loss.
//! - [`corpus`] — synthetic paired (image-feature, report) dataset generator
//!   plus the deterministic tf-idf prior report embedder.
//! - [`losses`] — the cosine dissimilarity loss, the three-matrix similarity
//!   bundle with diagonal negation, the CLIP-form contrastive loss,
//!   cross-entropy, and the combined objective.
//! - [`model`] — a Siamese two-layer MLP encoder and a single-block causal
//!   self-attention decoder with one shared parameter store.
//! - [`trainer`] — the min-max alternating training loop and the ablation
//!   runner.
//! - [`metrics`] — BLEU-n, ROUGE-L, CIDEr-D, n-gram diversity, recall@k.

pub mod autodiff;
pub mod corpus;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use autodiff::{Graph, NodeId, Tensor};
