//! Probing heads over frozen vision-backbone embeddings.
//!
//! The crate trains and evaluates two classifier heads on precomputed
//! patch/[CLS] embeddings: a plain linear probe over the [CLS] token, and
//! GLoRI, an attention head that pools disease-specific local features with
//! adaptive softmax temperatures and pyramid patch merging, then integrates
//! the global [CLS] features through a skip connection.
//!
//! Everything is built on a small reverse-mode autodiff core ([`tensor`])
//! whose gradients are verified against central finite differences. Training
//! ([`train`]) is AdamW with the learning-rate grid protocol; evaluation
//! ([`stats`]) covers AUPRC/AUROC with bootstrap confidence intervals,
//! paired permutation tests, prevalence stratification, and survival
//! analysis (Kaplan-Meier, log-rank). [`data`] holds the binary embedding
//! store, label/survival tables, and a seeded planted-signal generator that
//! stands in for a real backbone.

pub mod data;
pub mod error;
pub mod head;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
