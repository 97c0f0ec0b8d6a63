//! Multi-label coding of clinical notes with a from-scratch transformer
//! encoder and label-wise attention.
//!
//! The pipeline runs: [`corpus`] (normalization, vocabulary, chunking) →
//! [`cohort`] (label space, chronic-code imputation, patient splits) →
//! [`encoder`] / [`pretrain`] (masked-LM and next-sentence pretraining) →
//! [`heads`] (CLS, label-attention, recurrent and bag-of-words classifiers) →
//! [`eval`] (micro/macro ROC-AUC). [`numerics`] underpins the trainable parts.

pub mod cohort;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod numerics;
pub mod pretrain;

pub use error::{Error, Result};
