//! Knowledge-aware multi-label heart-sound diagnosis at desk scale.
//!
//! The crate covers the full loop from raw data to evaluated model:
//!
//! - [`catalog`] distills free-text echocardiography reports into a fixed
//!   multi-label abnormality schema and per-record label vectors.
//! - [`audiofeat`] turns multi-site auscultation waveforms into log mel
//!   filter-bank features and applies training-time augmentations.
//! - [`synthgen`] generates labeled synthetic corpora with per-class
//!   acoustic signatures, standing in for clinical recordings.
//! - [`model`] is the query-based transformer: definition-text queries
//!   cross-attend to encoded audio, trained with a joint BCE + contrastive
//!   objective (learnable mixing weight).
//! - [`pipeline`] implements the AdamW training loop with warmup + cosine
//!   schedule and description-ensemble inference.
//! - [`metrics`] computes per-class and macro precision/recall/F1, ROC/AUC,
//!   and runs the train/infer ablation harnesses.
//!
//! Batch-level work (corpus generation, feature extraction, per-sample
//! gradients) is data-parallel via rayon when the default `parallel`
//! feature is enabled; a sequential fallback is always available and both
//! paths produce bit-identical results.

pub mod audiofeat;
pub mod catalog;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod synthgen;
pub mod tensor;
pub mod util;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
