//! Batch analysis engine for format-invariance studies of sparse-autoencoder
//! features.
//!
//! The engine consumes residual-stream activation dumps (see [`actstore`]) and
//! behavioral generation records (see [`behavior`], [`harness`]) produced by a
//! model-side extraction harness, and computes:
//!
//! - SAE encodings and diagnostics ([`sae`]),
//! - contrastive medical-feature selection and random control pools ([`features`]),
//! - sMAPE / cosine invariance statistics with bootstrap and resampling
//!   inference ([`invariance`]),
//! - residual format directions and intervention magnitudes ([`direction`]),
//! - decision-token logit attribution ([`attribution`]),
//! - behavioral scoring, gap decomposition and option-shuffle analysis ([`behavior`]),
//! - leave-one-out flip-prediction probes ([`probes`]).
//!
//! [`report`] renders results as fixed-width text tables and [`synth`] builds
//! deterministic synthetic corpora for tests and demonstrations.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod actstore;
pub mod attribution;
pub mod behavior;
pub mod direction;
pub mod error;
pub mod features;
pub mod harness;
pub mod invariance;
pub mod probes;
pub mod report;
pub mod rng;
pub mod sae;
pub mod scalar;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Sae32 = sae::SaeParams<f32>;
pub type Sae64 = sae::SaeParams<f64>;
pub type Encoded32 = sae::EncodedDump<f32>;
pub type Encoded64 = sae::EncodedDump<f64>;
pub type Pooled32 = invariance::PooledVector<f32>;
pub type Pooled64 = invariance::PooledVector<f64>;
pub type Direction32 = direction::FormatDirection<f32>;
pub type Direction64 = direction::FormatDirection<f64>;
pub type Steering32 = direction::SteeringVector<f32>;
pub type Steering64 = direction::SteeringVector<f64>;
pub type Unembedding32 = attribution::Unembedding<f32>;
pub type Unembedding64 = attribution::Unembedding<f64>;
