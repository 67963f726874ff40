//! Generative model of the ECN limit order book.

pub mod agent;
pub mod data;
pub mod dynamics;
pub mod gmm;

use thiserror::Error;

use crate::lob::BookError;

pub use agent::{
    apply_orders, build_orders, fit_decay_rate, initial_book, plan_meta_orders, split_meta_orders, target_volumes, BookShape, EcnAgent, EcnOrder, EcnOrderKind,
    EcnStepReport, OrderSizeDist, SnapshotVariation,
};
pub use data::{fit_ecn_model, ingest_l2, read_l2_csv, EcnFitOptions, EcnModel, EcnSampler, L2Dataset, L2Row};
pub use dynamics::{
    apply_dynamics, apply_split, longrange_moments, variance_polynomial, IncrementSampler, LevelParams, LongRangeMoments, MultiLevelParams, Regime,
    VariancePolynomial,
};
pub use gmm::{em_fit, EmFit, EmInit, EmOptions, GaussianMixture, GaussianMixtureParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EcnError {
    #[error("non-finite value")]
    NonFinite,
    #[error("negative volume {0}")]
    NegativeVolume(f64),
    #[error("removal fraction {0} exceeds one")]
    RemovalAboveOne(f64),
    #[error("mean removal rate must be positive")]
    NoMeanReversion,
    #[error("degenerate moments: {0}")]
    Degenerate(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("covariance is singular")]
    SingularCovariance,
    #[error("no data")]
    EmptyData,
    #[error("book has no two-sided quote")]
    EmptyBook,
    #[error("data row {row}: {msg}")]
    Data { row: usize, msg: String },
    #[error(transparent)]
    Book(#[from] BookError),
}
