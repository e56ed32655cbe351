//! Lightweight contrastive adaptation of frozen image embeddings with
//! vegetation relevé tables, and the ecological evaluation stack used to
//! judge the adapted embeddings.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense matrices, activations, seeded RNG substreams and a
//!   finite-difference gradient oracle.
//! * [`encoders`]: layers with hand-written backward passes and the encoder
//!   families (Botania MLP, linear adapters, MLP and attention variants).
//! * [`losses`]: sigmoid contrastive loss, similarity-preservation
//!   regularizer, cross-entropy and the supervised baseline loss.
//! * [`optim`] and [`train`]: AdamW, early stopping and the three training loops.
//! * [`data`], [`spatial`]: tabular preprocessing and buffered spatial folds.
//! * [`forest`], [`metrics`]: downstream random forests, ecological metrics,
//!   cluster indices and nonparametric tests.
//! * [`io`]: binary/CSV formats, run configuration and the synthetic generator.

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod forest;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod spatial;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
