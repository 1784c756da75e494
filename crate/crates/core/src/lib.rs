//! Data-driven closure models for dynamical systems with missing components.
//!
//! The crate simulates a full dynamical system, keeps only the resolved
//! variables, extracts the identifiable unresolved variable `theta` from
//! them, and learns `theta`'s evolution from delay embeddings of the resolved
//! and identifiable histories. Two estimators are provided: a Hermite
//! polynomial expansion of the conditional expectation ([`rkhs`]) and an LSTM
//! trained by backpropagation through time ([`lstm`]). The closed-loop model is
//! driven by [`predict`] and diagnosed with [`stats`] and [`theory`].
//!
//! Data-parallel loops (ensembles, Gram accumulation, batch gradients) run on
//! rayon when the `parallel` feature is enabled (the default) and fall back to
//! sequential iteration otherwise; see [`par`].

pub mod error;
pub mod estimator;
pub mod identify;
pub mod integrators;
pub mod io;
pub mod linalg;
pub mod lstm;
pub mod par;
pub mod predict;
pub mod rkhs;
pub mod rng;
pub mod series;
pub mod spectral;
pub mod stats;
pub mod systems;
pub mod theory;

pub use error::{Error, Result};
pub use estimator::{ClosureEstimator, EstimatorKind};
pub use rng::Rng;
pub use series::{make_delay_dataset, DelayDataset, DelayVector, TimeSeries};
pub use systems::SystemId;

pub use num_complex::Complex64;
