//! Peer-effect inference for one-shot program adoption.
//!
//! Households on a spatial peer network adopt a program either on their own
//! (autoinfection, driven by a piecewise baseline hazard and covariates) or
//! through contagion from neighbors whose adoption is visible. The crate
//! covers the whole pipeline:
//!
//! * [`ingest`]: household files, month discretization, neighborhood samples.
//! * [`geonet`]: Euclidean and on-road distances, threshold peer networks.
//! * [`epimodel`]: the discrete-time SEIR-with-autoinfection likelihood and
//!   the equivalent hazard formulations.
//! * [`inference`]: bounded maximum likelihood, Fisher standard errors, AIC
//!   model comparison.
//! * [`simulate`]: forward Monte Carlo, synthetic data, cross-validated RMSE.
//! * [`glm`]: logistic regression baseline.
//! * [`cli`]: the `peerspread` batch front end.

pub mod cli;
pub mod epimodel;
pub mod geonet;
pub mod glm;
pub mod inference;
pub mod ingest;
pub mod simulate;

mod error;

pub use error::{Error, Result};
