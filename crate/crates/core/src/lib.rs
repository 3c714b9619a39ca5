//! Bayesian open-set recognition over unit-sphere embeddings.
//!
//! The crate models a gallery of enrolled identities as a mixture of
//! von Mises–Fisher components plus a uniform out-of-gallery continuum,
//! and derives from it a decision rule, a gallery-aware confidence score
//! (GalUE) and a holistic score (HolUE) that also accounts for the
//! probe's own embedding uncertainty. Evaluation tooling (rejection
//! curves, Prediction Rejection Ratio), a synthetic protocol generator,
//! a bundle file format and independent numerical oracles ship alongside.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod gallery;
pub mod holue;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod protocol;
pub mod vmf;

pub use error::{Error, Result};
