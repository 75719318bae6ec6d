//! Density estimation with mixtures of factor analysers (MFA) and their deep,
//! greedily stacked variant (DMFA).
//!
//! An MFA models data as a mixture of low-rank-plus-diagonal Gaussians: each
//! component generates `x = W z + mu + noise` with standard-normal factors `z`
//! and diagonal noise. A DMFA replaces the standard-normal factor prior of
//! each component with a component-specific child MFA, trained layer by layer
//! on draws from the frozen parent's factor posteriors. The tree collapses
//! exactly back to a shallow MFA for likelihood evaluation and sampling.
//!
//! Module map:
//! * [`model`] — read-only density math: component/mixture log densities via
//!   the Woodbury identity, responsibilities, factor posteriors.
//! * [`em`] — maximum-likelihood MFA training by EM.
//! * [`deep`] — layer-wise stacking, exact collapse, ancestral sampling, and
//!   fast hard inference over the tree.
//! * [`data`] — dataset I/O, preprocessing, synthetic generators, splits.
//! * [`model_file`] — versioned binary model container with checksums.
//! * [`eval`] — held-out scoring, dense brute-force oracles, and the packaged
//!   deep-vs-shallow comparison experiments.

pub mod data;
pub mod deep;
pub mod em;
pub mod eval;
pub mod math;
pub mod model;
pub mod model_file;
pub mod rng;

mod error;

pub use error::{Error, Result};
