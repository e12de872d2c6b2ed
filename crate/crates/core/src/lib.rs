//! Exact second-order MAML with one-class domain-adaptation (OC-DA) task
//! sampling.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: flat parameter vectors, losses, exact gradients and
//!   Hessian-vector products (forward-over-reverse with dual numbers).
//! - [`models`]: the convolutional model families and small MLPs.
//! - [`tasks`]: domain datasets and the three task samplers.
//! - [`meta`]: inner adaptation, the exact meta-gradient, Adam and the
//!   meta-training loop.
//! - [`analysis`]: the first-order Taylor approximation of the meta-gradient
//!   and gradient-alignment diagnostics.
//! - [`data`]: IDX ingestion, Rainbow-MNIST domains, the synthetic pump
//!   spectra generator, CSV spectra and domain splits.
//! - [`eval`]: accuracy, the ID/OOD/ID-test protocol, one-class meta-testing
//!   and result tables.

pub mod analysis;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod meta;
pub mod models;
pub mod tasks;

pub use error::{Error, Result};

/// Deterministic random stream used by every sampler in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Creates the crate's seeded random stream.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
