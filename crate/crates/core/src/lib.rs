//! Speaker-verification backends over fixed-dimension embeddings.
//!
//! The crate covers the generative PLDA backend and three discriminative
//! alternatives (pairwise Gaussian backend, discriminative PLDA and the
//! neural PLDA network trained on a soft detection cost), plus trial
//! sampling, training, detection metrics and a synthetic data generator.
//! See the `examples/` directory for one runnable program per capability.

pub mod baselines;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod gplda;
pub mod linalg;
pub mod metrics;
pub mod nplda;
pub mod preprocess;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
