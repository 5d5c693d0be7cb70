//! Hierarchical multimodal VAE for co-registered grayscale image modalities.
//!
//! The model learns a shared hierarchy of latent variables across M
//! modalities of the same scene. A variational posterior is formed for any
//! non-empty subset of observed modalities by fusing per-modality experts
//! with the hierarchical prior as a product of Gaussians, and a mixture over
//! sub-subsets makes the training objective robust to incomplete data.
//! Decoders map the finest latent level back to every modality, so missing
//! images can be synthesized from whatever is available; per-modality critics
//! sharpen those syntheses.
//!
//! The crate ships a synthetic multimodal dataset generator, analytic and
//! brute-force oracles used by the test suite, evaluation metrics and grids,
//! and a CLI wrapping the whole workflow. A guided tour lives in `book/`;
//! its code snippets compile as doc-tests (see `src/book.rs`).

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod missingness;
pub mod model;
pub mod objective;
pub mod oracles;
pub mod synthdata;
pub mod tensor;

mod book;

pub use error::{Error, Result};
