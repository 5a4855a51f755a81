//! Learnable utility-maximization blocks composed into compositional utility
//! functions, trained as conditional Gibbs models.
//!
//! The core object is a *block*: a penalty reformulation of a constrained
//! utility-maximization problem,
//!
//! ```text
//! B(x, y) = λ0ᵀ φ(U(x, y)) − λ1ᵀ ρ(C(x, y)) − λ2ᵀ ψ(T(x, y))
//! ```
//!
//! where `U`, `C`, `T` are linear maps over a fixed monomial basis of the
//! concatenated input, `φ` rewards utility, `ρ` penalizes inequality
//! violations and `ψ` penalizes equality violations. Blocks stack into
//! layered networks with an affine readout, and the resulting scalar field
//! plays the role of a negative energy in a conditional Gibbs distribution
//! `p(y | x) ∝ exp(BL(x, y) / τ)`.
//!
//! Modules:
//! - [`poly`]: monomial bases and polynomial maps with exact derivatives.
//! - [`block`]: single penalty-form blocks (`bl`/`ibl` head styles).
//! - [`network`]: layered composition, skip wiring, exact backpropagation.
//! - [`gibbs`]: class probabilities, partition quadrature, Langevin sampling,
//!   and the high-dimensional constraint-enforcement diagnostic.
//! - [`training`]: hybrid cross-entropy + denoising score matching objective
//!   and optimizers.
//! - [`interpret`]: symbolic extraction, quotient canonicalization, DOT export.
//! - [`data`]: CSV ingestion, preprocessing, metrics, synthetic datasets.
//! - [`model_io`]: JSON model files with deterministic round-trips.

pub mod baseline;
pub mod block;
pub mod mat;
pub mod config;
pub mod data;
pub mod error;
pub mod gibbs;
pub mod interpret;
pub mod model_io;
pub mod network;
pub mod poly;
pub mod rng;
pub mod training;

pub use error::BlError;

/// Library version recorded in the provenance section of model files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
