//! # sfl-core
//!
//! A numerical laboratory for spectral graph filters built from orthogonal
//! polynomial bases. The crate covers the full pipeline at desk scale:
//!
//! - [`graph`] — CSR sparse graph operators: symmetric normalized Laplacians,
//!   spectral domain mappings, and the sparse-times-dense kernel.
//! - [`autograd`] — a small tape-based reverse-mode differentiation engine
//!   over dense 64-bit tensors, including the primitives a two-layer graph
//!   filter model needs (spmm, layer norm, log-softmax, dropout) plus an
//!   Adam optimizer with decoupled weight decay.
//! - [`basis`] — Chebyshev, Jacobi, Laguerre, Meixner and Krawtchouk bases
//!   evaluated by three-term recurrence, both as scalar functions and as
//!   operator polynomials applied to feature blocks. Recurrence coefficients
//!   are differentiable in the basis shape parameters, so the filter shape
//!   itself can be trained.
//! - [`model`] — the two-layer `PolyBaseModel` with per-order linear weights
//!   and optional per-term LayerNorm stabilization; named configurations
//!   (ChebyNet, S-JacobiNet, L-JacobiNet, LaguerreNet, MeixnerNet,
//!   KrawtchoukNet) and a binary checkpoint codec.
//! - [`data`] — dataset representation, a human-diffable on-disk format,
//!   stochastic block model generation with a homophily dial, and split /
//!   fold management.
//! - [`train`] — the training loop with early stopping, the k-fold protocol,
//!   the K-ablation sweep, and result serialization.
//! - [`oracles`] — independent reference routes (hypergeometric series,
//!   trigonometric identities, a dense symmetric eigensolver, finite
//!   differences) used to cross-check the fast paths.
//! - [`check`] — the runnable oracle/invariant suites behind `sfl check`.
//!
//! Everything is `f64`, seeded, and deterministic: identical configuration
//! and seed produce byte-identical result files.

pub mod autograd;
pub mod basis;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod graph;
pub mod model;
pub mod oracles;
pub mod train;

pub use graph::{CsrMatrix, DomainMapping, MappingKind};
