//! Numerical core for continuous graph neural networks on Cartesian product
//! graphs.
//!
//! A signal living on a product of `P` factor graphs is stored as a dense
//! order-`(P+1)` tensor (one mode per factor, channels last). The central
//! operation is the separable heat kernel: diffusing along the product graph
//! factorizes into one small kernel per factor,
//!
//! ```text
//! exp(-t (L_P (+) ... (+) L_1)) = exp(-t L_P) (x) ... (x) exp(-t L_1)
//! ```
//!
//! where `(+)` is the Kronecker sum and `(x)` the Kronecker product, so the
//! product-sized operator is never materialized. On top of that sit:
//!
//! * [`tensor`]: dense tensors, matricization, mode products, vectorization;
//! * [`graph`]: factor-graph construction, Kronecker sums/products, seeded
//!   random graphs, adjacency perturbation at prescribed SNR;
//! * [`spectral`]: a dense symmetric eigensolver, eigenpair truncation, and
//!   per-factor spectral filters;
//! * [`layer`]: diffusion layers (dense, spectral, and RK4-integrated routes),
//!   block stacks, and the windowed forecasting model;
//! * [`train`]: losses, hand-derived reverse-mode gradients, finite-difference
//!   checks, Adam, and a deterministic training loop;
//! * [`analysis`]: Dirichlet energies, over-smoothing bounds, perturbation
//!   stability sweeps, and product-mismatch bounds;
//! * [`io`]: CSV matrices and exact-round-trip model checkpoints.
//!
//! Everything is generic over the scalar type through [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below pin the `f64` instantiations used by
//! the experiment binary and the test suites.

pub mod analysis;
pub mod error;
pub mod graph;
pub mod io;
pub mod layer;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{CitrusError, Result};
pub use scalar::Scalar;

/// Dense matrix over `f64`.
pub type Matrix64 = tensor::Matrix<f64>;
/// Dense tensor over `f64`.
pub type Tensor64 = tensor::DenseTensor<f64>;
/// Validated factor graph over `f64`.
pub type FactorGraph64 = graph::FactorGraph<f64>;
/// Eigenpair basis over `f64`.
pub type SpectralBasis64 = spectral::SpectralBasis<f64>;
/// Diffusion block over `f64`.
pub type CitrusBlock64 = layer::CitrusBlock<f64>;
/// Block chain with optional readout over `f64`.
pub type BlockStack64 = layer::BlockStack<f64>;
/// Windowed forecasting model over `f64`.
pub type CitrusModel64 = layer::CitrusModel<f64>;
/// Saved model plus provenance over `f64`.
pub type Checkpoint64 = io::Checkpoint<f64>;

/// Single-precision variants, mostly exercised to keep the crate honest about
/// its scalar genericity.
pub type Matrix32 = tensor::Matrix<f32>;
pub type Tensor32 = tensor::DenseTensor<f32>;
