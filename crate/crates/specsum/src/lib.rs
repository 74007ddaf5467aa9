//! Matrix-free estimation of spectral sums — log-determinants and traces of
//! matrix functions — built on a differentiable computation graph.
//!
//! The crate is organized in layers:
//!
//! * [`linalg`] — dense vectors/matrices plus exact small-scale oracles
//!   (Cholesky log-determinant, Jacobi symmetric eigensolver) that every
//!   stochastic estimator is validated against.
//! * [`rng`] — seeded, splittable randomness so that estimator runs are pure
//!   functions of their inputs and seeds.
//! * [`graph`] — a reverse/forward-mode autodiff graph whose backward passes
//!   are themselves graphs, supporting the second-order differentiation needed
//!   to backpropagate through operator-vector products.
//! * [`estimators`] — power method, Hutchinson trace, and the Chebyshev and
//!   Taylor log-determinant estimators, all expressed over differentiable
//!   operator applications.
//! * [`density`] — residual-network models, their induced metric
//!   `M_f = J_fᵀ J_f`, implicit log-likelihoods and their spectral gradients.
//! * [`energies`] — the 2D test densities used by the training objectives.
//! * [`training`] — forward/reverse KL objectives, Adam, and the training loop.
//! * [`analysis`] — maximum-likelihood latent trajectories, metric spectra,
//!   eigenvector perturbation sweeps, and the effective-dimensionality measure.
//! * [`checkpoint`] / [`config`] — the on-disk model format and the run
//!   configuration format.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod density;
pub mod energies;
pub mod estimators;
pub mod graph;
pub mod linalg;
pub mod rng;
pub mod training;

pub use linalg::{Matrix, Vector};
pub use rng::SeedRng;
