//! A simulation and numerics laboratory for the random walk penalised by the
//! size of its range.
//!
//! The walk measure reweights N-step simple random walk paths by
//! exp(-|R_N|), where R_N is the set of visited sites. At the natural scale
//! n = N^(1/(d+2)) the walk localises in a Euclidean ball of radius rho_d n,
//! and its rescaled local-time profile approaches the squared principal
//! Dirichlet eigenfunction of that ball. This crate provides the pieces
//! needed to study that picture numerically:
//!
//! - [`lattice`]: walks, ranges, local times, Dirichlet energies, grids;
//! - [`spectral`]: the ball constants (lambda_d, omega_d, rho_d, chi_d), the
//!   radial eigenfunction, discrete Dirichlet eigenpairs, and the modified
//!   eigenfunction used for tilting;
//! - [`interpolation`]: multilinear interpolation with exact integral
//!   identities, and discrete Poincare-Sobolev/Wirtinger diagnostics;
//! - [`variational`]: Fraenkel asymmetry, the quantitative Faber-Krahn
//!   deficit on voxel domains, and shape functionals;
//! - [`dv`]: the Donsker-Varadhan martingale, fixed-profile bounds, the
//!   induced hitting chain, and large-deviation upper bounds;
//! - [`coarse`]: high-density blocks, local averaging, eta-discretisation,
//!   the Gamma budget, cutoffs and truncation inequalities;
//! - [`sampler`]: exact partition functions, Metropolis sampling of the
//!   penalised measure, annealed importance sampling, and the
//!   eigenfunction-tilted kernel;
//! - [`shape`]: profile-distance and fill tests, mesoscopic balls, bridges,
//!   stay/hit probabilities, and dyadic annuli.
//!
//! The `rangewalk` binary exposes the batch interface; see the crate
//! examples for runnable walkthroughs of each capability.

pub mod cli;
pub mod coarse;
pub mod dv;
pub mod error;
pub mod interpolation;
pub mod lattice;
pub mod numeric;
pub mod sampler;
pub mod shape;
pub mod spectral;
pub mod variational;

pub use error::{Error, Result};
