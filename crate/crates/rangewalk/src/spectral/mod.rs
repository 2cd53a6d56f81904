//! Continuum variational constants of the limiting ball, the radial
//! eigenfunction and its lattice samplings, discrete principal eigenpairs on
//! finite domains, and the positively-extended modified eigenfunction used
//! to tilt the walk.

mod bessel;
mod discrete;
mod modified;
mod radial;

pub use bessel::{bessel_first_zero, bessel_j};
pub use discrete::{
    discrete_principal_eigenpair, lattice_ball, refine_eigenpair_pointwise,
    second_dirichlet_eigenvalue, DiscreteEigenpair,
};
pub use modified::{modified_eigenfunction, ModifiedEigenfunction};
pub use radial::{eigenfunction_profile, phi_squared_on_lattice, RadialEigenfunction};

use crate::error::{Error, Result};
use crate::numeric::ln_gamma;

/// Volume of the unit Euclidean ball in dimension d.
pub fn unit_ball_volume(d: usize) -> f64 {
    let d = d as f64;
    (d / 2.0 * std::f64::consts::PI.ln() - ln_gamma(d / 2.0 + 1.0)).exp()
}

/// The continuum constants of the limiting ball shape.
///
/// lambda is the first Dirichlet eigenvalue of -Delta on the unit ball,
/// omega the unit-ball volume, rho the minimiser of
/// psi(r) = omega r^d + lambda / (2 d r^2), and chi = psi(rho) the
/// free-energy rate.
#[derive(Clone, Copy, Debug)]
pub struct BallSpectrum {
    pub d: usize,
    pub lambda: f64,
    pub omega: f64,
    pub rho: f64,
    pub chi: f64,
}

impl BallSpectrum {
    /// psi(r) = omega_d r^d + lambda_d / (2 d r^2), for r > 0.
    pub fn psi(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::invalid(format!("psi requires r > 0 (got {r})")));
        }
        let d = self.d as f64;
        Ok(self.omega * r.powf(d) + self.lambda / (2.0 * d * r * r))
    }
}

/// Computes the ball constants for dimension d >= 1.
///
/// lambda_d is the square of the first positive zero of J_{d/2-1};
/// rho_d = (lambda_d / (d^2 omega_d))^(1/(d+2)) and
/// chi_d = ((d+2)/2) (lambda_d/d^2)^(d/(d+2)) omega_d^(2/(d+2)).
pub fn continuum_constants(d: usize) -> Result<BallSpectrum> {
    if d == 0 {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    if d > 40 {
        return Err(Error::invalid(
            "dimensions above 40 exceed the Bessel series' accurate range",
        ));
    }
    let order = d as f64 / 2.0 - 1.0;
    let zero = bessel_first_zero(order)?;
    let lambda = zero * zero;
    let omega = unit_ball_volume(d);
    let df = d as f64;
    let rho = (lambda / (df * df * omega)).powf(1.0 / (df + 2.0));
    let chi =
        (df + 2.0) / 2.0 * (lambda / (df * df)).powf(df / (df + 2.0)) * omega.powf(2.0 / (df + 2.0));
    Ok(BallSpectrum {
        d,
        lambda,
        omega,
        rho,
        chi,
    })
}

/// psi(r) for dimension d (convenience wrapper).
pub fn psi(r: f64, d: usize) -> Result<f64> {
    continuum_constants(d)?.psi(r)
}
