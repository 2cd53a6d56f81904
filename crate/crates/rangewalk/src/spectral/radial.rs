use crate::error::{Error, Result};
use crate::lattice::{GridFunction, ScaleRelation};
use crate::numeric::simpson;
use crate::spectral::bessel::{bessel_first_zero, bessel_j};
use crate::spectral::continuum_constants;

/// The L2-normalised principal Dirichlet eigenfunction of -Delta on the ball
/// B(0, rho_d), tabulated as a radial profile on [0, rho_d].
///
/// phi(r) = c * r^(1 - d/2) * J_{d/2-1}(j r / rho_d) with j the first Bessel
/// zero; the derivative comes from the exact recurrence, not differencing.
#[derive(Clone, Debug)]
pub struct RadialEigenfunction {
    d: usize,
    lambda: f64,
    rho: f64,
    zero: f64,
    norm_const: f64,
    samples: Vec<f64>,
    deriv_samples: Vec<f64>,
    dr: f64,
    norm_check: f64,
}

/// Builds the radial eigenfunction profile with at least `resolution`
/// samples on [0, rho_d].
pub fn eigenfunction_profile(d: usize, resolution: usize) -> Result<RadialEigenfunction> {
    if resolution < 1000 {
        return Err(Error::invalid("radial resolution must be >= 1000"));
    }
    let spec = continuum_constants(d)?;
    let rho = spec.rho;
    let order = d as f64 / 2.0 - 1.0;
    let zero = bessel_first_zero(order)?;
    // normalisation from int_0^1 t J_nu(j t)^2 dt = J_{nu+1}(j)^2 / 2
    let surface = d as f64 * spec.omega; // area of the unit sphere
    let j_next = bessel_j(order + 1.0, zero);
    let norm_const = 1.0 / (j_next * rho * (surface / 2.0).sqrt());

    let dr = rho / resolution as f64;
    let k = zero / rho;
    let mut samples = Vec::with_capacity(resolution + 1);
    let mut deriv_samples = Vec::with_capacity(resolution + 1);
    for i in 0..=resolution {
        let r = i as f64 * dr;
        samples.push(radial_value(d, norm_const, k, order, r));
        deriv_samples.push(radial_derivative(d, norm_const, k, order, r));
    }

    // quadrature check of the L2 normalisation
    let vals_sq: Vec<f64> = (0..=resolution)
        .map(|i| {
            let r = i as f64 * dr;
            samples[i] * samples[i] * r.powi(d as i32 - 1)
        })
        .collect();
    let norm_check = surface * simpson(&vals_sq, dr);

    Ok(RadialEigenfunction {
        d,
        lambda: spec.lambda,
        rho,
        zero,
        norm_const,
        samples,
        deriv_samples,
        dr,
        norm_check,
    })
}

fn radial_value(d: usize, c: f64, k: f64, order: f64, r: f64) -> f64 {
    if r == 0.0 {
        // limit of r^(1-d/2) J_nu(kr): (k/2)^nu / Gamma(nu+1)
        let nu = order;
        return c * ((0.5 * k).powf(nu) / crate::numeric::ln_gamma(nu + 1.0).exp());
    }
    c * r.powf(1.0 - d as f64 / 2.0) * bessel_j(order, k * r)
}

fn radial_derivative(d: usize, c: f64, k: f64, order: f64, r: f64) -> f64 {
    // phi'(r) = -c k r^(1-d/2) J_{nu+1}(kr) via the Bessel recurrence
    if r == 0.0 {
        return 0.0;
    }
    -c * k * r.powf(1.0 - d as f64 / 2.0) * bessel_j(order + 1.0, k * r)
}

impl RadialEigenfunction {
    #[inline]
    pub fn dimension(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn rho(&self) -> f64 {
        self.rho
    }

    #[inline]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Recorded quadrature value of the squared L2 norm over the ball.
    #[inline]
    pub fn norm_check(&self) -> f64 {
        self.norm_check
    }

    #[inline]
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// phi(r), zero outside the ball; linear interpolation of the table.
    pub fn value(&self, r: f64) -> f64 {
        if r < 0.0 || r >= self.rho {
            return 0.0;
        }
        let t = r / self.dr;
        let i = t as usize;
        if i + 1 >= self.samples.len() {
            return *self.samples.last().unwrap();
        }
        let frac = t - i as f64;
        self.samples[i] * (1.0 - frac) + self.samples[i + 1] * frac
    }

    /// Exact evaluation (Bessel series), used where accuracy matters.
    pub fn value_exact(&self, r: f64) -> f64 {
        if r < 0.0 || r >= self.rho {
            return 0.0;
        }
        let order = self.d as f64 / 2.0 - 1.0;
        radial_value(self.d, self.norm_const, self.zero / self.rho, order, r)
    }

    /// phi'(r) from the tabulated recurrence values.
    pub fn derivative(&self, r: f64) -> f64 {
        if r < 0.0 || r > self.rho {
            return 0.0;
        }
        let t = r / self.dr;
        let i = (t as usize).min(self.deriv_samples.len() - 1);
        if i + 1 >= self.deriv_samples.len() {
            return *self.deriv_samples.last().unwrap();
        }
        let frac = t - i as f64;
        self.deriv_samples[i] * (1.0 - frac) + self.deriv_samples[i + 1] * frac
    }

    /// |phi'(rho_d)|, the inward slope at the ball boundary.
    pub fn boundary_slope(&self) -> f64 {
        -*self.deriv_samples.last().unwrap()
    }

    /// Quadrature of the Dirichlet integral int |grad phi|^2 over the ball.
    pub fn grad_sq_integral(&self) -> f64 {
        let surface = self.d as f64 * crate::spectral::unit_ball_volume(self.d);
        let vals: Vec<f64> = (0..self.samples.len())
            .map(|i| {
                let r = i as f64 * self.dr;
                self.deriv_samples[i].powi(2) * r.powi(self.d as i32 - 1)
            })
            .collect();
        surface * simpson(&vals, self.dr)
    }

    /// Samples phi (not squared) at cell centers of a grid with the given
    /// spacing, on cells overlapping the ball around `center`.
    pub fn sample_grid(&self, center: &[f64], spacing: f64) -> Result<GridFunction> {
        let dim = crate::lattice::Dim::new(self.d)?;
        let mut grid = GridFunction::new(dim, spacing)?;
        self.fill_grid(center, &mut grid, |phi| phi)?;
        Ok(grid)
    }

    /// Samples phi^2 at cell centers and renormalises to discrete integral 1.
    pub fn sample_grid_squared_normalised(
        &self,
        center: &[f64],
        spacing: f64,
    ) -> Result<GridFunction> {
        let dim = crate::lattice::Dim::new(self.d)?;
        let mut grid = GridFunction::new(dim, spacing)?;
        self.fill_grid(center, &mut grid, |phi| phi * phi)?;
        grid.normalise()?;
        Ok(grid)
    }

    fn fill_grid(
        &self,
        center: &[f64],
        grid: &mut GridFunction,
        map: impl Fn(f64) -> f64,
    ) -> Result<()> {
        if center.len() != self.d {
            return Err(Error::invalid("center has the wrong dimension"));
        }
        let h = grid.spacing();
        let lo: Vec<i32> = center
            .iter()
            .map(|&c| ((c - self.rho) / h).floor() as i32 - 1)
            .collect();
        let hi: Vec<i32> = center
            .iter()
            .map(|&c| ((c + self.rho) / h).ceil() as i32 + 1)
            .collect();
        let dim = grid.dim();
        let mut idx = lo.clone();
        loop {
            let cell = dim.pack(&idx)?;
            let cc = grid.cell_center(cell);
            let r2: f64 = cc
                .iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = map(self.value(r2.sqrt()));
            if v > 0.0 {
                grid.set(cell, v)?;
            }
            let mut axis = 0;
            loop {
                if axis == self.d {
                    return Ok(());
                }
                idx[axis] += 1;
                if idx[axis] <= hi[axis] {
                    break;
                }
                idx[axis] = lo[axis];
                axis += 1;
            }
        }
    }
}

/// Samples (phi_center)^2 on the cells of the 1/n grid and renormalises the
/// discrete integral to one.
pub fn phi_squared_on_lattice(
    profile: &RadialEigenfunction,
    center: &[f64],
    scale: &ScaleRelation,
) -> Result<GridFunction> {
    profile.sample_grid_squared_normalised(center, scale.spacing())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Dim;
    use std::f64::consts::PI;

    #[test]
    fn l2_norm_is_one_within_quadrature_tolerance() {
        for d in 1..=4 {
            let phi = eigenfunction_profile(d, 4000).unwrap();
            assert!(
                (phi.norm_check() - 1.0).abs() < 1e-8,
                "d = {d}: |phi|_2^2 = {}",
                phi.norm_check()
            );
        }
    }

    #[test]
    fn d3_profile_matches_sine_solution() {
        // in d = 3 the eigenfunction is proportional to sin(pi r / rho) / r
        let phi = eigenfunction_profile(3, 4000).unwrap();
        let rho = phi.rho();
        let c = 1.0 / (2.0 * PI * rho).sqrt();
        for &t in &[0.05, 0.2, 0.5, 0.8, 0.95] {
            let r = t * rho;
            let expect = c * (PI * r / rho).sin() / r;
            let got = phi.value_exact(r);
            assert!(
                (got - expect).abs() < 1e-10,
                "r = {r}: {got} vs {expect}"
            );
        }
        // ODE shooting oracle: u = r*phi satisfies u'' = -lambda u with
        // u(0) = 0, so integrating by RK4 must return to zero at r = rho
        // and match the profile shape along the way.
        let lambda = phi.lambda() / (rho * rho);
        let n = 20_000;
        let h = rho / n as f64;
        let mut u = 0.0f64;
        let mut du = 1.0f64;
        let mut max_u: f64 = 0.0;
        let mut shape_ratio: Option<f64> = None;
        for i in 0..n {
            // RK4 for the linear system (u, du)
            let f = |u: f64, du: f64| (du, -lambda * u);
            let (k1u, k1v) = f(u, du);
            let (k2u, k2v) = f(u + 0.5 * h * k1u, du + 0.5 * h * k1v);
            let (k3u, k3v) = f(u + 0.5 * h * k2u, du + 0.5 * h * k2v);
            let (k4u, k4v) = f(u + h * k3u, du + h * k3v);
            u += h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
            du += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            max_u = max_u.max(u.abs());
            if i == n / 2 {
                let r = (i + 1) as f64 * h;
                shape_ratio = Some(u / (phi.value_exact(r) * r));
            }
        }
        assert!(u.abs() < 1e-8 * max_u, "shooting residual {u}");
        // shape agreement at a second probe point, using the mid-run ratio
        let ratio = shape_ratio.unwrap();
        let r_probe = 0.25 * rho;
        let steps = (r_probe / h) as usize;
        let u_probe = (lambda.sqrt() * (steps as f64 * h)).sin() / lambda.sqrt();
        let expect = ratio * phi.value_exact(steps as f64 * h) * (steps as f64 * h);
        assert!((u_probe - expect).abs() < 1e-6 * max_u);
    }

    #[test]
    fn rayleigh_quotient_matches_eigenvalue() {
        for d in [2usize, 3, 4] {
            let phi = eigenfunction_profile(d, 4000).unwrap();
            let expect = phi.lambda() / (phi.rho() * phi.rho());
            let got = phi.grad_sq_integral();
            assert!(
                (got - expect).abs() < 1e-4 * expect,
                "d = {d}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn profile_is_nonnegative_nonincreasing_with_negative_boundary_slope() {
        let phi = eigenfunction_profile(3, 2000).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..phi.sample_count() {
            let v = phi.samples[i];
            assert!(v >= 0.0);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
        // finite-difference slope estimate at the boundary is strictly negative
        let rho = phi.rho();
        let fd = (phi.value(rho - 1e-6) - phi.value(rho - 2e-6)) / 1e-6;
        assert!(fd < 0.0);
        assert!(phi.boundary_slope() > 0.0);
    }

    #[test]
    fn grid_sampling_peaks_at_center_cell_and_normalises() {
        let dim = Dim::new(3).unwrap();
        let scale = ScaleRelation::new(dim, 8).unwrap();
        let phi = eigenfunction_profile(3, 2000).unwrap();
        let center = [0.13, -0.02, 0.31];
        let grid = phi_squared_on_lattice(&phi, &center, &scale).unwrap();
        assert!((grid.integral() - 1.0).abs() < 1e-12);
        let center_cell = grid.cell_of(&center).unwrap();
        let vmax = grid
            .cells()
            .map(|(_, v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(grid.get(center_cell) >= vmax - 1e-12);
    }

    #[test]
    fn grid_sampling_l1_error_decreases_with_n() {
        // L1 distance between the renormalised sampling and the exact phi^2
        // computed on a much finer reference grid
        let phi = eigenfunction_profile(3, 3000).unwrap();
        let center = [0.0, 0.0, 0.0];
        let dim = Dim::new(3).unwrap();
        let mut errs = Vec::new();
        for n in [8u32, 16, 32] {
            let scale = ScaleRelation::new(dim, n).unwrap();
            let grid = phi_squared_on_lattice(&phi, &center, &scale).unwrap();
            // quadrature of |grid - phi^2| by 2^d subsamples per cell
            let h = scale.spacing();
            let mut err = 0.0;
            let sub = [0.25, 0.75];
            for (cell, v) in grid.cells() {
                let base: Vec<f64> = (0..3).map(|a| dim.coord(cell, a) as f64 * h).collect();
                for &ox in &sub {
                    for &oy in &sub {
                        for &oz in &sub {
                            let p = [base[0] + ox * h, base[1] + oy * h, base[2] + oz * h];
                            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                            let exact = phi.value(r).powi(2);
                            err += (v - exact).abs() * h * h * h / 8.0;
                        }
                    }
                }
            }
            errs.push(err);
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "errs = {errs:?}");
        // error <= C/n with one constant across the grids (10% headroom)
        let c = errs[0] * 8.0 * 1.1;
        assert!(errs[1] <= c / 16.0 && errs[2] <= c / 32.0, "errs = {errs:?}");
    }
}
