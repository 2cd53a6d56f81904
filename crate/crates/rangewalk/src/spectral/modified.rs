use crate::error::{Error, Result};
use crate::lattice::{ScaleRelation, Site, SiteField};
use crate::spectral::radial::{eigenfunction_profile, RadialEigenfunction};

/// The positive radial modification of the ball eigenfunction.
///
/// Inside B(0, rho_d) it equals phi + n^-kappa; on the shell it decreases
/// from n^-kappa to n^-kappa/2 along a monotone convex arc whose slope at
/// rho_d matches phi's radial derivative and vanishes where the arc meets
/// the constant tail; beyond the arc it stays at n^-kappa/2. The arc's
/// second derivative is of order n^kappa.
#[derive(Clone, Debug)]
pub struct ModifiedEigenfunction {
    d: usize,
    n: u32,
    kappa: f64,
    bump: f64,
    floor: f64,
    slope: f64,
    arc_width: f64,
    cubic: Option<[f64; 4]>,
    profile: RadialEigenfunction,
}

/// Builds the modified eigenfunction for the given scale and kappa in (0,1).
pub fn modified_eigenfunction(scale: &ScaleRelation, kappa: f64) -> Result<ModifiedEigenfunction> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::invalid("kappa must lie in (0, 1)"));
    }
    let d = scale.dim().get();
    let profile = eigenfunction_profile(d, 4096)?;
    let n = scale.n();
    let bump = (n as f64).powf(-kappa);
    let floor = bump / 2.0;
    let slope = profile.boundary_slope(); // a = |phi'(rho)| > 0
    let drop = bump - floor;
    // width 2*drop/a makes the Hermite arc an exact parabola with zero
    // terminal slope; clamp at the unit shell width
    let natural = 2.0 * drop / slope;
    let (arc_width, cubic) = if natural <= 1.0 {
        (natural, None)
    } else {
        // cubic Hermite on [0, 1]: p(0)=bump, p'(0)=-a, p(1)=floor, p'(1)=0
        let p0 = bump;
        let m0 = -slope;
        let dp = floor - bump;
        let c2 = 3.0 * dp - 2.0 * m0;
        let c3 = -2.0 * dp + m0;
        (1.0, Some([p0, m0, c2, c3]))
    };
    Ok(ModifiedEigenfunction {
        d,
        n,
        kappa,
        bump,
        floor,
        slope,
        arc_width,
        cubic,
        profile,
    })
}

impl ModifiedEigenfunction {
    #[inline]
    pub fn dimension(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn n(&self) -> u32 {
        self.n
    }

    #[inline]
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// The constant value n^-kappa / 2 taken beyond the shell.
    #[inline]
    pub fn floor(&self) -> f64 {
        self.floor
    }

    #[inline]
    pub fn rho(&self) -> f64 {
        self.profile.rho()
    }

    /// Reported bound on the shell's second radial derivative; the
    /// construction keeps it at |phi'(rho)|^2 * n^kappa (plus one).
    pub fn second_derivative_bound(&self) -> f64 {
        (self.slope * self.slope + 1.0) * (self.n as f64).powf(self.kappa)
    }

    /// Radial evaluation; strictly positive everywhere.
    pub fn eval_radial(&self, r: f64) -> f64 {
        let rho = self.profile.rho();
        if r < rho {
            return self.profile.value(r) + self.bump;
        }
        let s = r - rho;
        if s >= self.arc_width {
            return self.floor;
        }
        match self.cubic {
            None => {
                // parabola bump - a s + a^2/(4 drop) s^2
                let drop = self.bump - self.floor;
                self.bump - self.slope * s + self.slope * self.slope / (4.0 * drop) * s * s
            }
            Some([p0, m0, c2, c3]) => p0 + m0 * s + c2 * s * s + c3 * s * s * s,
        }
    }

    /// Value at the lattice site y, i.e. the radial profile at |y|/n.
    pub fn at_site_coords(&self, coords: &[i32]) -> f64 {
        let r2: f64 = coords.iter().map(|&c| (c as f64) * (c as f64)).sum();
        self.eval_radial(r2.sqrt() / self.n as f64)
    }

    /// Samples the field on all lattice sites with |y_i| <= half_width * n.
    pub fn sample_box(&self, half_width: f64) -> Result<Vec<(Site, f64)>> {
        let dim = crate::lattice::Dim::new(self.d)?;
        let reach = (half_width * self.n as f64).ceil() as i32;
        let mut out = Vec::new();
        let mut offs = vec![-reach; self.d];
        loop {
            let v = self.at_site_coords(&offs);
            out.push((dim.pack(&offs)?, v));
            let mut axis = 0;
            loop {
                if axis == self.d {
                    return Ok(out);
                }
                offs[axis] += 1;
                if offs[axis] <= reach {
                    break;
                }
                offs[axis] = -reach;
                axis += 1;
            }
        }
    }

    /// The sampled box as a positive site field.
    pub fn sample_box_field(&self, half_width: f64) -> Result<SiteField> {
        let dim = crate::lattice::Dim::new(self.d)?;
        let mut field = SiteField::new(dim);
        for (site, v) in self.sample_box(half_width)? {
            field.set(site, v)?;
        }
        Ok(field)
    }
}
