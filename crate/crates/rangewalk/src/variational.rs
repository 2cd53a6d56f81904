//! Shape functionals: Fraenkel asymmetry on voxel domains, the quantitative
//! Faber-Krahn deficit, the support + Dirichlet-energy functional, and the
//! L2 distance to the translated ball eigenfunction.

use crate::error::{Error, Result};
use crate::lattice::{Dim, GridFunction, Site, SiteSet};
use crate::numeric::nelder_mead;
use crate::spectral::{
    continuum_constants, discrete_principal_eigenpair, RadialEigenfunction,
};

/// A finite union of cubic cells of a fixed spacing.
///
/// Cell `c` covers [c*h, (c+1)*h)^d; the domain's volume is h^d times the
/// cell count.
#[derive(Clone, Debug)]
pub struct VoxelDomain {
    dim: Dim,
    spacing: f64,
    cells: SiteSet,
}

impl VoxelDomain {
    pub fn from_cells<I, C>(dim: Dim, spacing: f64, cells: I) -> Result<VoxelDomain>
    where
        I: IntoIterator<Item = C>,
        C: AsRef<[i32]>,
    {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::invalid("voxel spacing must be positive"));
        }
        let set = SiteSet::from_coords(dim, cells)?;
        if set.is_empty() {
            return Err(Error::invalid("voxel domain must be nonempty"));
        }
        Ok(VoxelDomain {
            dim,
            spacing,
            cells: set,
        })
    }

    /// Voxelises the ball B(center, radius): cells whose center lies inside.
    pub fn ball(dim: Dim, spacing: f64, center: &[f64], radius: f64) -> Result<VoxelDomain> {
        if center.len() != dim.get() {
            return Err(Error::invalid("center has the wrong dimension"));
        }
        let d = dim.get();
        let lo: Vec<i32> = center
            .iter()
            .map(|&c| ((c - radius) / spacing).floor() as i32 - 1)
            .collect();
        let hi: Vec<i32> = center
            .iter()
            .map(|&c| ((c + radius) / spacing).ceil() as i32 + 1)
            .collect();
        let mut cells = Vec::new();
        let mut idx = lo.clone();
        loop {
            let dist2: f64 = (0..d)
                .map(|a| {
                    let cc = (idx[a] as f64 + 0.5) * spacing;
                    (cc - center[a]) * (cc - center[a])
                })
                .sum();
            if dist2 <= radius * radius {
                cells.push(idx.clone());
            }
            let mut axis = 0;
            loop {
                if axis == d {
                    return VoxelDomain::from_cells(dim, spacing, cells);
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

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &SiteSet {
        &self.cells
    }

    pub fn volume(&self) -> f64 {
        self.spacing.powi(self.dim.get() as i32) * self.cells.len() as f64
    }

    pub fn is_connected(&self) -> bool {
        self.cells.is_connected()
    }

    /// Center of a cell in real coordinates.
    pub fn cell_center(&self, cell: Site) -> Vec<f64> {
        (0..self.dim.get())
            .map(|a| (self.dim.coord(cell, a) as f64 + 0.5) * self.spacing)
            .collect()
    }

    /// The same physical region at half the spacing (each cell split 2^d).
    pub fn refined(&self) -> VoxelDomain {
        let d = self.dim.get();
        let mut fine = SiteSet::new(self.dim);
        for cell in self.cells.iter() {
            let base: Vec<i32> = (0..d).map(|a| 2 * self.dim.coord(cell, a)).collect();
            for mask in 0..(1u32 << d) {
                let child: Vec<i32> = (0..d)
                    .map(|a| base[a] + ((mask >> a) & 1) as i32)
                    .collect();
                fine.insert(self.dim.pack_unchecked(&child));
            }
        }
        VoxelDomain {
            dim: self.dim,
            spacing: self.spacing / 2.0,
            cells: fine,
        }
    }

    /// Mass centroid of the domain.
    pub fn centroid(&self) -> Vec<f64> {
        let d = self.dim.get();
        let mut acc = vec![0.0; d];
        for cell in self.cells.iter() {
            let c = self.cell_center(cell);
            for a in 0..d {
                acc[a] += c[a];
            }
        }
        for a in acc.iter_mut() {
            *a /= self.cells.len() as f64;
        }
        acc
    }

    /// Volume of the intersection with the ball B(center, radius); boundary
    /// cells are resolved by 4^d subsampling.
    pub fn ball_overlap(&self, center: &[f64], radius: f64) -> f64 {
        let d = self.dim.get();
        let h = self.spacing;
        let cell_vol = h.powi(d as i32);
        let r2 = radius * radius;
        let mut acc = 0.0;
        let sub = 4usize;
        let subs: Vec<f64> = (0..sub).map(|i| (i as f64 + 0.5) / sub as f64).collect();
        for cell in self.cells.sorted() {
            // classify by nearest / farthest corner distance
            let mut near2 = 0.0;
            let mut far2 = 0.0;
            for a in 0..d {
                let lo = self.dim.coord(cell, a) as f64 * h - center[a];
                let hi = lo + h;
                let (abs_lo, abs_hi) = (lo.abs(), hi.abs());
                let far = abs_lo.max(abs_hi);
                far2 += far * far;
                if lo > 0.0 || hi < 0.0 {
                    let near = abs_lo.min(abs_hi);
                    near2 += near * near;
                }
            }
            if far2 <= r2 {
                acc += cell_vol;
                continue;
            }
            if near2 >= r2 {
                continue;
            }
            // boundary cell: subsample
            let mut count = 0usize;
            let mut idx = vec![0usize; d];
            'grid: loop {
                let mut dist2 = 0.0;
                for a in 0..d {
                    let p = (self.dim.coord(cell, a) as f64 + subs[idx[a]]) * h - center[a];
                    dist2 += p * p;
                }
                if dist2 <= r2 {
                    count += 1;
                }
                let mut axis = 0;
                loop {
                    if axis == d {
                        break 'grid;
                    }
                    idx[axis] += 1;
                    if idx[axis] < sub {
                        break;
                    }
                    idx[axis] = 0;
                    axis += 1;
                }
            }
            acc += cell_vol * count as f64 / (sub as f64).powi(d as i32);
        }
        acc
    }
}

/// Result of the Fraenkel asymmetry search.
#[derive(Clone, Debug)]
pub struct AsymmetryReport {
    /// A(G) = min over equal-volume balls of |G delta B| / |B|, in [0, 2].
    pub value: f64,
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Fraenkel asymmetry: the ball radius is fixed by volume matching and only
/// the center is searched (occupied-cell seeds, then pattern refinement down
/// to spacing/64).
pub fn fraenkel_asymmetry(g: &VoxelDomain) -> Result<AsymmetryReport> {
    let vol = g.volume();
    if !(vol > 0.0) {
        return Err(Error::invalid("empty domain"));
    }
    let d = g.dim().get();
    let spec = continuum_constants(d)?;
    let radius = (vol / spec.omega).powf(1.0 / d as f64);

    // candidate centers: all occupied cell centers plus the centroid
    let mut candidates: Vec<Vec<f64>> = g.cells.sorted().iter().map(|&c| g.cell_center(c)).collect();
    candidates.push(g.centroid());
    let mut best: Vec<(f64, Vec<f64>)> = candidates
        .into_iter()
        .map(|c| (g.ball_overlap(&c, radius), c))
        .collect();
    best.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let keep = best.len().min(5);
    let top_value = best[0].0;
    let mut finalists: Vec<(f64, Vec<f64>)> = best
        .iter()
        .take(keep)
        .cloned()
        .collect();
    // keep exact ties of the best so symmetry-related optima all refine
    for cand in best.iter().skip(keep) {
        if cand.0 == top_value {
            finalists.push(cand.clone());
        } else {
            break;
        }
    }

    let mut champion = (f64::NEG_INFINITY, Vec::new());
    for (_, start) in finalists {
        let mut center = start;
        let mut step = g.spacing() / 4.0;
        let mut value = g.ball_overlap(&center, radius);
        while step >= g.spacing() / 64.0 {
            // symmetric axis probe, best-of-all move
            let mut improved = true;
            while improved {
                improved = false;
                let mut best_probe = (value, center.clone());
                for a in 0..d {
                    for sgn in [-1.0, 1.0] {
                        let mut probe = center.clone();
                        probe[a] += sgn * step;
                        let v = g.ball_overlap(&probe, radius);
                        if v > best_probe.0 {
                            best_probe = (v, probe);
                        }
                    }
                }
                if best_probe.0 > value {
                    value = best_probe.0;
                    center = best_probe.1;
                    improved = true;
                }
            }
            step /= 2.0;
        }
        if value > champion.0 {
            champion = (value, center);
        }
    }

    let overlap = champion.0;
    let value = 2.0 * (1.0 - overlap / vol);
    Ok(AsymmetryReport {
        value: value.clamp(0.0, 2.0),
        center: champion.1,
        radius,
    })
}

/// Faber-Krahn deficit report with a Richardson error estimate.
#[derive(Clone, Debug)]
pub struct DeficitReport {
    /// Richardson-extrapolated value of |G|^(2/d) lambda(G) - |B|^(2/d) lambda(B).
    pub deficit: f64,
    /// Discretisation error estimate |deficit(h/2) - deficit(h)|.
    pub error: f64,
    /// Continuum-rescaled lambda(G) at the finer spacing.
    pub lambda_g: f64,
    /// |B|^(2/d) lambda(B) = lambda_d omega_d^(2/d) for the matched ball.
    pub ball_term: f64,
    pub coarse_deficit: f64,
    pub fine_deficit: f64,
}

fn deficit_at_level(g: &VoxelDomain) -> Result<(f64, f64)> {
    let d = g.dim().get();
    let pair = discrete_principal_eigenpair(g.dim(), g.cells())?;
    let h = g.spacing();
    // continuum rescaling lambda(G) ~ 2d lambda_1(discrete) / h^2
    let lambda_g = 2.0 * d as f64 * pair.lambda1 / (h * h);
    let spec = continuum_constants(d)?;
    let ball_term = spec.lambda * spec.omega.powf(2.0 / d as f64);
    Ok((g.volume().powf(2.0 / d as f64) * lambda_g - ball_term, lambda_g))
}

/// Quantitative Faber-Krahn deficit on a connected voxel domain, estimated
/// at the native spacing and at half spacing, then Richardson-extrapolated
/// assuming a leading O(h) eigenvalue error.
pub fn fk_deficit(g: &VoxelDomain) -> Result<DeficitReport> {
    if !g.is_connected() {
        return Err(Error::invalid("the voxel domain must be connected"));
    }
    let d = g.dim().get();
    let spec = continuum_constants(d)?;
    let (coarse, _) = deficit_at_level(g)?;
    let fine_domain = g.refined();
    let (fine, lambda_fine) = deficit_at_level(&fine_domain)?;
    let deficit = 2.0 * fine - coarse;
    let error = (fine - coarse).abs();
    Ok(DeficitReport {
        deficit,
        error,
        lambda_g: lambda_fine,
        ball_term: spec.lambda * spec.omega.powf(2.0 / d as f64),
        coarse_deficit: coarse,
        fine_deficit: fine,
    })
}

/// The functional |{g > 0}| + (1/2d) int |grad g|^2 for a sampled grid
/// function, with the gradient by central differences.
pub fn shape_functional(g: &GridFunction) -> f64 {
    let dim = g.dim();
    let d = dim.get();
    let h = g.spacing();
    let vol = g.cell_volume();
    let support = g.cell_count() as f64 * vol;

    // cells where some central difference can be nonzero
    let mut active: Vec<Site> = Vec::new();
    for (cell, _) in g.cells() {
        active.push(cell);
        for code in 0..dim.dirs() as u8 {
            active.push(cell.offset(dim.step_delta(code)));
        }
    }
    active.sort_unstable();
    active.dedup();

    let mut grad_int = 0.0;
    for &cell in &active {
        let mut sq = 0.0;
        for axis in 0..d {
            let up = g.get(cell.offset(dim.axis_delta(axis)));
            let down = g.get(cell.offset(-dim.axis_delta(axis)));
            let der = (up - down) / (2.0 * h);
            sq += der * der;
        }
        grad_int += sq * vol;
    }
    support + grad_int / (2.0 * d as f64)
}

/// The same functional for an exact multilinear interpolant (unit spacing).
pub fn shape_functional_interpolant(f: &crate::interpolation::CellwisePolynomial) -> f64 {
    f.support_volume() + f.grad_sq_integral() / (2.0 * f.dim().get() as f64)
}

/// Result of the L2 distance minimisation over eigenfunction centers.
#[derive(Clone, Debug)]
pub struct L2Fit {
    pub distance: f64,
    pub center: Vec<f64>,
}

fn l2_distance_sq_at(g: &GridFunction, profile: &RadialEigenfunction, x: &[f64]) -> f64 {
    let dim = g.dim();
    let d = dim.get();
    let h = g.spacing();
    let vol = g.cell_volume();
    // union of the support cells and cells meeting the ball around x
    let mut cells: Vec<Site> = g.cells().map(|(c, _)| c).collect();
    let rho = profile.rho();
    let lo: Vec<i32> = (0..d)
        .map(|a| ((x[a] - rho) / h).floor() as i32 - 1)
        .collect();
    let hi: Vec<i32> = (0..d)
        .map(|a| ((x[a] + rho) / h).ceil() as i32 + 1)
        .collect();
    let mut idx = lo.clone();
    loop {
        cells.push(dim.pack_unchecked(&idx));
        let mut axis = 0;
        loop {
            if axis == d {
                cells.sort_unstable();
                cells.dedup();
                let mut acc = 0.0;
                for &cell in &cells {
                    let cc: Vec<f64> = (0..d)
                        .map(|a| (dim.coord(cell, a) as f64 + 0.5) * h)
                        .collect();
                    let r2: f64 = cc.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    let diff = g.get(cell) - profile.value(r2.sqrt());
                    acc += diff * diff * vol;
                }
                return acc;
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

/// epsilon = inf over x of |g - phi_x|_2, approximated by a coarse search on
/// the mass centroid's neighbourhood followed by simplex refinement.
pub fn l2_distance_to_eigenfunction(
    g: &GridFunction,
    profile: &RadialEigenfunction,
) -> Result<L2Fit> {
    let d = g.dim().get();
    let start = g
        .centroid()
        .unwrap_or_else(|| vec![0.0; d]);
    let h = g.spacing();
    // coarse probe around the centroid
    let mut best = (l2_distance_sq_at(g, profile, &start), start.clone());
    let probes = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let mut idx = vec![0usize; d];
    loop {
        let probe: Vec<f64> = (0..d).map(|a| start[a] + probes[idx[a]] * h).collect();
        let v = l2_distance_sq_at(g, profile, &probe);
        if v < best.0 {
            best = (v, probe);
        }
        let mut axis = 0;
        loop {
            if axis == d {
                // simplex refinement from the coarse winner
                let (center, dist2) = nelder_mead(
                    |p| l2_distance_sq_at(g, profile, p),
                    &best.1,
                    h / 2.0,
                    160,
                );
                return Ok(L2Fit {
                    distance: dist2.max(0.0).sqrt(),
                    center,
                });
            }
            idx[axis] += 1;
            if idx[axis] < probes.len() {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
}
