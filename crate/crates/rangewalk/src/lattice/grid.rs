use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::lattice::field::SiteField;
use crate::lattice::site::{Dim, Site};

/// The side scale n and step count N tied by N = n^(d+2).
#[derive(Clone, Copy, Debug)]
pub struct ScaleRelation {
    dim: Dim,
    n: u32,
    n_steps: u64,
}

impl ScaleRelation {
    pub fn new(dim: Dim, n: u32) -> Result<ScaleRelation> {
        if n == 0 {
            return Err(Error::invalid("scale n must be >= 1"));
        }
        let exp = dim.get() as u32 + 2;
        let mut n_steps = 1u64;
        for _ in 0..exp {
            n_steps = n_steps
                .checked_mul(n as u64)
                .ok_or_else(|| Error::invalid(format!("n^{exp} overflows for n = {n}")))?;
        }
        Ok(ScaleRelation { dim, n, n_steps })
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn n(&self) -> u32 {
        self.n
    }

    /// N = n^(d+2).
    #[inline]
    pub fn n_steps(&self) -> u64 {
        self.n_steps
    }

    /// Grid spacing 1/n.
    #[inline]
    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }
}

/// A piecewise-constant function on the cubic cells of a scaled lattice.
///
/// Cell `c` covers the half-open cube [c*h, (c+1)*h)^d where h is the
/// spacing, matching the floor convention of the rescaled local time.
#[derive(Clone, Debug)]
pub struct GridFunction {
    dim: Dim,
    spacing: f64,
    cells: FxHashMap<Site, f64>,
}

impl GridFunction {
    pub fn new(dim: Dim, spacing: f64) -> Result<GridFunction> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::invalid("grid spacing must be positive and finite"));
        }
        Ok(GridFunction {
            dim,
            spacing,
            cells: FxHashMap::default(),
        })
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn set(&mut self, cell: Site, value: f64) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::invalid(format!(
                "grid values must be finite and >= 0 (got {value})"
            )));
        }
        if value == 0.0 {
            self.cells.remove(&cell);
        } else {
            self.cells.insert(cell, value);
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, cell: Site) -> f64 {
        self.cells.get(&cell).copied().unwrap_or(0.0)
    }

    pub fn cells(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.cells.iter().map(|(s, v)| (*s, *v))
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn sorted_cells(&self) -> Vec<Site> {
        let mut v: Vec<Site> = self.cells.keys().copied().collect();
        v.sort_unstable();
        v
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim.get() as i32)
    }

    /// Center of a cell in real coordinates.
    pub fn cell_center(&self, cell: Site) -> Vec<f64> {
        (0..self.dim.get())
            .map(|a| (self.dim.coord(cell, a) as f64 + 0.5) * self.spacing)
            .collect()
    }

    /// Cell containing the real point `x`.
    pub fn cell_of(&self, x: &[f64]) -> Result<Site> {
        let coords: Vec<i32> = x
            .iter()
            .map(|&xi| (xi / self.spacing).floor() as i32)
            .collect();
        self.dim.pack(&coords)
    }

    /// Riemann integral: cell volume times the value sum.
    pub fn integral(&self) -> f64 {
        let vol = self.cell_volume();
        self.sorted_cells()
            .iter()
            .map(|&c| self.get(c) * vol)
            .sum()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        let vol = self.cell_volume();
        self.sorted_cells()
            .iter()
            .map(|&c| self.get(c).powi(2) * vol)
            .sum()
    }

    /// L1 distance to another grid function on the same mesh.
    pub fn l1_distance(&self, other: &GridFunction) -> Result<f64> {
        if (self.spacing - other.spacing).abs() > 1e-12 * self.spacing {
            return Err(Error::invalid("grid spacings differ"));
        }
        let vol = self.cell_volume();
        let mut keys: Vec<Site> = self.cells.keys().copied().collect();
        keys.extend(other.cells.keys().copied());
        keys.sort_unstable();
        keys.dedup();
        Ok(keys
            .iter()
            .map(|&c| (self.get(c) - other.get(c)).abs() * vol)
            .sum())
    }

    /// Renormalises so that the integral is exactly one.
    pub fn normalise(&mut self) -> Result<()> {
        let total = self.integral();
        if !(total > 0.0) {
            return Err(Error::invalid("cannot normalise the zero grid function"));
        }
        for v in self.cells.values_mut() {
            *v /= total;
        }
        Ok(())
    }

    /// Mass centroid in real coordinates (weights the cell values).
    pub fn centroid(&self) -> Option<Vec<f64>> {
        if self.cells.is_empty() {
            return None;
        }
        let d = self.dim.get();
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for &c in &self.sorted_cells() {
            let v = self.get(c);
            let center = self.cell_center(c);
            for a in 0..d {
                num[a] += v * center[a];
            }
            den += v;
        }
        Some(num.into_iter().map(|x| x / den).collect())
    }
}

/// The rescaled local-time profile: cell value n^d L_N(y) / N on the cell of
/// side 1/n anchored at lattice site y. Its integral is exactly one.
pub fn rescaled_profile(local_time: &SiteField, scale: &ScaleRelation) -> Result<GridFunction> {
    let total = local_time.sum();
    let n_steps = scale.n_steps() as f64;
    if (total - n_steps).abs() > 1e-9 * n_steps.max(1.0) {
        return Err(Error::invalid(format!(
            "local time sums to {total}, but the scale demands N = {n_steps}"
        )));
    }
    let mut grid = GridFunction::new(local_time.dim(), scale.spacing())?;
    let factor = (scale.n() as f64).powi(local_time.dim().get() as i32) / n_steps;
    for (site, v) in local_time.iter() {
        grid.set(site, v * factor)?;
    }
    Ok(grid)
}

/// Index of the side-`n` block containing the lattice site coordinate `y`,
/// under the half-open convention -n/2 < y - n*index <= n/2.
#[inline]
pub fn block_coord(y: i32, n: u32) -> i32 {
    let n = n as i64;
    let half_up = (n + 1) / 2; // ceil(n/2)
    let num = y as i64 + half_up - 1;
    num.div_euclid(n) as i32
}

/// Block index (as a lattice point of block space) of a site.
pub fn block_index(dim: Dim, site: Site, n: u32) -> Site {
    let coords: Vec<i32> = (0..dim.get())
        .map(|a| block_coord(dim.coord(site, a), n))
        .collect();
    dim.pack_unchecked(&coords)
}

/// All lattice sites of the side-`n` block with the given index.
pub fn block_sites(dim: Dim, index: Site, n: u32) -> Vec<Site> {
    let d = dim.get();
    let n_i = n as i32;
    let half_up = (n_i + 1) / 2;
    // offsets o with -n/2 < o <= n/2
    let lo = -half_up + 1;
    let hi = n_i - half_up;
    let base: Vec<i32> = (0..d).map(|a| dim.coord(index, a) * n_i).collect();
    let mut out = Vec::with_capacity((n as usize).pow(d as u32));
    let mut offsets = vec![lo; d];
    loop {
        let coords: Vec<i32> = (0..d).map(|a| base[a] + offsets[a]).collect();
        out.push(dim.pack_unchecked(&coords));
        let mut axis = 0;
        loop {
            if axis == d {
                return out;
            }
            offsets[axis] += 1;
            if offsets[axis] <= hi {
                break;
            }
            offsets[axis] = lo;
            axis += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::walk::WalkPath;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn block_coord_convention() {
        // -n/2 < y - n*index <= n/2
        for n in 1..=7u32 {
            for y in -30..=30i32 {
                let idx = block_coord(y, n);
                let off = y as i64 - idx as i64 * n as i64;
                assert!(2 * off > -(n as i64), "y={y} n={n} idx={idx}");
                assert!(2 * off <= n as i64, "y={y} n={n} idx={idx}");
            }
        }
    }

    #[test]
    fn block_sites_partition() {
        let dim = Dim::new(2).unwrap();
        let n = 3;
        let sites = block_sites(dim, dim.origin(), n);
        assert_eq!(sites.len(), 9);
        for s in sites {
            assert_eq!(block_index(dim, s, n), dim.origin());
        }
    }

    #[test]
    fn rescaled_profile_integrates_to_one() {
        let dim = Dim::new(3).unwrap();
        let scale = ScaleRelation::new(dim, 2).unwrap();
        let n_steps = scale.n_steps() as usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let steps: Vec<u8> = (0..n_steps).map(|_| rng.gen_range(0..6)).collect();
            let walk = WalkPath::build(dim, &[0, 0, 0], steps).unwrap();
            let grid = rescaled_profile(&walk.local_time(), &scale).unwrap();
            assert!((grid.integral() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rescaled_profile_point_mass() {
        // L = N * delta_0 gives value n^d on one cell
        let dim = Dim::new(3).unwrap();
        let scale = ScaleRelation::new(dim, 2).unwrap();
        let n_steps = scale.n_steps() as f64;
        let l = SiteField::from_pairs(dim, [([0, 0, 0], n_steps)]).unwrap();
        let grid = rescaled_profile(&l, &scale).unwrap();
        assert_eq!(grid.cell_count(), 1);
        let v = grid.get(dim.origin());
        assert!((v - 8.0).abs() < 1e-12);
        assert!((grid.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rescaled_profile_uniform_box() {
        // L uniform = n^2 on a box of n^d sites gives the constant 1 profile
        let dim = Dim::new(3).unwrap();
        let n = 3u32;
        let scale = ScaleRelation::new(dim, n).unwrap();
        let mut l = SiteField::new(dim);
        for x in 0..n as i32 {
            for y in 0..n as i32 {
                for z in 0..n as i32 {
                    l.set(dim.pack(&[x, y, z]).unwrap(), (n * n) as f64).unwrap();
                }
            }
        }
        let grid = rescaled_profile(&l, &scale).unwrap();
        for (_, v) in grid.cells() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!((grid.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rescaled_profile_rejects_bad_mass() {
        let dim = Dim::new(3).unwrap();
        let scale = ScaleRelation::new(dim, 2).unwrap();
        let l = SiteField::from_pairs(dim, [([0, 0, 0], 3.0)]).unwrap();
        assert!(rescaled_profile(&l, &scale).is_err());
    }
}
