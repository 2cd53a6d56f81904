use rustc_hash::{FxHashMap, FxHashSet};

use crate::error::{Error, Result};
use crate::lattice::site::{Dim, Site};

/// A finite set of lattice sites.
#[derive(Clone, Debug)]
pub struct SiteSet {
    dim: Dim,
    set: FxHashSet<Site>,
}

impl SiteSet {
    pub fn new(dim: Dim) -> SiteSet {
        SiteSet {
            dim,
            set: FxHashSet::default(),
        }
    }

    pub fn from_coords<I, C>(dim: Dim, coords: I) -> Result<SiteSet>
    where
        I: IntoIterator<Item = C>,
        C: AsRef<[i32]>,
    {
        let mut set = SiteSet::new(dim);
        for c in coords {
            set.insert(dim.pack(c.as_ref())?);
        }
        Ok(set)
    }

    pub fn from_sites(dim: Dim, sites: impl IntoIterator<Item = Site>) -> SiteSet {
        SiteSet {
            dim,
            set: sites.into_iter().collect(),
        }
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn insert(&mut self, site: Site) -> bool {
        self.set.insert(site)
    }

    #[inline]
    pub fn contains(&self, site: Site) -> bool {
        self.set.contains(&site)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.set.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Site> + '_ {
        self.set.iter().copied()
    }

    /// Sites listed in a deterministic (sorted) order.
    pub fn sorted(&self) -> Vec<Site> {
        let mut v: Vec<Site> = self.set.iter().copied().collect();
        v.sort_unstable();
        v
    }

    /// The set together with all lattice neighbours of its members.
    pub fn closure(&self) -> SiteSet {
        let mut out = self.clone();
        for site in self.set.iter() {
            for nbr in self.dim.neighbors(*site) {
                out.insert(nbr);
            }
        }
        out
    }

    /// Whether the set is connected under nearest-neighbour adjacency.
    pub fn is_connected(&self) -> bool {
        if self.set.is_empty() {
            return false;
        }
        let start = *self.set.iter().next().unwrap();
        let mut seen = FxHashSet::default();
        seen.insert(start);
        let mut stack = vec![start];
        while let Some(site) = stack.pop() {
            for nbr in self.dim.neighbors(site) {
                if self.set.contains(&nbr) && seen.insert(nbr) {
                    stack.push(nbr);
                }
            }
        }
        seen.len() == self.set.len()
    }

    /// Axis-aligned bounding box, as (lo, hi) inclusive, per axis.
    pub fn bounding_box(&self) -> Option<(Vec<i32>, Vec<i32>)> {
        let d = self.dim.get();
        let mut it = self.set.iter();
        let first = self.dim.unpack(*it.next()?);
        let mut lo = first.clone();
        let mut hi = first;
        for site in it {
            for axis in 0..d {
                let c = self.dim.coord(*site, axis);
                if c < lo[axis] {
                    lo[axis] = c;
                }
                if c > hi[axis] {
                    hi[axis] = c;
                }
            }
        }
        Some((lo, hi))
    }
}

/// A sparse nonnegative function on lattice sites.
///
/// Stored values are finite and strictly positive; absent sites read as zero,
/// so the support is exactly the key set.
#[derive(Clone, Debug)]
pub struct SiteField {
    dim: Dim,
    values: FxHashMap<Site, f64>,
}

impl SiteField {
    pub fn new(dim: Dim) -> SiteField {
        SiteField {
            dim,
            values: FxHashMap::default(),
        }
    }

    pub fn from_pairs<I, C>(dim: Dim, pairs: I) -> Result<SiteField>
    where
        I: IntoIterator<Item = (C, f64)>,
        C: AsRef<[i32]>,
    {
        let mut field = SiteField::new(dim);
        for (coords, value) in pairs {
            let site = dim.pack(coords.as_ref())?;
            field.set(site, value)?;
        }
        Ok(field)
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    /// Sets `site` to `value`; zero removes the entry.
    pub fn set(&mut self, site: Site, value: f64) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::invalid(format!(
                "site field values must be finite and >= 0 (got {value})"
            )));
        }
        if value == 0.0 {
            self.values.remove(&site);
        } else {
            self.values.insert(site, value);
        }
        Ok(())
    }

    /// Adds `delta` to the value at `site` (used for integer counts).
    pub fn add(&mut self, site: Site, delta: f64) -> Result<()> {
        let v = self.get(site) + delta;
        self.set(site, v)
    }

    #[inline]
    pub fn get(&self, site: Site) -> f64 {
        self.values.get(&site).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = Site> + '_ {
        self.values.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.values.iter().map(|(s, v)| (*s, *v))
    }

    #[inline]
    pub fn support_size(&self) -> usize {
        self.values.len()
    }

    pub fn support_set(&self) -> SiteSet {
        SiteSet::from_sites(self.dim, self.support())
    }

    pub fn sum(&self) -> f64 {
        let mut keys = self.sorted_support();
        keys.drain(..).map(|s| self.get(s)).sum()
    }

    pub fn sum_sq(&self) -> f64 {
        let mut keys = self.sorted_support();
        keys.drain(..).map(|s| self.get(s).powi(2)).sum()
    }

    /// Support in sorted order, for deterministic reductions.
    pub fn sorted_support(&self) -> Vec<Site> {
        let mut v: Vec<Site> = self.values.keys().copied().collect();
        v.sort_unstable();
        v
    }

    /// Pointwise square root of the field.
    pub fn sqrt(&self) -> SiteField {
        let mut out = SiteField::new(self.dim);
        for (site, v) in self.values.iter() {
            out.values.insert(*site, v.sqrt());
        }
        out
    }

    /// Pointwise scaling by a nonnegative factor.
    pub fn scaled(&self, factor: f64) -> Result<SiteField> {
        if !factor.is_finite() || factor < 0.0 {
            return Err(Error::invalid("scale factor must be finite and >= 0"));
        }
        let mut out = SiteField::new(self.dim);
        if factor > 0.0 {
            for (site, v) in self.values.iter() {
                out.values.insert(*site, v * factor);
            }
        }
        Ok(out)
    }

    /// The unscaled l^p norm, optionally restricted to `domain`.
    pub fn lp_norm(&self, p: f64, domain: Option<&SiteSet>) -> Result<f64> {
        if p < 1.0 {
            return Err(Error::invalid(format!("lp norm requires p >= 1 (got {p})")));
        }
        let mut acc = 0.0;
        for site in self.sorted_support() {
            if let Some(dom) = domain {
                if !dom.contains(site) {
                    continue;
                }
            }
            acc += self.get(site).powf(p);
        }
        Ok(acc.powf(1.0 / p))
    }

    /// Discrete Dirichlet energy (1/2d) * sum over ordered neighbour pairs of
    /// the squared difference, optionally with both ends restricted to
    /// `domain`. Off-support sites read as zero.
    pub fn dirichlet_energy(&self, domain: Option<&SiteSet>) -> f64 {
        let dim = self.dim;
        let mut acc = 0.0;
        for site in self.sorted_support() {
            if let Some(dom) = domain {
                if !dom.contains(site) {
                    continue;
                }
            }
            let fy = self.get(site);
            for code in 0..dim.dirs() as u8 {
                let nbr = site.offset(dim.step_delta(code));
                if let Some(dom) = domain {
                    if !dom.contains(nbr) {
                        continue;
                    }
                }
                let fz = self.get(nbr);
                let term = (fy - fz) * (fy - fz);
                acc += term;
                // the ordered pair (nbr, site) is not visited when nbr is
                // off support, so count it here
                if fz == 0.0 {
                    acc += term;
                }
            }
        }
        acc / dim.dirs() as f64
    }
}
