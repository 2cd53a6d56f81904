use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::lattice::field::SiteField;
use crate::lattice::site::{AxisSymmetry, Dim, Site, MAX_DIM};

/// Cap on the dense occupancy box (cells); walks spilling past this fall back
/// to a hash map for the excess sites.
const DENSE_CELL_CAP: usize = 1 << 22;

/// Visit counts over a multiset of sites, with O(1) insert/remove and a
/// running count of distinct occupied sites.
///
/// Counts live in a dense box covering the walk's typical extent; sites
/// outside the box go to a spill map. The box is re-centred lazily when the
/// walk escapes it.
#[derive(Clone, Debug)]
struct Occupancy {
    dim: Dim,
    lo: [i32; MAX_DIM],
    side: [i32; MAX_DIM],
    dense: Vec<u32>,
    spill: FxHashMap<Site, u32>,
    distinct: usize,
    coords_buf: [i32; MAX_DIM],
}

impl Occupancy {
    fn new(dim: Dim) -> Occupancy {
        Occupancy {
            dim,
            lo: [0; MAX_DIM],
            side: [0; MAX_DIM],
            dense: Vec::new(),
            spill: FxHashMap::default(),
            distinct: 0,
            coords_buf: [0; MAX_DIM],
        }
    }

    #[inline]
    fn dense_index(&mut self, site: Site) -> Option<usize> {
        let d = self.dim.get();
        self.dim.unpack_into(site, &mut self.coords_buf);
        let mut idx = 0usize;
        for axis in 0..d {
            let off = self.coords_buf[axis] - self.lo[axis];
            if off < 0 || off >= self.side[axis] {
                return None;
            }
            idx = idx * self.side[axis] as usize + off as usize;
        }
        Some(idx)
    }

    #[inline]
    fn insert(&mut self, site: Site) {
        match self.dense_index(site) {
            Some(idx) => {
                if self.dense[idx] == 0 {
                    self.distinct += 1;
                }
                self.dense[idx] += 1;
            }
            None => {
                let slot = self.spill.entry(site).or_insert(0);
                if *slot == 0 {
                    self.distinct += 1;
                }
                *slot += 1;
            }
        }
    }

    #[inline]
    fn remove(&mut self, site: Site) {
        match self.dense_index(site) {
            Some(idx) => {
                debug_assert!(self.dense[idx] > 0);
                self.dense[idx] -= 1;
                if self.dense[idx] == 0 {
                    self.distinct -= 1;
                }
            }
            None => {
                let slot = self.spill.get_mut(&site).expect("removing unseen site");
                *slot -= 1;
                if *slot == 0 {
                    self.spill.remove(&site);
                    self.distinct -= 1;
                }
            }
        }
    }

    /// Rebuilds the dense box around the given positions.
    fn rebuild(&mut self, positions: &[Site]) {
        let d = self.dim.get();
        let mut lo = [i32::MAX; MAX_DIM];
        let mut hi = [i32::MIN; MAX_DIM];
        let mut coords = [0i32; MAX_DIM];
        for &p in positions {
            self.dim.unpack_into(p, &mut coords);
            for axis in 0..d {
                lo[axis] = lo[axis].min(coords[axis]);
                hi[axis] = hi[axis].max(coords[axis]);
            }
        }
        let mut cells = 1usize;
        for axis in 0..d {
            let extent = (hi[axis] - lo[axis] + 1) as i64;
            let margin = (extent / 4).max(8) as i64;
            let side = (extent + 2 * margin).min(i32::MAX as i64) as i32;
            self.lo[axis] = lo[axis] - margin as i32;
            self.side[axis] = side;
            cells = cells.saturating_mul(side as usize);
        }
        if cells > DENSE_CELL_CAP {
            // too spread out for a dense box; shrink to the cap per axis
            let per_axis = (DENSE_CELL_CAP as f64).powf(1.0 / d as f64) as i32;
            cells = 1;
            for axis in 0..d {
                let side = self.side[axis].min(per_axis.max(1));
                let center = self.lo[axis] + self.side[axis] / 2;
                self.lo[axis] = center - side / 2;
                self.side[axis] = side;
                cells *= side as usize;
            }
        }
        self.dense.clear();
        self.dense.resize(cells, 0);
        self.spill.clear();
        self.distinct = 0;
        for &p in positions {
            self.insert(p);
        }
    }
}

/// An N-step nearest-neighbour lattice trajectory with cached occupancy
/// counts and range cardinality.
///
/// The range R_N = {S_0, ..., S_N} includes the endpoint; the local time
/// L_N counts visits over k = 0..N-1 only, so the two supports can differ by
/// the final position.
#[derive(Clone, Debug)]
pub struct WalkPath {
    dim: Dim,
    steps: Vec<u8>,
    positions: Vec<Site>,
    occ: Occupancy,
}

impl WalkPath {
    /// Builds a walk from a start site and a direction-code sequence.
    ///
    /// Codes are axis-major, positive before negative (0:+e1, 1:-e1, 2:+e2,
    /// ...); any code >= 2d is rejected.
    pub fn build(dim: Dim, start: &[i32], steps: Vec<u8>) -> Result<WalkPath> {
        let dirs = dim.dirs() as u8;
        if let Some(&bad) = steps.iter().find(|&&c| c >= dirs) {
            return Err(Error::invalid(format!(
                "direction code {bad} out of range for d = {}",
                dim.get()
            )));
        }
        // every coordinate stays within |start| + N
        let reach = steps.len() as i64;
        let limit = dim.coord_limit() as i64;
        for &c in start {
            if (c as i64).abs() + reach > limit {
                return Err(Error::invalid(format!(
                    "walk of {} steps from {:?} can exceed the packed coordinate range",
                    steps.len(),
                    start
                )));
            }
        }
        let origin = dim.pack(start)?;
        let mut positions = Vec::with_capacity(steps.len() + 1);
        positions.push(origin);
        let mut pos = origin;
        for &code in &steps {
            pos = pos.offset(dim.step_delta(code));
            positions.push(pos);
        }
        let mut occ = Occupancy::new(dim);
        occ.rebuild(&positions);
        Ok(WalkPath {
            dim,
            steps,
            positions,
            occ,
        })
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    #[inline]
    pub fn step_codes(&self) -> &[u8] {
        &self.steps
    }

    #[inline]
    pub fn positions(&self) -> &[Site] {
        &self.positions
    }

    #[inline]
    pub fn start(&self) -> Site {
        self.positions[0]
    }

    #[inline]
    pub fn end(&self) -> Site {
        *self.positions.last().unwrap()
    }

    pub fn start_coords(&self) -> Vec<i32> {
        self.dim.unpack(self.start())
    }

    /// Cached |R_N| = |{S_0, ..., S_N}|.
    #[inline]
    pub fn range_size(&self) -> usize {
        self.occ.distinct
    }

    /// |R_N| recomputed from scratch (oracle for the cache).
    pub fn recompute_range(&self) -> usize {
        let mut set: Vec<Site> = self.positions.clone();
        set.sort_unstable();
        set.dedup();
        set.len()
    }

    /// Local time L_N: visit counts over S_0..S_{N-1} (endpoint excluded).
    pub fn local_time(&self) -> SiteField {
        let n = self.n_steps();
        let mut field = SiteField::new(self.dim);
        for &p in &self.positions[..n] {
            field.add(p, 1.0).expect("counts are nonnegative");
        }
        field
    }

    /// f_N = sqrt(L_N).
    pub fn local_time_sqrt(&self) -> SiteField {
        self.local_time().sqrt()
    }

    /// Number of sites with L_N > 0; differs from |R_N| by at most one.
    pub fn local_time_support_size(&self) -> usize {
        self.local_time().support_size()
    }

    /// Rewrites positions from index `first`, updating the occupancy.
    ///
    /// `last_changed_step` is the largest step index whose code changed;
    /// beyond it the rewrite stops as soon as a recomputed position matches
    /// the stored one (the tail is then a rigid translation by zero).
    fn rewrite_positions(&mut self, first: usize, last_changed_step: usize) {
        let n = self.n_steps();
        for j in first..=n {
            let new = self.positions[j - 1].offset(self.dim.step_delta(self.steps[j - 1]));
            let old = self.positions[j];
            if new == old {
                if j > last_changed_step + 1 {
                    break;
                }
                continue;
            }
            self.occ.remove(old);
            self.occ.insert(new);
            self.positions[j] = new;
        }
    }

    /// Replaces the step at `index` and returns the previous code.
    pub fn redraw_step(&mut self, index: usize, code: u8) -> u8 {
        let old = self.steps[index];
        if old == code {
            return old;
        }
        self.steps[index] = code;
        self.rewrite_positions(index + 1, index);
        old
    }

    /// Replaces the steps in `index..index + new_codes.len()`; the previous
    /// codes are appended to `old_codes`.
    pub fn redraw_block(&mut self, index: usize, new_codes: &[u8], old_codes: &mut Vec<u8>) {
        let w = new_codes.len();
        old_codes.clear();
        old_codes.extend_from_slice(&self.steps[index..index + w]);
        self.steps[index..index + w].copy_from_slice(new_codes);
        self.rewrite_positions(index + 1, index + w - 1);
    }

    /// Applies a self-inverse lattice symmetry to all

    /// steps from `index` on (the pivot move); applying it again undoes it.
    pub fn apply_suffix_symmetry(&mut self, index: usize, sym: AxisSymmetry) {
        let n = self.n_steps();
        for code in &mut self.steps[index..] {
            *code = sym.apply_code(*code);
        }
        self.rewrite_positions(index + 1, n - 1);
    }
}
