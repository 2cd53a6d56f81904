use crate::error::{Error, Result};

/// Largest lattice dimension supported by the packed site representation.
pub const MAX_DIM: usize = 6;

/// Bits reserved per coordinate for each dimension (index 0 unused).
const BITS: [u32; MAX_DIM + 1] = [0, 30, 30, 20, 15, 12, 10];

/// Validated lattice dimension.
///
/// Carries the packing layout for [`Site`] alongside the dimension itself, so
/// every geometric helper can work on plain packed integers.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Dim {
    d: u8,
    bits: u8,
}

impl Dim {
    pub fn new(d: usize) -> Result<Dim> {
        if d == 0 {
            return Err(Error::invalid("lattice dimension must be >= 1"));
        }
        if d > MAX_DIM {
            return Err(Error::invalid(format!(
                "lattice dimension {d} exceeds the supported maximum {MAX_DIM}"
            )));
        }
        Ok(Dim {
            d: d as u8,
            bits: BITS[d] as u8,
        })
    }

    #[inline]
    pub fn get(self) -> usize {
        self.d as usize
    }

    /// Number of nearest-neighbour directions, 2d.
    #[inline]
    pub fn dirs(self) -> usize {
        2 * self.d as usize
    }

    /// The Sobolev conjugate exponent 2* = 2d/(d-2), defined for d >= 3.
    pub fn two_star(self) -> Result<f64> {
        if self.d < 3 {
            return Err(Error::invalid(format!(
                "2* = 2d/(d-2) is only defined for d >= 3 (got d = {})",
                self.d
            )));
        }
        let d = self.d as f64;
        Ok(2.0 * d / (d - 2.0))
    }

    /// Largest coordinate magnitude a packed site can hold.
    #[inline]
    pub fn coord_limit(self) -> i32 {
        (1i64 << (self.bits - 1)) as i32 - 2
    }

    #[inline]
    fn shift(self, axis: usize) -> u32 {
        axis as u32 * self.bits as u32
    }

    #[inline]
    fn mask(self) -> i64 {
        (1i64 << self.bits) - 1
    }

    #[inline]
    fn bias(self) -> i64 {
        1i64 << (self.bits - 1)
    }

    /// Packed displacement of one unit step along `axis` (sign +1).
    #[inline]
    pub fn axis_delta(self, axis: usize) -> i64 {
        1i64 << self.shift(axis)
    }

    /// Packed displacement of the direction `code` (axis-major, positive
    /// before negative: 0:+e1, 1:-e1, 2:+e2, ...).
    #[inline]
    pub fn step_delta(self, code: u8) -> i64 {
        let axis = (code >> 1) as usize;
        let delta = self.axis_delta(axis);
        if code & 1 == 0 {
            delta
        } else {
            -delta
        }
    }

    pub fn pack(self, coords: &[i32]) -> Result<Site> {
        if coords.len() != self.get() {
            return Err(Error::invalid(format!(
                "expected {} coordinates, got {}",
                self.get(),
                coords.len()
            )));
        }
        let limit = self.coord_limit();
        let mut packed = 0i64;
        for (axis, &c) in coords.iter().enumerate() {
            if c.abs() > limit {
                return Err(Error::invalid(format!(
                    "coordinate {c} exceeds the packed range +-{limit} in dimension {}",
                    self.get()
                )));
            }
            packed |= ((c as i64 + self.bias()) & self.mask()) << self.shift(axis);
        }
        Ok(Site(packed))
    }

    /// Packs without range checks; callers must have bounded the coordinates.
    #[inline]
    pub fn pack_unchecked(self, coords: &[i32]) -> Site {
        let mut packed = 0i64;
        for (axis, &c) in coords.iter().enumerate() {
            packed |= ((c as i64 + self.bias()) & self.mask()) << self.shift(axis);
        }
        Site(packed)
    }

    #[inline]
    pub fn coord(self, site: Site, axis: usize) -> i32 {
        (((site.0 >> self.shift(axis)) & self.mask()) - self.bias()) as i32
    }

    pub fn unpack(self, site: Site) -> Vec<i32> {
        (0..self.get()).map(|a| self.coord(site, a)).collect()
    }

    #[inline]
    pub fn unpack_into(self, site: Site, out: &mut [i32]) {
        for (axis, slot) in out.iter_mut().enumerate().take(self.get()) {
            *slot = self.coord(site, axis);
        }
    }

    pub fn origin(self) -> Site {
        self.pack_unchecked(&vec![0; self.get()])
    }

    /// Squared Euclidean length of the site as a lattice vector.
    pub fn norm_sq(self, site: Site) -> i64 {
        let mut acc = 0i64;
        for axis in 0..self.get() {
            let c = self.coord(site, axis) as i64;
            acc += c * c;
        }
        acc
    }

    /// Squared Euclidean distance between two sites.
    pub fn dist_sq(self, a: Site, b: Site) -> i64 {
        let mut acc = 0i64;
        for axis in 0..self.get() {
            let c = (self.coord(a, axis) - self.coord(b, axis)) as i64;
            acc += c * c;
        }
        acc
    }

    /// Neighbours of `site` in all 2d directions.
    pub fn neighbors(self, site: Site) -> impl Iterator<Item = Site> {
        let dim = self;
        (0..self.dirs() as u8).map(move |code| site.offset(dim.step_delta(code)))
    }
}

/// A lattice site of Z^d, packed into a single integer.
///
/// Coordinates are stored as biased bit fields so that stepping by one unit
/// along an axis is a single integer addition; see [`Dim::step_delta`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Site(i64);

impl Site {
    #[inline]
    pub fn offset(self, packed_delta: i64) -> Site {
        Site(self.0 + packed_delta)
    }

    #[inline]
    pub fn raw(self) -> i64 {
        self.0
    }
}

/// Lattice symmetries used by the pivot move: all are self-inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisSymmetry {
    FlipAxis(u8),
    SwapAxes(u8, u8),
}

impl AxisSymmetry {
    /// All generators for dimension d: d axis flips and d(d-1)/2 axis swaps.
    pub fn generators(dim: Dim) -> Vec<AxisSymmetry> {
        let d = dim.get() as u8;
        let mut gens = Vec::new();
        for a in 0..d {
            gens.push(AxisSymmetry::FlipAxis(a));
        }
        for a in 0..d {
            for b in (a + 1)..d {
                gens.push(AxisSymmetry::SwapAxes(a, b));
            }
        }
        gens
    }

    /// Image of a direction code under the symmetry.
    #[inline]
    pub fn apply_code(self, code: u8) -> u8 {
        let axis = code >> 1;
        let sign = code & 1;
        match self {
            AxisSymmetry::FlipAxis(a) => {
                if axis == a {
                    (axis << 1) | (1 - sign)
                } else {
                    code
                }
            }
            AxisSymmetry::SwapAxes(a, b) => {
                if axis == a {
                    (b << 1) | sign
                } else if axis == b {
                    (a << 1) | sign
                } else {
                    code
                }
            }
        }
    }
}
