//! Lattice geometry, walks, ranges, local times, norms, and discrete
//! Dirichlet energy: the vocabulary every other module speaks.

mod field;
mod grid;
mod io;
mod site;
mod walk;

pub use field::{SiteField, SiteSet};
pub use grid::{
    block_coord, block_index, block_sites, rescaled_profile, GridFunction, ScaleRelation,
};
pub use io::{read_snapshot, write_snapshot};
pub use site::{AxisSymmetry, Dim, Site, MAX_DIM};
pub use walk::WalkPath;
