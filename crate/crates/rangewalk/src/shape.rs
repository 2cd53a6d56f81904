//! Shape measurements on sampled walks: profile distance to the ball
//! eigenfunction, fill fractions, mesoscopic balls with their bridges,
//! stay/hit probabilities, dyadic annuli, and the range-growth exponent.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{Dim, GridFunction, ScaleRelation, Site, SiteField, SiteSet, WalkPath};
use crate::numeric::{binomial_mean_se, ls_slope, nelder_mead};
use crate::sampler::tilted_kernel;
use crate::spectral::{
    continuum_constants, discrete_principal_eigenpair, lattice_ball, RadialEigenfunction,
};

/// A mesoscopic ball B(z, m) with its core B(z, m/2), at the scale
/// m = rho_d n^(1-2 kappa).
#[derive(Clone, Debug)]
pub struct MesoBall {
    pub dim: Dim,
    pub center: Vec<i32>,
    pub n: u32,
    pub kappa: f64,
    /// The mesoscopic radius, rounded to an integer >= 4.
    pub m: u32,
    pub ball: SiteSet,
    pub core: SiteSet,
}

/// Builds the mesoscopic ball; rejects scales where m would round below 4.
pub fn meso_ball(dim: Dim, center: &[i32], n: u32, kappa: f64) -> Result<MesoBall> {
    if center.len() != dim.get() {
        return Err(Error::invalid("center has the wrong dimension"));
    }
    let spec = continuum_constants(dim.get())?;
    let m_real = spec.rho * (n as f64).powf(1.0 - 2.0 * kappa);
    let m = m_real.round() as i64;
    if m < 4 {
        return Err(Error::infeasible(format!(
            "mesoscopic radius rounds to {m} < 4 at n = {n}, kappa = {kappa}"
        )));
    }
    let m = m as u32;
    let ball = lattice_ball(dim, center, m as f64)?;
    let core = lattice_ball(dim, center, m as f64 / 2.0)?;
    Ok(MesoBall {
        dim,
        center: center.to_vec(),
        n,
        kappa,
        m,
        ball,
        core,
    })
}

impl MesoBall {
    /// Euclidean distance from a site to the sphere of radius m.
    pub fn boundary_distance(&self, site: Site) -> f64 {
        let d = self.dim.get();
        let mut acc = 0.0;
        for a in 0..d {
            let off = (self.dim.coord(site, a) - self.center[a]) as f64;
            acc += off * off;
        }
        self.m as f64 - acc.sqrt()
    }
}

/// A disjoint bridge segment of a walk: a time window of length m^2 during
/// which the walk stays in B with both endpoints in the core.
#[derive(Clone, Copy, Debug)]
pub struct BridgeRecord {
    pub start: usize,
    pub end: usize,
    pub a: Site,
    pub b: Site,
}

impl BridgeRecord {
    /// Re-checks the defining properties against the raw walk.
    pub fn is_valid(&self, walk: &WalkPath, ball: &MesoBall) -> bool {
        if self.end <= self.start {
            return false;
        }
        let positions = walk.positions();
        if positions[self.start] != self.a || positions[self.end] != self.b {
            return false;
        }
        if !ball.core.contains(self.a) || !ball.core.contains(self.b) {
            return false;
        }
        positions[self.start..=self.end]
            .iter()
            .all(|&p| ball.ball.contains(p))
    }
}

/// Greedy left-to-right bridge detection with the trial structure: a trial
/// opens at each entry to the core; it succeeds if the next m^2 steps stay
/// in the ball and end in the core. On failure the scan resumes at the
/// first subsequent exit from the core.
pub fn detect_bridges(walk: &WalkPath, ball: &MesoBall) -> Vec<BridgeRecord> {
    let window = (ball.m as usize) * (ball.m as usize);
    let positions = walk.positions();
    let len = walk.n_steps();
    let mut out = Vec::new();
    let mut t = 0usize;
    while t + window <= len {
        if !ball.core.contains(positions[t]) {
            t += 1;
            continue;
        }
        let mut exit_at = None;
        for (offset, &p) in positions[t..=t + window].iter().enumerate() {
            if !ball.ball.contains(p) {
                exit_at = Some(t + offset);
                break;
            }
        }
        let success = exit_at.is_none() && ball.core.contains(positions[t + window]);
        if success {
            out.push(BridgeRecord {
                start: t,
                end: t + window,
                a: positions[t],
                b: positions[t + window],
            });
            t += window;
        } else {
            // resume at the first exit from the core after t
            let mut u = match exit_at {
                Some(e) => e,
                None => t + 1,
            };
            while u <= len && ball.core.contains(positions[u]) {
                u += 1;
            }
            t = u.max(t + 1);
        }
    }
    out
}

/// Result of the localisation test on a rescaled profile.
#[derive(Clone, Debug)]
pub struct GlocResult {
    pub distance: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// L1 distance between a rescaled profile and (phi_x)^2, by cellwise
/// quadrature with 2^d sub-samples per cell.
pub fn gloc_distance(ell: &GridFunction, profile: &RadialEigenfunction, center: &[f64]) -> f64 {
    let dim = ell.dim();
    let d = dim.get();
    let h = ell.spacing();
    let rho = profile.rho();
    // union of the profile's cells and the cells meeting the ball
    let mut cells: Vec<Site> = ell.cells().map(|(c, _)| c).collect();
    let lo: Vec<i32> = (0..d)
        .map(|a| ((center[a] - rho) / h).floor() as i32 - 1)
        .collect();
    let hi: Vec<i32> = (0..d)
        .map(|a| ((center[a] + rho) / h).ceil() as i32 + 1)
        .collect();
    let mut idx = lo.clone();
    'outer: loop {
        cells.push(dim.pack_unchecked(&idx));
        let mut axis = 0;
        loop {
            if axis == d {
                break 'outer;
            }
            idx[axis] += 1;
            if idx[axis] <= hi[axis] {
                break;
            }
            idx[axis] = lo[axis];
            axis += 1;
        }
    }
    cells.sort_unstable();
    cells.dedup();

    let offsets = [0.25f64, 0.75];
    let sub_count = (1usize << d) as f64;
    let vol = ell.cell_volume();
    let mut acc = 0.0;
    let mut sub_idx = vec![0usize; d];
    for &cell in &cells {
        let v = ell.get(cell);
        let base: Vec<f64> = (0..d).map(|a| dim.coord(cell, a) as f64 * h).collect();
        sub_idx.iter_mut().for_each(|i| *i = 0);
        let mut cell_acc = 0.0;
        'sub: loop {
            let mut r2 = 0.0;
            for a in 0..d {
                let p = base[a] + offsets[sub_idx[a]] * h - center[a];
                r2 += p * p;
            }
            let phi2 = profile.value(r2.sqrt()).powi(2);
            cell_acc += (v - phi2).abs();
            let mut axis = 0;
            loop {
                if axis == d {
                    break 'sub;
                }
                sub_idx[axis] += 1;
                if sub_idx[axis] < offsets.len() {
                    break;
                }
                sub_idx[axis] = 0;
                axis += 1;
            }
        }
        acc += cell_acc / sub_count * vol;
    }
    acc
}

/// Localisation test: pass when the L1 distance at the given center is at
/// most n^(-s).
pub fn gloc_test(
    ell: &GridFunction,
    profile: &RadialEigenfunction,
    center: &[f64],
    s_exponent: f64,
    n: u32,
) -> GlocResult {
    let distance = gloc_distance(ell, profile, center);
    let threshold = (n as f64).powf(-s_exponent);
    GlocResult {
        distance,
        threshold,
        pass: distance <= threshold,
    }
}

/// Minimises the profile distance over centers: mass centroid start, then
/// simplex refinement. Returns (center, distance).
pub fn best_center(ell: &GridFunction, profile: &RadialEigenfunction) -> (Vec<f64>, f64) {
    let d = ell.dim().get();
    let start = ell.centroid().unwrap_or_else(|| vec![0.0; d]);
    let h = ell.spacing();
    let (center, distance) = nelder_mead(
        |x| gloc_distance(ell, profile, x),
        &start,
        h,
        80,
    );
    (center, distance)
}

/// Fraction of lattice sites in the ball of the given radius around a real
/// center (in lattice units) that carry positive local time.
pub fn fill_fraction(local_time: &SiteField, center: &[f64], radius: f64) -> Result<f64> {
    let dim = local_time.dim();
    let d = dim.get();
    if center.len() != d {
        return Err(Error::invalid("center has the wrong dimension"));
    }
    let r = radius;
    let lo: Vec<i32> = center.iter().map(|&c| (c - r).floor() as i32).collect();
    let hi: Vec<i32> = center.iter().map(|&c| (c + r).ceil() as i32).collect();
    let mut inside = 0u64;
    let mut filled = 0u64;
    let mut idx = lo.clone();
    loop {
        let dist2: f64 = (0..d)
            .map(|a| (idx[a] as f64 - center[a]).powi(2))
            .sum();
        if dist2 <= r * r {
            inside += 1;
            if local_time.get(dim.pack(&idx)?) > 0.0 {
                filled += 1;
            }
        }
        let mut axis = 0;
        loop {
            if axis == d {
                if inside == 0 {
                    return Ok(0.0);
                }
                return Ok(filled as f64 / inside as f64);
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

/// The fill event at scale n: the ball of radius rho_d n (1 - n^-kappa)
/// around n*x, measured through the local time.
pub fn fill_test(
    walk: &WalkPath,
    center_real: &[f64],
    kappa: f64,
    scale: &ScaleRelation,
) -> Result<f64> {
    let spec = continuum_constants(walk.dim().get())?;
    let n = scale.n() as f64;
    let radius = spec.rho * n * (1.0 - n.powf(-kappa));
    let center: Vec<f64> = center_real.iter().map(|&c| c * n).collect();
    fill_fraction(&walk.local_time(), &center, radius)
}

/// Refines a fill center by pattern search in lattice units (steps 0.5 then
/// 0.25), maximising the fill fraction of the fixed-radius ball; returns
/// the best center and its fraction.
pub fn best_fill_center(
    local_time: &SiteField,
    start: &[f64],
    radius: f64,
) -> Result<(Vec<f64>, f64)> {
    let d = local_time.dim().get();
    let mut center = start.to_vec();
    let mut best = fill_fraction(local_time, &center, radius)?;
    for &step in &[0.5f64, 0.25] {
        loop {
            let mut improved = false;
            let mut candidate = (best, center.clone());
            for a in 0..d {
                for sgn in [-1.0, 1.0] {
                    let mut probe = center.clone();
                    probe[a] += sgn * step;
                    let f = fill_fraction(local_time, &probe, radius)?;
                    if f > candidate.0 {
                        candidate = (f, probe);
                    }
                }
            }
            if candidate.0 > best {
                best = candidate.0;
                center = candidate.1;
                improved = true;
            }
            if !improved {
                break;
            }
        }
    }
    Ok((center, best))
}

/// The core-time check: on the localisation event the walk must spend at
/// least delta m^d n^(2-2 kappa) steps in the core, with
/// delta = C rho^(d+2) omega / 2^(3+d) and C the squared boundary slope of
/// the eigenfunction (configurable).
#[derive(Clone, Copy, Debug)]
pub struct CoreTimeCheck {
    pub count: f64,
    pub threshold: f64,
    pub delta: f64,
    pub pass: bool,
}

pub fn time_in_core(
    local_time: &SiteField,
    ball: &MesoBall,
    boundary_constant: Option<f64>,
    profile: &RadialEigenfunction,
) -> Result<CoreTimeCheck> {
    let d = local_time.dim().get();
    let spec = continuum_constants(d)?;
    let c = boundary_constant.unwrap_or_else(|| profile.boundary_slope().powi(2));
    let delta = c * spec.rho.powi(d as i32 + 2) * spec.omega / 2f64.powi(3 + d as i32);
    let threshold = delta
        * (ball.m as f64).powi(d as i32)
        * (ball.n as f64).powf(2.0 - 2.0 * ball.kappa);
    let mut count = 0.0;
    for site in ball.core.sorted() {
        count += local_time.get(site);
    }
    Ok(CoreTimeCheck {
        count,
        threshold,
        delta,
        pass: count >= threshold,
    })
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub estimate: f64,
    pub se: f64,
    pub trials: u64,
}

/// MC estimate of P_x(X[0, s] stays in the ball) for s comparable to m^2
/// (enforced: s in [m^2/2, 2 m^2]).
pub fn stay_probability(
    ball: &MesoBall,
    start: &[i32],
    s: u64,
    trials: u64,
    seed: u64,
) -> Result<McEstimate> {
    let m2 = (ball.m as u64) * (ball.m as u64);
    if s < m2 / 2 || s > 2 * m2 {
        return Err(Error::invalid(format!(
            "s = {s} must lie in [m^2/2, 2 m^2] = [{}, {}]",
            m2 / 2,
            2 * m2
        )));
    }
    let dim = ball.dim;
    let start_site = dim.pack(start)?;
    if !ball.ball.contains(start_site) {
        return Err(Error::invalid("start lies outside the ball"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = dim.dirs() as u8;
    let mut stays = 0u64;
    for _ in 0..trials {
        let mut pos = start_site;
        let mut alive = true;
        for _ in 0..s {
            pos = pos.offset(dim.step_delta(rng.gen_range(0..dirs)));
            if !ball.ball.contains(pos) {
                alive = false;
                break;
            }
        }
        if alive {
            stays += 1;
        }
    }
    let (estimate, se) = binomial_mean_se(stays, trials);
    Ok(McEstimate {
        estimate,
        se,
        trials,
    })
}

/// MC estimate of the probability that a bridge visits the target set.
/// Bridges are sampled by rejection from the tilted kernel (length m^2,
/// start uniform in the core, accepted when the endpoint returns to the
/// core), which approximates the bridge measure well enough for the
/// comparison tests.
pub fn bridge_hit_probability(
    ball: &MesoBall,
    targets: &SiteSet,
    trials: u64,
    seed: u64,
) -> Result<McEstimate> {
    for t in targets.iter() {
        if !ball.ball.contains(t) {
            return Err(Error::invalid("targets must lie inside the ball"));
        }
    }
    let dim = ball.dim;
    let pair = discrete_principal_eigenpair(dim, &ball.ball)?;
    let kernel = tilted_kernel(dim, &ball.ball, &pair)?;
    let core_indices: Vec<usize> = ball
        .core
        .sorted()
        .iter()
        .map(|&s| kernel.site_index(s).unwrap())
        .collect();
    let target_idx: Vec<bool> = {
        let mut mask = vec![false; kernel.sites.len()];
        for t in targets.iter() {
            if let Some(i) = kernel.site_index(t) {
                mask[i] = true;
            }
        }
        mask
    };
    let window = (ball.m as usize) * (ball.m as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = 0u64;
    let mut hits = 0u64;
    let mut attempts = 0u64;
    let max_attempts = trials.saturating_mul(50);
    while accepted < trials && attempts < max_attempts {
        attempts += 1;
        let start = core_indices[rng.gen_range(0..core_indices.len())];
        let path = kernel.sample_path(start, window, &mut rng);
        if !core_indices.contains(path.last().unwrap()) {
            continue;
        }
        accepted += 1;
        if path.iter().any(|&i| target_idx[i]) {
            hits += 1;
        }
    }
    if accepted == 0 {
        return Err(Error::numerical("no bridge samples were accepted"));
    }
    let (estimate, se) = binomial_mean_se(hits, accepted);
    Ok(McEstimate {
        estimate,
        se,
        trials: accepted,
    })
}

/// The dyadic annulus decomposition of a ball relative to its boundary:
/// A_0 = {dist < 2}, A_j = {dist in [2^j, 2^(j+1))} for j >= 1.
#[derive(Clone, Debug)]
pub struct AnnuliReport {
    /// Count of the given points per annulus.
    pub counts: Vec<usize>,
    pub majority_index: usize,
    pub majority_count: usize,
    /// Total number of annuli meeting the ball.
    pub annuli: usize,
}

/// Annulus index of a site (by its distance to the sphere).
pub fn annulus_index(ball: &MesoBall, site: Site) -> usize {
    let dist = ball.boundary_distance(site).max(0.0);
    if dist < 2.0 {
        0
    } else {
        dist.log2().floor() as usize
    }
}

pub fn dyadic_annuli(ball: &MesoBall, points: &SiteSet) -> Result<AnnuliReport> {
    let annuli = (ball.m as f64).log2().floor() as usize + 1;
    let mut counts = vec![0usize; annuli];
    for p in points.iter() {
        if !ball.ball.contains(p) {
            return Err(Error::invalid("points must lie inside the ball"));
        }
        counts[annulus_index(ball, p).min(annuli - 1)] += 1;
    }
    let (majority_index, &majority_count) = counts
        .iter()
        .enumerate()
        .max_by_key(|&(_, &c)| c)
        .unwrap();
    Ok(AnnuliReport {
        counts,
        majority_index,
        majority_count,
        annuli,
    })
}

/// Least-squares exponent of mean |R_N| against N over at least three
/// scales: the slope of log mean vs log N with N = n^(d+2).
pub fn range_exponent_fit(samples: &[(u32, f64)], d: usize) -> Result<f64> {
    if samples.len() < 3 {
        return Err(Error::invalid("the exponent fit needs >= 3 scales"));
    }
    let xs: Vec<f64> = samples
        .iter()
        .map(|&(n, _)| (d as f64 + 2.0) * (n as f64).ln())
        .collect();
    let ys: Vec<f64> = samples.iter().map(|&(_, mean)| mean.ln()).collect();
    ls_slope(&xs, &ys)
}

/// The killed heat kernel on a ball: u_t(x) = P_start(X_t = x, stay in B),
/// computed exactly by forward substitution; `out[i]` aligns with the
/// sorted ball sites.
pub fn killed_heat_kernel(dim: Dim, ball: &SiteSet, start: Site, t: u64) -> Result<Vec<f64>> {
    let sites = ball.sorted();
    let index: rustc_hash::FxHashMap<Site, u32> = sites
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i as u32))
        .collect();
    let s0 = *index
        .get(&start)
        .ok_or_else(|| Error::invalid("start outside the ball"))? as usize;
    let dirs = dim.dirs();
    let mut table = vec![u32::MAX; sites.len() * dirs];
    for (i, &s) in sites.iter().enumerate() {
        for code in 0..dirs as u8 {
            if let Some(&j) = index.get(&s.offset(dim.step_delta(code))) {
                table[i * dirs + code as usize] = j;
            }
        }
    }
    let mut u = vec![0.0; sites.len()];
    u[s0] = 1.0;
    let mut next = vec![0.0; sites.len()];
    let inv = 1.0 / dirs as f64;
    for _ in 0..t {
        next.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..sites.len() {
            let w = u[i];
            if w == 0.0 {
                continue;
            }
            for c in 0..dirs {
                let j = table[i * dirs + c];
                if j != u32::MAX {
                    next[j as usize] += w * inv;
                }
            }
        }
        std::mem::swap(&mut u, &mut next);
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{eigenfunction_profile, phi_squared_on_lattice};

    fn dim3() -> Dim {
        Dim::new(3).unwrap()
    }

    fn profile() -> RadialEigenfunction {
        eigenfunction_profile(3, 2000).unwrap()
    }

    #[test]
    fn meso_ball_geometry() {
        let dim = dim3();
        let ball = meso_ball(dim, &[0, 0, 0], 64, 0.05).unwrap();
        assert!(ball.m >= 4);
        // the core is contained in the ball
        for s in ball.core.iter() {
            assert!(ball.ball.contains(s));
        }
        assert!(ball.core.len() < ball.ball.len());
        // too-small scales are rejected
        assert!(meso_ball(dim, &[0, 0, 0], 4, 0.4).is_err());
    }

    #[test]
    fn gloc_distance_of_the_sampled_profile_is_small() {
        let dim = dim3();
        let prof = profile();
        for n in [4u32, 6, 8] {
            let scale = ScaleRelation::new(dim, n).unwrap();
            let center = [0.0, 0.0, 0.0];
            let ell = phi_squared_on_lattice(&prof, &center, &scale).unwrap();
            let result = gloc_test(&ell, &prof, &center, 1.0 / 800.0, n);
            assert!(result.pass, "n = {n}: {result:?}");
            assert!(result.distance < 2.0 / n as f64 * 3.0);
        }
    }

    #[test]
    fn gloc_distance_separates_wrong_profiles() {
        // the uniform density on a unit cube at the origin is far from phi^2
        let dim = dim3();
        let prof = profile();
        let n = 8u32;
        let h = 1.0 / n as f64;
        let mut ell = GridFunction::new(dim, h).unwrap();
        for x in 0..n as i32 {
            for y in 0..n as i32 {
                for z in 0..n as i32 {
                    ell.set(dim.pack(&[x, y, z]).unwrap(), 1.0).unwrap();
                }
            }
        }
        assert!((ell.integral() - 1.0).abs() < 1e-12);
        let d0 = gloc_distance(&ell, &prof, &[0.5, 0.5, 0.5]);
        // reference: fine-quadrature distance between the uniform cube
        // density and phi^2 centered at the cube's center
        assert!(d0 > 0.5, "distance {d0}");

        // moving 10% of the mass outside the ball costs at least ~ 0.2
        let scale = ScaleRelation::new(dim, n).unwrap();
        let good = phi_squared_on_lattice(&prof, &[0.0, 0.0, 0.0], &scale).unwrap();
        let mut moved = GridFunction::new(dim, h).unwrap();
        for (c, v) in good.cells() {
            moved.set(c, 0.9 * v).unwrap();
        }
        // park the removed mass far away
        let far = dim.pack(&[40, 40, 40]).unwrap();
        moved.set(far, 0.1 / moved.cell_volume()).unwrap();
        let d1 = gloc_distance(&moved, &prof, &[0.0, 0.0, 0.0]);
        assert!(d1 >= 0.2 - 0.02, "distance {d1}");
    }

    #[test]
    fn best_center_locates_a_shifted_profile() {
        let dim = dim3();
        let prof = profile();
        let scale = ScaleRelation::new(dim, 8).unwrap();
        let true_center = [0.25, -0.125, 0.375];
        let ell = phi_squared_on_lattice(&prof, &true_center, &scale).unwrap();
        let (center, dist) = best_center(&ell, &prof);
        for a in 0..3 {
            assert!(
                (center[a] - true_center[a]).abs() < 0.1,
                "center {center:?}"
            );
        }
        assert!(dist <= gloc_distance(&ell, &prof, &[0.0, 0.0, 0.0]) + 1e-12);
    }

    #[test]
    fn fill_fraction_extremes() {
        let dim = dim3();
        // a boustrophedon-covered box fills its inscribed ball
        let scale = ScaleRelation::new(dim, 2).unwrap();
        let steps = (0..scale.n_steps()).map(|_| 0u8).collect::<Vec<_>>();
        let straight = WalkPath::build(dim, &[0, 0, 0], steps).unwrap();
        // a straight line misses almost all of a ball of its length
        let f = fill_fraction(&straight.local_time(), &[0.0, 0.0, 0.0], 6.0).unwrap();
        assert!(f < 0.02, "fraction {f}");

        // a filled box covers the ball entirely
        let mut lt = SiteField::new(dim);
        for x in -4..=4 {
            for y in -4..=4 {
                for z in -4..=4 {
                    lt.set(dim.pack(&[x, y, z]).unwrap(), 1.0).unwrap();
                }
            }
        }
        let f = fill_fraction(&lt, &[0.0, 0.0, 0.0], 4.0).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn bridges_back_to_back_when_confined() {
        // a walk that never leaves the core produces floor(len/m^2) bridges
        let dim = dim3();
        let ball = meso_ball(dim, &[0, 0, 0], 64, 0.05).unwrap();
        // wiggle in place: +e1, -e1 repeated
        let window = (ball.m as usize) * (ball.m as usize);
        let len = 3 * window + 7;
        let steps: Vec<u8> = (0..len).map(|i| (i % 2) as u8).collect();
        let walk = WalkPath::build(dim, &[0, 0, 0], steps).unwrap();
        let bridges = detect_bridges(&walk, &ball);
        assert_eq!(bridges.len(), len / window);
        for b in &bridges {
            assert!(b.is_valid(&walk, &ball));
            assert_eq!(b.end - b.start, window);
        }

        // a walk that exits the ball immediately yields none
        let escape: Vec<u8> = vec![0; 3 * ball.m as usize];
        let runaway = WalkPath::build(dim, &[0, 0, 0], escape).unwrap();
        assert!(detect_bridges(&runaway, &ball).is_empty());
    }

    #[test]
    fn tilted_paths_produce_order_one_bridge_rates() {
        // kernel paths on the ball complete a positive fraction of trials
        let dim = dim3();
        let n = ras_scale_for_m16();
        let ball = meso_ball(dim, &[0, 0, 0], n, 0.05).unwrap();
        assert_eq!(ball.m, 16);
        let pair = discrete_principal_eigenpair(dim, &ball.ball).unwrap();
        let kernel = tilted_kernel(dim, &ball.ball, &pair).unwrap();
        let window = (ball.m as usize) * (ball.m as usize);
        let len = 20 * window;
        let start = kernel.site_index(dim.origin()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = Vec::new();
        for _ in 0..20 {
            let path = kernel.sample_path(start, len, &mut rng);
            // rebuild a walk from kernel sites to reuse the detector
            let sites: Vec<Site> = path.iter().map(|&i| kernel.sites[i]).collect();
            let mut steps = Vec::with_capacity(sites.len() - 1);
            for w in sites.windows(2) {
                let mut found = None;
                for code in 0..dim.dirs() as u8 {
                    if w[0].offset(dim.step_delta(code)) == w[1] {
                        found = Some(code);
                        break;
                    }
                }
                steps.push(found.expect("kernel moves are nearest-neighbour"));
            }
            let coords = dim.unpack(sites[0]);
            let walk = WalkPath::build(dim, &coords, steps).unwrap();
            counts.push(detect_bridges(&walk, &ball).len() as f64);
        }
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let trials = (len / window) as f64;
        assert!(
            mean >= 0.25 * trials && mean <= trials,
            "mean bridge count {mean} of {trials} trials"
        );
    }

    /// The n that makes the mesoscopic radius round to 16 at kappa = 0.05.
    fn ras_scale_for_m16() -> u32 {
        let spec = continuum_constants(3).unwrap();
        for n in 2..2000 {
            let m = (spec.rho * (n as f64).powf(0.9)).round() as i64;
            if m == 16 {
                return n;
            }
        }
        panic!("no scale found");
    }

    #[test]
    fn time_in_core_thresholds() {
        let dim = dim3();
        let prof = profile();
        let ball = meso_ball(dim, &[0, 0, 0], 32, 0.05).unwrap();
        // L = n^2 on the core easily beats the threshold at small kappa
        let mut lt = SiteField::new(dim);
        for s in ball.core.iter() {
            lt.set(s, (32 * 32) as f64).unwrap();
        }
        let check = time_in_core(&lt, &ball, None, &prof).unwrap();
        assert!(check.pass, "{check:?}");

        // an empty core fails
        let empty = SiteField::new(dim);
        let check = time_in_core(&empty, &ball, None, &prof).unwrap();
        assert!(!check.pass);
        assert_eq!(check.count, 0.0);
    }

    #[test]
    fn stay_probability_monotone_in_distance() {
        let dim = dim3();
        // a ball with m = 16 via a custom meso scale
        let ball = meso_ball(dim, &[0, 0, 0], ras_scale_for_m16(), 0.05).unwrap();
        let s = (ball.m as u64) * (ball.m as u64);
        let center = stay_probability(&ball, &[0, 0, 0], s, 20_000, 9).unwrap();
        let near_edge = stay_probability(&ball, &[(ball.m - 1) as i32, 0, 0], s, 20_000, 10).unwrap();
        assert!(center.estimate > near_edge.estimate + 3.0 * (center.se + near_edge.se));
        assert!(center.estimate >= 0.05 && center.estimate <= 1.0);
        // r = 1: the escape is fast, so the estimate is below a C/m envelope
        let c_fit = near_edge.estimate * ball.m as f64;
        assert!(c_fit < 10.0, "fitted C = {c_fit}");
        // the window on s is enforced
        assert!(stay_probability(&ball, &[0, 0, 0], s / 4, 100, 1).is_err());
    }

    #[test]
    fn bridge_hits_core_targets_surely_and_empty_never() {
        let dim = dim3();
        let ball = meso_ball(dim, &[0, 0, 0], 32, 0.05).unwrap();
        // every bridge starts in the core
        let hit = bridge_hit_probability(&ball, &ball.core, 400, 5).unwrap();
        assert!((hit.estimate - 1.0).abs() < 1e-12);
        let none = bridge_hit_probability(&ball, &SiteSet::new(dim), 400, 6).unwrap();
        assert_eq!(none.estimate, 0.0);
        // targets outside the ball are rejected
        let far = SiteSet::from_coords(dim, [[100, 0, 0]]).unwrap();
        assert!(bridge_hit_probability(&ball, &far, 10, 7).is_err());
    }

    #[test]
    fn bridge_hit_probability_depends_mostly_on_cardinality() {
        // the geometry-uniformity claim lives within a dyadic annulus: at a
        // fixed distance from the boundary, k points clumped together and k
        // points spread around the annulus are hit at comparable rates
        // (spreading can only help, clumping is the adversarial case)
        let dim = dim3();
        let ball = meso_ball(dim, &[0, 0, 0], ras_scale_for_m16(), 0.05).unwrap();
        let m = ball.m as f64;
        let k = 32usize;
        let target_dist = 4.0;
        let mut candidates: Vec<Site> = ball
            .ball
            .sorted()
            .into_iter()
            .filter(|&s| {
                let d = ball.boundary_distance(s);
                (d - target_dist).abs() < 1.0
            })
            .collect();
        candidates.sort_unstable();
        // clumped: the k annulus sites nearest one anchor point
        let anchor = [(m - target_dist) as i32, 0, 0];
        let anchor_site = dim.pack(&anchor).unwrap();
        let mut by_distance = candidates.clone();
        by_distance.sort_by_key(|&s| dim.dist_sq(s, anchor_site));
        let clumped = SiteSet::from_sites(dim, by_distance.iter().take(k).copied());
        // spread: every seventh annulus site
        let spread = SiteSet::from_sites(
            dim,
            candidates.iter().copied().step_by(7).take(k),
        );
        assert_eq!(clumped.len(), k);
        assert_eq!(spread.len(), k);

        let trials = 4000;
        let p_clumped = bridge_hit_probability(&ball, &clumped, trials, 11).unwrap();
        let p_spread = bridge_hit_probability(&ball, &spread, trials, 12).unwrap();
        assert!(p_clumped.estimate > 0.0 && p_spread.estimate > 0.0);
        // spreading within the annulus must not lose more than a factor 3
        assert!(
            p_spread.estimate >= p_clumped.estimate / 3.0,
            "clumped {} vs spread {}",
            p_clumped.estimate,
            p_spread.estimate
        );
    }

    #[test]
    fn annuli_partition_and_pigeonhole() {
        let dim = dim3();
        let ball = meso_ball(dim, &[0, 0, 0], 420, 0.05).unwrap();
        assert!(ball.m >= 64);
        // all points at distance ~5 land in annulus index 2
        let shell: Vec<Site> = ball
            .ball
            .sorted()
            .into_iter()
            .filter(|&s| {
                let d = ball.boundary_distance(s);
                (4.0..8.0).contains(&d)
            })
            .take(50)
            .collect();
        let pts = SiteSet::from_sites(dim, shell.iter().copied());
        let report = dyadic_annuli(&ball, &pts).unwrap();
        assert_eq!(report.majority_index, 2);
        assert_eq!(report.majority_count, pts.len());

        // random points obey the pigeonhole bound over the actual annuli
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut random = SiteSet::new(dim);
        let m = ball.m as i32;
        while random.len() < 100 {
            let c = [
                rng.gen_range(-m..=m),
                rng.gen_range(-m..=m),
                rng.gen_range(-m..=m),
            ];
            let site = dim.pack(&c).unwrap();
            if ball.ball.contains(site) {
                random.insert(site);
            }
        }
        let report = dyadic_annuli(&ball, &random).unwrap();
        let bound = random.len() as f64 / report.annuli as f64;
        assert!(report.majority_count as f64 >= bound);
        // and comfortably beats the log_2 m pigeonhole on random data
        let log_bound = random.len() as f64 / (ball.m as f64).log2().ceil();
        assert!(report.majority_count as f64 >= log_bound);
        // the annuli partition the ball
        let everything = SiteSet::from_sites(dim, ball.ball.iter());
        let full = dyadic_annuli(&ball, &everything).unwrap();
        assert_eq!(full.counts.iter().sum::<usize>(), ball.ball.len());
    }

    #[test]
    fn exponent_fit_recovers_power_laws() {
        let d = 3usize;
        // synthetic means c N^0.6
        let samples: Vec<(u32, f64)> = [4u32, 5, 6]
            .iter()
            .map(|&n| {
                let big_n = (n as f64).powi(5);
                (n, 2.7 * big_n.powf(0.6))
            })
            .collect();
        let slope = range_exponent_fit(&samples, d).unwrap();
        assert!((slope - 0.6).abs() < 1e-9);

        // linear growth fits exponent one
        let linear: Vec<(u32, f64)> = [4u32, 5, 6]
            .iter()
            .map(|&n| (n, 0.66 * (n as f64).powi(5)))
            .collect();
        let slope = range_exponent_fit(&linear, d).unwrap();
        assert!((slope - 1.0).abs() < 1e-9);

        assert!(range_exponent_fit(&samples[..2], d).is_err());
    }

    #[test]
    fn heat_kernel_sandwich_two_sided() {
        // P^{a->b;tau}(X_s = x) within a factor 10 of m^-d (r/m)^2 at
        // r = m/2, s = tau/3, aggregating two consecutive times for parity
        let dim = dim3();
        let ball = meso_ball(dim, &[0, 0, 0], ras_scale_for_m16(), 0.05).unwrap();
        let m = ball.m as f64;
        let tau = (ball.m * ball.m) as u64;
        let s = tau / 3;
        let sites = ball.ball.sorted();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        use rand::Rng;
        let core_sites = ball.core.sorted();
        let mid_sites: Vec<Site> = sites
            .iter()
            .copied()
            .filter(|&x| (ball.boundary_distance(x) - m / 2.0).abs() < 1.0)
            .collect();
        for trial in 0..5 {
            let a = core_sites[rng.gen_range(0..core_sites.len())];
            let b = core_sites[rng.gen_range(0..core_sites.len())];
            let x = mid_sites[rng.gen_range(0..mid_sites.len())];
            // exact killed kernels: forward from a, backward from b
            let fwd_s = killed_heat_kernel(dim, &ball.ball, a, s).unwrap();
            let fwd_s1 = killed_heat_kernel(dim, &ball.ball, a, s + 1).unwrap();
            let bwd_s = killed_heat_kernel(dim, &ball.ball, b, tau - s).unwrap();
            let bwd_s1 = killed_heat_kernel(dim, &ball.ball, b, tau - s - 1).unwrap();
            let total = killed_heat_kernel(dim, &ball.ball, a, tau).unwrap();
            let bi = sites.binary_search(&b).unwrap();
            let xi = sites.binary_search(&x).unwrap();
            let denom = total[bi];
            if denom == 0.0 {
                continue; // parity mismatch of a and b at time tau
            }
            let two_time = (fwd_s[xi] * bwd_s[xi] + fwd_s1[xi] * bwd_s1[xi]) / denom;
            let estimate = two_time / 2.0;
            let r = ball.boundary_distance(x).max(1.0);
            let reference = m.powi(-3) * (r / m) * (r / m);
            let ratio = estimate / reference;
            assert!(
                (0.1..=10.0).contains(&ratio),
                "trial {trial}: ratio {ratio}"
            );
        }
    }

    #[test]
    fn bridge_endpoint_time_reversal() {
        // MC estimates of P_a(X_t = b, stay) and P_b(X_t = a, stay) agree;
        // the endpoints' l1 distance must match t's parity or both vanish
        let dim = dim3();
        let ball = meso_ball(dim, &[0, 0, 0], 16, 0.05).unwrap();
        let t = (ball.m * ball.m) as u64;
        let a = [1, 0, 0];
        let mut b = [0, 2, 0];
        if (t as i64 - 3) % 2 != 0 {
            b = [0, 2, 1];
        }
        let estimate = |from: &[i32], to: &[i32], seed: u64| -> McEstimate {
            let start = dim.pack(from).unwrap();
            let target = dim.pack(to).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let trials = 200_000u64;
            let mut hits = 0u64;
            for _ in 0..trials {
                let mut pos = start;
                let mut alive = true;
                for _ in 0..t {
                    pos = pos.offset(dim.step_delta(rng.gen_range(0..6u8)));
                    if !ball.ball.contains(pos) {
                        alive = false;
                        break;
                    }
                }
                if alive && pos == target {
                    hits += 1;
                }
            }
            let (estimate, se) = binomial_mean_se(hits, trials);
            McEstimate {
                estimate,
                se,
                trials,
            }
        };
        let fwd = estimate(&a, &b, 100);
        let bwd = estimate(&b, &a, 200);
        assert!(fwd.estimate > 0.0);
        assert!(
            (fwd.estimate - bwd.estimate).abs() <= 3.0 * (fwd.se + bwd.se),
            "{fwd:?} vs {bwd:?}"
        );
    }
}
