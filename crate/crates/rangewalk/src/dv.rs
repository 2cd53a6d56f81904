//! Donsker-Varadhan machinery for the transient walk: the classical
//! martingale, the fixed-profile probability bound, the induced hitting
//! chain on a finite domain, the large-deviation upper bound over convex
//! sets of occupation profiles, exact return probabilities, the
//! origin-correction inequality, and the a-priori range/energy tail terms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::lattice::{Dim, Site, SiteField, SiteSet, WalkPath};
use crate::numeric::{
    binomial_mean_se, derive_seed, ln_factorials, project_l1_ball, project_simplex,
};

/// A strictly positive function on the lattice: sparse values over a
/// positive constant background.
#[derive(Clone, Debug)]
pub struct BackgroundField {
    values: SiteField,
    default: f64,
}

impl BackgroundField {
    pub fn new(values: SiteField, default: f64) -> Result<BackgroundField> {
        if !(default > 0.0) || !default.is_finite() {
            return Err(Error::invalid(
                "the background value must be strictly positive",
            ));
        }
        Ok(BackgroundField { values, default })
    }

    pub fn constant(dim: Dim, value: f64) -> Result<BackgroundField> {
        BackgroundField::new(SiteField::new(dim), value)
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.values.dim()
    }

    /// u(site): the stored value if present (necessarily > 0), else the
    /// background.
    #[inline]
    pub fn get(&self, site: Site) -> f64 {
        let v = self.values.get(site);
        if v > 0.0 {
            v
        } else {
            self.default
        }
    }

    /// V(site) = neighbour average of u.
    pub fn neighbor_average(&self, site: Site) -> f64 {
        let dim = self.dim();
        let mut acc = 0.0;
        for code in 0..dim.dirs() as u8 {
            acc += self.get(site.offset(dim.step_delta(code)));
        }
        acc / dim.dirs() as f64
    }

    /// Minimum of u over the closed l1 ball of radius `radius` around x.
    pub fn min_over_ball(&self, x: Site, radius: usize) -> f64 {
        let mut min = self.default;
        let dim = self.dim();
        let center = dim.unpack(x);
        for (site, v) in self.values.iter() {
            let c = dim.unpack(site);
            let dist: i64 = c
                .iter()
                .zip(&center)
                .map(|(a, b)| ((a - b).abs()) as i64)
                .sum();
            if dist as usize <= radius && v < min {
                min = v;
            }
        }
        min
    }
}

/// The Donsker-Varadhan martingale M_n along a walk:
/// M_n = (prod_{k<n} u(S_k)/V(S_k)) u(S_n).
#[derive(Clone, Debug)]
pub struct MartingaleTrace {
    pub values: Vec<f64>,
}

impl MartingaleTrace {
    /// Maximum relative deviation between the stored trace and a log-domain
    /// recomputation from the product formula.
    pub fn recompute_deviation(&self, u: &BackgroundField, walk: &WalkPath) -> f64 {
        let mut log_prod = 0.0f64;
        let mut worst: f64 = 0.0;
        for (k, &m) in self.values.iter().enumerate() {
            let site = walk.positions()[k];
            let recomputed = log_prod.exp() * u.get(site);
            worst = worst.max((recomputed - m).abs() / m.abs().max(1e-300));
            log_prod += (u.get(site) / u.neighbor_average(site)).ln();
        }
        worst
    }
}

/// Builds the martingale trace M_0..M_N for a positive weight u.
pub fn dv_martingale_weights(u: &BackgroundField, walk: &WalkPath) -> Result<MartingaleTrace> {
    let n = walk.n_steps();
    let mut values = Vec::with_capacity(n + 1);
    let mut prod = 1.0f64;
    for k in 0..=n {
        let site = walk.positions()[k];
        let here = u.get(site);
        values.push(prod * here);
        if k < n {
            let v = u.neighbor_average(site);
            if !(v > 0.0) {
                return Err(Error::invalid("u must be positive on the walk's closure"));
            }
            prod *= here / v;
        }
    }
    Ok(MartingaleTrace { values })
}

/// The fixed-profile probability bound: for a profile phi >= 0 with
/// sum phi^2 = N and phi(0) >= 1,
///   P(f_N = phi) <= (phi(0)/alpha) exp(-E(phi)/2 + alpha sqrt(N |supp phi|)).
pub fn profile_probability_bound(phi: &SiteField, alpha: f64, n_steps: u64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    let total = phi.sum_sq();
    let n = n_steps as f64;
    if (total - n).abs() > 1e-6 * n.max(1.0) {
        return Err(Error::invalid(format!(
            "sum phi^2 = {total} but N = {n}"
        )));
    }
    let at_origin = phi.get(phi.dim().origin());
    if at_origin < 1.0 {
        return Err(Error::invalid("the profile requires phi(0) >= 1"));
    }
    let energy = phi.dirichlet_energy(None);
    let support = phi.support_size() as f64;
    Ok(at_origin / alpha * (-0.5 * energy + alpha * (n * support).sqrt()).exp())
}

/// The finite chain induced on D by the walk's returns: q(y, z) =
/// P_y(S_{T_1} = z) for y in the closure of D and z in D, computed on a
/// truncation box with the exterior treated as escape.
#[derive(Clone, Debug)]
pub struct HittingChain {
    pub dim: Dim,
    /// D, sorted.
    pub domain: Vec<Site>,
    /// D plus its lattice neighbours, sorted; contains `domain`.
    pub closure: Vec<Site>,
    /// q[y_idx][z_idx] over closure x domain.
    pub q: Vec<Vec<f64>>,
    /// 1 - row sum: the escape-to-infinity estimate per closure site.
    pub defect: Vec<f64>,
    /// Conservative truncation error per closure site: the probability of
    /// reaching the box boundary before hitting D.
    pub truncation_error: Vec<f64>,
    pub box_side: i32,
}

impl HittingChain {
    pub fn domain_index(&self, site: Site) -> Option<usize> {
        self.domain.binary_search(&site).ok()
    }

    pub fn closure_index(&self, site: Site) -> Option<usize> {
        self.closure.binary_search(&site).ok()
    }

    /// Dirichlet form of the chain over ordered pairs of D, mirroring the
    /// walk's energy convention E(f, D) = sum over ordered pairs of
    /// q_rw (f(y)-f(z))^2 with q_rw = 1/2d:
    ///   E_q(f) = sum_{y,z in D} q(y,z) (f(y) - f(z))^2.
    pub fn dirichlet_form(&self, f: &[f64]) -> f64 {
        let m = self.domain.len();
        let mut acc = 0.0;
        for (y, row_site) in self.domain.iter().enumerate() {
            let row = self.closure_index(*row_site).unwrap();
            for z in 0..m {
                let diff = f[y] - f[z];
                acc += self.q[row][z] * diff * diff;
            }
        }
        acc
    }

    pub fn max_truncation_error(&self) -> f64 {
        self.truncation_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// Conjugate-gradient solve of (I - P) h = b on the box interior minus D,
/// where P averages over neighbours that are unknowns. Returns h indexed
/// like `sites`.
fn cg_solve(
    dim: Dim,
    sites: &[Site],
    index: &FxHashMap<Site, u32>,
    b: &[f64],
) -> Result<Vec<f64>> {
    const NONE: u32 = u32::MAX;
    let dirs = dim.dirs();
    let mut table = vec![NONE; sites.len() * dirs];
    for (i, &s) in sites.iter().enumerate() {
        for code in 0..dirs as u8 {
            if let Some(&j) = index.get(&s.offset(dim.step_delta(code))) {
                table[i * dirs + code as usize] = j;
            }
        }
    }
    let apply = |v: &[f64], out: &mut [f64]| {
        let inv = 1.0 / dirs as f64;
        for i in 0..v.len() {
            let mut acc = 0.0;
            for c in 0..dirs {
                let j = table[i * dirs + c];
                if j != NONE {
                    acc += v[j as usize];
                }
            }
            out[i] = v[i] - acc * inv;
        }
    };
    let m = sites.len();
    let mut x = vec![0.0; m];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; m];
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let b_norm: f64 = rs.sqrt().max(1e-300);
    for _ in 0..20_000 {
        if rs.sqrt() <= 1e-13 * b_norm {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(Error::numerical("CG lost positive definiteness"));
        }
        let alpha = rs / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..m {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::numerical("CG failed to converge"))
}

/// Builds the induced hitting chain by solving the lattice harmonic system
/// on the truncation box Lambda(box_side), with exits counted as escape.
pub fn induced_chain(dim: Dim, domain: &SiteSet, box_side: i32) -> Result<HittingChain> {
    if domain.is_empty() {
        return Err(Error::invalid("domain must be nonempty"));
    }
    let d_sites = domain.sorted();
    let closure_set = domain.closure();
    let closure = closure_set.sorted();
    // the box must contain the closure
    let half = box_side / 2;
    for &s in &closure {
        for a in 0..dim.get() {
            let c = dim.coord(s, a);
            if c <= -half || c > half {
                return Err(Error::invalid(
                    "the truncation box does not contain the domain's closure",
                ));
            }
        }
    }
    // unknowns: box sites minus D
    let d = dim.get();
    let mut sites = Vec::new();
    {
        let mut coords = vec![-half + 1; d];
        loop {
            let site = dim.pack(&coords)?;
            if !domain.contains(site) {
                sites.push(site);
            }
            let mut axis = 0;
            loop {
                if axis == d {
                    break;
                }
                coords[axis] += 1;
                if coords[axis] <= half {
                    break;
                }
                coords[axis] = -half + 1;
                axis += 1;
            }
            if coords.iter().all(|&c| c == -half + 1) {
                break;
            }
        }
    }
    sites.sort_unstable();
    let index: FxHashMap<Site, u32> = sites
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i as u32))
        .collect();

    // entrance probabilities per target z in D
    let dirs = dim.dirs();
    let inv = 1.0 / dirs as f64;
    let mut entrance: Vec<Vec<f64>> = Vec::with_capacity(d_sites.len());
    for &z in &d_sites {
        let mut b = vec![0.0; sites.len()];
        for (i, &s) in sites.iter().enumerate() {
            for code in 0..dirs as u8 {
                if s.offset(dim.step_delta(code)) == z {
                    b[i] += inv;
                }
            }
        }
        entrance.push(cg_solve(dim, &sites, &index, &b)?);
    }
    // escape-to-box-boundary probability (before hitting D)
    let escape = {
        let mut b = vec![0.0; sites.len()];
        for (i, &s) in sites.iter().enumerate() {
            for code in 0..dirs as u8 {
                let nbr = s.offset(dim.step_delta(code));
                let outside = (0..d).any(|a| {
                    let c = dim.coord(nbr, a);
                    c <= -half || c > half
                });
                if outside {
                    b[i] += inv;
                }
            }
        }
        cg_solve(dim, &sites, &index, &b)?
    };

    let mut q = Vec::with_capacity(closure.len());
    let mut defect = Vec::with_capacity(closure.len());
    let mut trunc = Vec::with_capacity(closure.len());
    for &y in &closure {
        let mut row = vec![0.0; d_sites.len()];
        let mut esc = 0.0;
        for code in 0..dirs as u8 {
            let w = y.offset(dim.step_delta(code));
            if let Ok(zi) = d_sites.binary_search(&w) {
                row[zi] += inv;
            } else if let Some(&wi) = index.get(&w) {
                for (zi, h_z) in entrance.iter().enumerate() {
                    row[zi] += inv * h_z[wi as usize];
                }
                esc += inv * escape[wi as usize];
            } else {
                // first step already leaves the box
                esc += inv;
            }
        }
        let sum: f64 = row.iter().sum();
        q.push(row);
        defect.push(1.0 - sum);
        trunc.push(esc);
    }
    Ok(HittingChain {
        dim,
        domain: d_sites,
        closure,
        q,
        defect,
        truncation_error: trunc,
        box_side,
    })
}

/// The Theorem GD upper bound for the convex set
/// C = {h : |h - g_sq/t|_{1,D} <= radius} intersected with the probability
/// simplex on D.
#[derive(Clone, Debug)]
pub struct GdBound {
    /// Best found value of (1/2) E(sqrt h, D) over the feasible set.
    pub inf_energy: f64,
    /// exp(-t * inf_energy).
    pub bound: f64,
    /// The minimising h.
    pub argmin: Vec<f64>,
}

/// Minimises (1/2) E(sqrt h, D) over C by projected gradient descent in the
/// sqrt variables with alternating simplex / L1-ball projections, from five
/// deterministic-seeded starts. The returned value upper-bounds the true
/// infimum, so the exponential may undershoot the theorem's bound; on the
/// small domains it is exercised on, multistart recovers the global minimum
/// to optimiser precision.
pub fn gd_upper_bound(
    dim: Dim,
    domain: &SiteSet,
    g_sq: &SiteField,
    t: u64,
    radius: f64,
    seed: u64,
) -> Result<GdBound> {
    if domain.is_empty() {
        return Err(Error::invalid("domain must be nonempty"));
    }
    if radius < 0.0 {
        return Err(Error::invalid("radius must be nonnegative"));
    }
    let sites = domain.sorted();
    let m = sites.len();
    let center: Vec<f64> = sites.iter().map(|&s| g_sq.get(s) / t as f64).collect();
    // feasibility: L1 distance from the center to the simplex
    let pos_sum: f64 = center.iter().sum();
    let dist = (1.0 - pos_sum).abs();
    if dist > radius + 1e-12 {
        return Err(Error::infeasible(format!(
            "the L1 ball of radius {radius} around g^2/t misses the simplex (distance {dist:.6})"
        )));
    }

    // neighbour structure within D
    let index: FxHashMap<Site, usize> = sites.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &s) in sites.iter().enumerate() {
        for code in 0..dim.dirs() as u8 {
            if let Some(&j) = index.get(&s.offset(dim.step_delta(code))) {
                nbrs[i].push(j);
            }
        }
    }
    let objective = |v: &[f64]| -> f64 {
        // (1/2) E(v, D) with the ordered-pair convention
        let mut acc = 0.0;
        for i in 0..m {
            for &j in &nbrs[i] {
                let diff = v[i] - v[j];
                acc += diff * diff;
            }
        }
        acc / (2.0 * dim.dirs() as f64)
    };
    let project = |h: &mut Vec<f64>| {
        for _ in 0..80 {
            project_simplex(h);
            project_l1_ball(h, &center, radius);
        }
        project_simplex(h);
        // the simplex projection can step slightly outside the ball; accept
        // the tiny violation as optimiser slack
        for v in h.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    starts.push(center.clone());
    starts.push(vec![1.0 / m as f64; m]);
    for _ in 0..3 {
        starts.push((0..m).map(|_| rng.gen_range(0.0..1.0)).collect());
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in starts {
        let mut h = start;
        project(&mut h);
        let mut v: Vec<f64> = h.iter().map(|&x| x.max(0.0).sqrt()).collect();
        let mut value = objective(&v);
        let mut step = 0.5;
        for _ in 0..600 {
            // gradient of (1/2) E in the sqrt variables
            let mut grad = vec![0.0; m];
            for i in 0..m {
                for &j in &nbrs[i] {
                    grad[i] += (v[i] - v[j]) / dim.dirs() as f64 * 2.0;
                }
            }
            // descend in v, then project h = v^2 back to the feasible set
            let mut improved = false;
            let mut local_step = step;
            for _ in 0..20 {
                let trial_v: Vec<f64> = (0..m)
                    .map(|i| (v[i] - local_step * grad[i]).max(0.0))
                    .collect();
                let mut trial_h: Vec<f64> = trial_v.iter().map(|&x| x * x).collect();
                project(&mut trial_h);
                let new_v: Vec<f64> = trial_h.iter().map(|&x| x.sqrt()).collect();
                let new_value = objective(&new_v);
                if new_value < value - 1e-15 {
                    v = new_v;
                    h = trial_h;
                    value = new_value;
                    improved = true;
                    break;
                }
                local_step /= 2.0;
            }
            if !improved {
                break;
            }
            step = (local_step * 2.0).min(1.0);
            if value < 1e-18 {
                break;
            }
        }
        match &best {
            Some((b, _)) if *b <= value => {}
            _ => best = Some((value, h)),
        }
    }
    let (inf_energy, argmin) = best.unwrap();
    Ok(GdBound {
        inf_energy,
        bound: (-(t as f64) * inf_energy).exp(),
        argmin,
    })
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub estimate: f64,
    pub se: f64,
    pub trials: u64,
}

/// Simulates the event {(1/t) L_t^D in C, tau(D, t) < infinity} from a given
/// start. Walks are stopped (counted as tau = infinity) once they leave the
/// truncation box or exceed 1000 t steps; both truncations shrink the
/// estimate, which is the safe direction for upper-bound tests.
fn simulate_gd_event(
    dim: Dim,
    domain: &[Site],
    index: &FxHashMap<Site, usize>,
    start: Site,
    g_over_t: &[f64],
    t: u64,
    radius: f64,
    trials: u64,
    box_side: i32,
    rng: &mut ChaCha8Rng,
) -> McEstimate {
    let half = box_side / 2;
    let d = dim.get();
    let dirs = dim.dirs() as u8;
    let cap = 1000 * t;
    let mut hits = 0u64;
    let mut counts = vec![0u64; domain.len()];
    let mut coords = vec![0i32; d];
    for _ in 0..trials {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut pos = start;
        dim.unpack_into(pos, &mut coords);
        let mut total = 0u64;
        let mut steps = 0u64;
        // count the starting site if it lies in D
        if let Some(&i) = index.get(&pos) {
            counts[i] = 1;
            total = 1;
        }
        let mut success = total >= t;
        while !success && steps < cap {
            let code = rng.gen_range(0..dirs);
            let axis = (code >> 1) as usize;
            let sign = if code & 1 == 0 { 1 } else { -1 };
            coords[axis] += sign;
            if coords[axis] <= -half || coords[axis] > half {
                break; // escaped the truncation box
            }
            pos = pos.offset(dim.step_delta(code));
            steps += 1;
            if let Some(&i) = index.get(&pos) {
                counts[i] += 1;
                total += 1;
                if total >= t {
                    success = true;
                }
            }
        }
        if success {
            let dist: f64 = counts
                .iter()
                .zip(g_over_t)
                .map(|(&c, &g)| (c as f64 / t as f64 - g).abs())
                .sum();
            if dist <= radius {
                hits += 1;
            }
        }
    }
    let (estimate, se) = binomial_mean_se(hits, trials);
    McEstimate {
        estimate,
        se,
        trials,
    }
}

/// MC estimates of P_x((1/t) L_t^D in C, tau < infinity) for every start x
/// in the closure of D; the theorem bounds their infimum.
pub fn gd_mc_lhs(
    dim: Dim,
    domain: &SiteSet,
    g_sq: &SiteField,
    t: u64,
    radius: f64,
    trials: u64,
    seed: u64,
    box_side: i32,
) -> Result<Vec<(Site, McEstimate)>> {
    let sites = domain.sorted();
    let index: FxHashMap<Site, usize> = sites.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let g_over_t: Vec<f64> = sites.iter().map(|&s| g_sq.get(s) / t as f64).collect();
    let closure = domain.closure().sorted();
    let mut out = Vec::with_capacity(closure.len());
    for (i, &x) in closure.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let est = simulate_gd_event(
            dim, &sites, &index, x, &g_over_t, t, radius, trials, box_side, &mut rng,
        );
        out.push((x, est));
    }
    Ok(out)
}

/// How to evaluate P_x(S_k = 0) + P_x(S_{k-1} = 0).
#[derive(Clone, Copy, Debug)]
pub enum ReturnMode {
    /// Exact axis-decomposed convolution (k up to ~1e4).
    Exact,
    /// The asymptotic lower-bound form exp(-c' n^{2d} / k).
    Bound { c_prime: f64, n: u32 },
}

/// P_x(S_k = 0) for the d-dimensional walk by summing over the multinomial
/// allocation of steps to axes; log-domain binomials keep it stable.
fn point_return_probability(dim: Dim, x: &[i32], k: u64) -> f64 {
    let d = dim.get();
    let k = k as usize;
    if k == 0 {
        return if x.iter().all(|&c| c == 0) { 1.0 } else { 0.0 };
    }
    let lnf = ln_factorials(k);
    // 1-d displacement probability with k_a steps: C(k_a, (k_a + |x|)/2) / 2^k_a
    let ln_axis = |steps: usize, disp: i64| -> Option<f64> {
        let disp = disp.unsigned_abs() as usize;
        if disp > steps || (steps + disp) % 2 != 0 {
            return None;
        }
        let up = (steps + disp) / 2;
        Some(lnf[steps] - lnf[up] - lnf[steps - up] - steps as f64 * 2f64.ln())
    };
    let ln_d = (2.0 * d as f64).ln();
    match d {
        1 => ln_axis(k, x[0] as i64).map_or(0.0, f64::exp),
        2 => {
            let mut acc = 0.0;
            for k0 in 0..=k {
                let k1 = k - k0;
                if let (Some(a), Some(b)) = (ln_axis(k0, x[0] as i64), ln_axis(k1, x[1] as i64)) {
                    // multinomial allocation: C(k, k0) (1/d)^k, and the
                    // per-axis 1/2^k_a factors are inside ln_axis
                    let ln_mult = lnf[k] - lnf[k0] - lnf[k1]
                        - k as f64 * (d as f64).ln();
                    acc += (ln_mult + a + b).exp();
                }
            }
            let _ = ln_d;
            acc
        }
        _ => {
            // general d: recursive composition over axis allocations with a
            // concentration window to keep the sum tractable
            fn recurse(
                axis: usize,
                remaining: usize,
                ln_acc: f64,
                x: &[i32],
                lnf: &[f64],
                d: usize,
                ln_axis: &dyn Fn(usize, i64) -> Option<f64>,
                total: &mut f64,
            ) {
                if axis == x.len() - 1 {
                    if let Some(a) = ln_axis(remaining, x[axis] as i64) {
                        *total += (ln_acc + a - lnf[remaining]).exp();
                    }
                    return;
                }
                // window around the mean allocation remaining/(d-axis)
                let axes_left = d - axis;
                let mean = remaining as f64 / axes_left as f64;
                let sd = (remaining as f64).sqrt().max(4.0);
                let lo = ((mean - 10.0 * sd).floor().max(0.0)) as usize;
                let hi = ((mean + 10.0 * sd).ceil() as usize).min(remaining);
                for k_a in lo..=hi {
                    if let Some(a) = ln_axis(k_a, x[axis] as i64) {
                        recurse(
                            axis + 1,
                            remaining - k_a,
                            ln_acc + a - lnf[k_a],
                            x,
                            lnf,
                            d,
                            ln_axis,
                            total,
                        );
                    }
                }
            }
            let mut total = 0.0;
            // multinomial: k! / prod k_a! * (1/d)^k, with ln k! added once
            recurse(
                0,
                k,
                lnf[k] - k as f64 * (d as f64).ln(),
                x,
                &lnf,
                d,
                &ln_axis,
                &mut total,
            );
            total
        }
    }
}

/// P_x(S_k = 0) + P_x(S_{k-1} = 0), exactly or by the configured bound.
pub fn return_probability(dim: Dim, x: &[i32], k: u64, mode: ReturnMode) -> Result<f64> {
    if x.len() != dim.get() {
        return Err(Error::invalid("x has the wrong dimension"));
    }
    match mode {
        ReturnMode::Exact => {
            if k == 0 {
                return Err(Error::invalid("exact mode requires k >= 1"));
            }
            if k > 20_000 {
                return Err(Error::invalid("exact mode supports k <= 2e4"));
            }
            let l1: i64 = x.iter().map(|&c| c.abs() as i64).sum();
            if l1 > 200 {
                return Err(Error::invalid("exact mode supports |x|_1 <= 200"));
            }
            Ok(point_return_probability(dim, x, k) + point_return_probability(dim, x, k - 1))
        }
        ReturnMode::Bound { c_prime, n } => {
            let d = dim.get() as f64;
            Ok((-c_prime * (n as f64).powf(2.0 * d) / k as f64).exp())
        }
    }
}

/// Report of the origin-correction check (both sides estimated by MC,
/// the return factor exactly).
#[derive(Clone, Debug)]
pub struct OriginCorrectionReport {
    pub lhs: McEstimate,
    /// min over starts x in the closure of 2 P_x(inflated event) / return(x).
    pub rhs_value: f64,
    pub rhs_prob: McEstimate,
    pub return_factor: f64,
    pub worst_start: Vec<i32>,
    pub pass: bool,
}

/// Checks the origin-correction inequality: the probability from the origin
/// of {|L_t^D/t - g^2/t|_1 <= radius} is at most, for every x in the
/// closure, twice the same probability from x with the radius inflated by
/// 4k/(t-k), divided by P_x(S_k = 0) + P_x(S_{k-1} = 0).
pub fn origin_correction_check(
    dim: Dim,
    domain: &SiteSet,
    g_sq: &SiteField,
    t: u64,
    k: u64,
    radius: f64,
    trials: u64,
    seed: u64,
    box_side: i32,
) -> Result<OriginCorrectionReport> {
    if k == 0 || k >= t {
        return Err(Error::invalid("need 0 < k < t"));
    }
    let sites = domain.sorted();
    let index: FxHashMap<Site, usize> = sites.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let g_over_t: Vec<f64> = sites.iter().map(|&s| g_sq.get(s) / t as f64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let lhs = simulate_gd_event(
        dim,
        &sites,
        &index,
        dim.origin(),
        &g_over_t,
        t,
        radius,
        trials,
        box_side,
        &mut rng,
    );

    let inflated = radius + 4.0 * k as f64 / (t - k) as f64;
    let closure = domain.closure().sorted();
    // the inequality holds for every x in the closure; test each start with
    // its own combined error, flooring the binomial SE at one-hit resolution
    let mut best: Option<(f64, McEstimate, f64, Site)> = None;
    let mut pass = true;
    for (i, &x) in closure.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + i as u64));
        let prob = simulate_gd_event(
            dim, &sites, &index, x, &g_over_t, t, inflated, trials, box_side, &mut rng,
        );
        let ret = return_probability(dim, &dim.unpack(x), k, ReturnMode::Exact)?;
        let value = 2.0 * prob.estimate / ret;
        let prob_se = prob.se.max(1.0 / trials as f64);
        let rhs_se = 2.0 * prob_se / ret;
        if lhs.estimate > value + 3.0 * (lhs.se + rhs_se) {
            pass = false;
        }
        if best.as_ref().map_or(true, |(v, ..)| value < *v) {
            best = Some((value, prob, ret, x));
        }
    }
    let (rhs_value, rhs_prob, return_factor, worst) = best.unwrap();
    Ok(OriginCorrectionReport {
        lhs,
        rhs_value,
        rhs_prob,
        return_factor,
        worst_start: dim.unpack(worst),
        pass,
    })
}

/// The a-priori tail terms: the range exponent (c - 2 k(1,d)) n^d (with
/// k(1,d) a configured parameter) and the energy tail
/// exp(-(kappa/2 - 4dc) n^d ln n), flagged vacuous when the exponent is
/// nonpositive.
#[derive(Clone, Copy, Debug)]
pub struct AprioriTerms {
    pub range_exponent: f64,
    pub k1d: f64,
    pub energy_log_bound: f64,
    pub energy_bound: f64,
    pub vacuous: bool,
}

pub fn apriori_bound_terms(d: usize, n: u32, c: f64, kappa: f64, k1d: f64) -> AprioriTerms {
    let nd = (n as f64).powi(d as i32);
    let range_exponent = (c - 2.0 * k1d) * nd;
    let coeff = kappa / 2.0 - 4.0 * d as f64 * c;
    let energy_log_bound = -coeff * nd * (n as f64).ln();
    AprioriTerms {
        range_exponent,
        k1d,
        energy_log_bound,
        energy_bound: energy_log_bound.exp(),
        vacuous: coeff <= 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::WalkPath;

    fn dim(d: usize) -> Dim {
        Dim::new(d).unwrap()
    }

    /// Enumerates all (2d)^N walks, calling `f` with each and its weight.
    fn for_all_walks(d: usize, n: usize, mut f: impl FnMut(&WalkPath)) {
        let dm = dim(d);
        let dirs = 2 * d;
        let total = dirs.pow(n as u32);
        let mut steps = vec![0u8; n];
        for code in 0..total {
            let mut c = code;
            for s in steps.iter_mut() {
                *s = (c % dirs) as u8;
                c /= dirs;
            }
            let walk = WalkPath::build(dm, &vec![0; d], steps.clone()).unwrap();
            f(&walk);
        }
    }

    #[test]
    fn constant_weight_martingale_is_constant_one() {
        let dm = dim(3);
        let u = BackgroundField::constant(dm, 1.0).unwrap();
        let walk = WalkPath::build(dm, &[0, 0, 0], vec![0, 2, 4, 1]).unwrap();
        let trace = dv_martingale_weights(&u, &walk).unwrap();
        for &m in &trace.values {
            assert!((m - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn martingale_mean_is_initial_value_by_exhaustion() {
        // d = 2, N = 3: the average of M_3 over all 4^3 paths equals u(0)
        let dm = dim(2);
        let mut field = SiteField::new(dm);
        for x in -4..=4 {
            for y in -4..=4 {
                field
                    .set(dm.pack(&[x, y]).unwrap(), 2.0 + x as f64 * 0.3 + y as f64 * 0.1)
                    .unwrap();
            }
        }
        let u = BackgroundField::new(field, 2.0).unwrap();
        let mut acc = 0.0;
        let mut count = 0usize;
        for_all_walks(2, 3, |walk| {
            let trace = dv_martingale_weights(&u, walk).unwrap();
            acc += *trace.values.last().unwrap();
            count += 1;
        });
        let mean = acc / count as f64;
        let expect = u.get(dm.origin());
        assert!((mean - expect).abs() < 1e-12 * expect, "{mean} vs {expect}");
    }

    #[test]
    fn martingale_trace_recomputes() {
        use rand::Rng;
        let dm = dim(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut field = SiteField::new(dm);
        for _ in 0..30 {
            let c = [
                rng.gen_range(-3..=3),
                rng.gen_range(-3..=3),
                rng.gen_range(-3..=3),
            ];
            field
                .set(dm.pack(&c).unwrap(), rng.gen_range(0.5..3.0))
                .unwrap();
        }
        let u = BackgroundField::new(field, 1.0).unwrap();
        let steps: Vec<u8> = (0..40).map(|_| rng.gen_range(0..6)).collect();
        let walk = WalkPath::build(dm, &[0, 0, 0], steps).unwrap();
        let trace = dv_martingale_weights(&u, &walk).unwrap();
        assert!(trace.values.iter().all(|&m| m > 0.0));
        assert!(trace.recompute_deviation(&u, &walk) < 1e-12);
    }

    #[test]
    fn fundamental_inequality_by_exhaustion() {
        // E[exp(sum ln(u/V) L_N)] <= u(0) / inf_{|y| <= N} u(y)
        use rand::Rng;
        let dm = dim(2);
        let n = 4usize;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let mut field = SiteField::new(dm);
            for x in -6..=6 {
                for y in -6..=6 {
                    field
                        .set(dm.pack(&[x, y]).unwrap(), rng.gen_range(0.4..2.5))
                        .unwrap();
                }
            }
            let u = BackgroundField::new(field, 1.0).unwrap();
            let mut acc = 0.0;
            let mut count = 0usize;
            for_all_walks(2, n, |walk| {
                let l = walk.local_time();
                let mut log_sum = 0.0;
                for (site, visits) in l.iter() {
                    log_sum += (u.get(site) / u.neighbor_average(site)).ln() * visits;
                }
                acc += log_sum.exp();
                count += 1;
            });
            let mean = acc / count as f64;
            let bound = u.get(dm.origin()) / u.min_over_ball(dm.origin(), n);
            assert!(mean <= bound * (1.0 + 1e-12), "{mean} vs {bound}");
        }
    }

    #[test]
    fn profile_bound_formula_and_delta_case() {
        // d = 3, N = 1, phi = delta_0, alpha = 1/2: bound = 2 e^{-1/2}
        let dm = dim(3);
        let phi = SiteField::from_pairs(dm, [([0, 0, 0], 1.0)]).unwrap();
        let bound = profile_probability_bound(&phi, 0.5, 1).unwrap();
        let expect = 2.0 * (-0.5f64).exp();
        assert!((bound - expect).abs() < 1e-12, "{bound} vs {expect}");
        assert!((expect - 1.2131).abs() < 1e-4);
        // the exact probability P(f_1 = delta_0) = 1 is below the bound
        assert!(1.0 <= bound);
        // rejected inputs
        assert!(profile_probability_bound(&phi, 0.5, 2).is_err());
        assert!(profile_probability_bound(&phi, 1.5, 1).is_err());
    }

    #[test]
    fn profile_bound_monotone_in_energy() {
        // at fixed support and alpha the bound decreases in E(phi)
        let dm = dim(1);
        // two profiles on two sites with sum of squares = 8
        let flat = SiteField::from_pairs(dm, [([0], 2.0), ([1], 2.0)]).unwrap();
        let steep = SiteField::from_pairs(dm, [([0], 7f64.sqrt()), ([1], 1.0)]).unwrap();
        let b_flat = profile_probability_bound(&flat, 0.3, 8).unwrap();
        let b_steep = profile_probability_bound(&steep, 0.3, 8).unwrap();
        assert!(flat.dirichlet_energy(None) < steep.dirichlet_energy(None));
        // normalise out the differing phi(0) prefactor
        assert!(b_steep / steep.get(dm.origin()) < b_flat / flat.get(dm.origin()));
    }

    #[test]
    fn profile_bound_dominates_enumerated_profiles() {
        // enumerate all 6^4 paths at d = 3, group by f_N, and compare the
        // exact probabilities with the bound at alpha = 0.3
        let mut probs: FxHashMap<Vec<(Site, u64)>, f64> = FxHashMap::default();
        let total = 6u32.pow(4) as f64;
        for_all_walks(3, 4, |walk| {
            let l = walk.local_time();
            let mut key: Vec<(Site, u64)> = l.iter().map(|(s, v)| (s, v as u64)).collect();
            key.sort_unstable();
            *probs.entry(key).or_insert(0.0) += 1.0 / total;
        });
        let dm = dim(3);
        assert!(!probs.is_empty());
        for (profile, p) in probs {
            let mut phi = SiteField::new(dm);
            for (site, visits) in profile {
                phi.set(site, (visits as f64).sqrt()).unwrap();
            }
            let bound = profile_probability_bound(&phi, 0.3, 4).unwrap();
            assert!(p <= bound * (1.0 + 1e-12), "P = {p}, bound = {bound}");
        }
    }

    #[test]
    fn induced_chain_on_the_origin_matches_the_return_constant() {
        // q(0,0) is the classical d = 3 return probability 0.3405...
        let dm = dim(3);
        let domain = SiteSet::from_coords(dm, [[0, 0, 0]]).unwrap();
        let chain = induced_chain(dm, &domain, 64).unwrap();
        let row = chain.closure_index(dm.origin()).unwrap();
        let q00 = chain.q[row][0];
        let err = chain.truncation_error[row];
        assert!((q00 - 0.340537).abs() <= err, "q00 = {q00}, err = {err}");
        // the truncated value underestimates the true return probability
        assert!(q00 <= 0.340538);
        assert!(q00 > 0.31);
        // row sums below one, defect positive in d = 3
        for (row, d) in chain.q.iter().zip(&chain.defect) {
            let sum: f64 = row.iter().sum();
            assert!(sum <= 1.0 + 1e-12);
            assert!(*d >= -1e-12);
        }
    }

    #[test]
    fn induced_chain_truncation_error_shrinks_with_the_box() {
        let dm = dim(3);
        let domain = SiteSet::from_coords(dm, [[0, 0, 0], [1, 0, 0]]).unwrap();
        let small = induced_chain(dm, &domain, 16).unwrap();
        let big = induced_chain(dm, &domain, 32).unwrap();
        for (a, b) in small.truncation_error.iter().zip(&big.truncation_error) {
            assert!(b < a, "{b} not below {a}");
        }
        assert!(induced_chain(dm, &domain, 2).is_err());
    }

    #[test]
    fn induced_chain_is_reversible_within_truncation() {
        let dm = dim(3);
        let domain = SiteSet::from_coords(dm, [[0, 0, 0], [1, 0, 0]]).unwrap();
        let chain = induced_chain(dm, &domain, 32).unwrap();
        let r0 = chain.closure_index(chain.domain[0]).unwrap();
        let r1 = chain.closure_index(chain.domain[1]).unwrap();
        let q01 = chain.q[r0][1];
        let q10 = chain.q[r1][0];
        let tol = chain.max_truncation_error();
        assert!((q01 - q10).abs() <= tol, "{q01} vs {q10} (tol {tol})");
    }

    #[test]
    fn induced_chain_dirichlet_form_dominates_walk_energy() {
        use rand::Rng;
        let dm = dim(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            // random small connected domain
            let mut coords = vec![vec![0, 0, 0]];
            while coords.len() < 4 {
                let base = coords[rng.gen_range(0..coords.len())].clone();
                let a = rng.gen_range(0..3);
                let mut c = base;
                c[a] += if rng.gen_bool(0.5) { 1 } else { -1 };
                if !coords.contains(&c) {
                    coords.push(c);
                }
            }
            let domain = SiteSet::from_coords(dm, coords.clone()).unwrap();
            let chain = induced_chain(dm, &domain, 24).unwrap();

            let g: Vec<f64> = (0..chain.domain.len())
                .map(|_| rng.gen_range(0.1..2.0))
                .collect();
            let sqrt_g: Vec<f64> = g.iter().map(|x| x.sqrt()).collect();
            let chain_form = chain.dirichlet_form(&sqrt_g);

            let mut field = SiteField::new(dm);
            for (i, &s) in chain.domain.iter().enumerate() {
                field.set(s, sqrt_g[i]).unwrap();
            }
            let walk_energy = field.dirichlet_energy(Some(&domain));
            let slack = 2.0 * dm.dirs() as f64 * chain.max_truncation_error() * walk_energy;
            assert!(
                chain_form >= walk_energy - slack - 1e-12,
                "chain {chain_form} vs walk {walk_energy}"
            );
        }
    }

    #[test]
    fn gd_bound_trivial_and_two_site_cases() {
        let dm = dim(3);
        // singleton domain: no interior edges, bound = 1
        let single = SiteSet::from_coords(dm, [[0, 0, 0]]).unwrap();
        let g = SiteField::from_pairs(dm, [([0, 0, 0], 12.0)]).unwrap();
        let b = gd_upper_bound(dm, &single, &g, 12, 0.1, 7).unwrap();
        assert!(b.inf_energy.abs() < 1e-15);
        assert!((b.bound - 1.0).abs() < 1e-12);

        // two sites, C = {delta_second} (radius 0): inf = 1/(2d), so the
        // bound at t = 12 is exp(-2)
        let two = SiteSet::from_coords(dm, [[0, 0, 0], [1, 0, 0]]).unwrap();
        let g2 = SiteField::from_pairs(dm, [([1, 0, 0], 12.0)]).unwrap();
        let b2 = gd_upper_bound(dm, &two, &g2, 12, 0.0, 7).unwrap();
        assert!((b2.inf_energy - 1.0 / 6.0).abs() < 1e-9, "{}", b2.inf_energy);
        assert!((b2.bound - (-2.0f64).exp()).abs() < 1e-8);

        // infeasible: g^2/t off the simplex by more than the radius
        let g_bad = SiteField::from_pairs(dm, [([0, 0, 0], 24.0)]).unwrap();
        assert!(gd_upper_bound(dm, &two, &g_bad, 12, 0.2, 7).is_err());
    }

    #[test]
    fn gd_bound_dominates_mc_on_a_two_site_segment() {
        let dm = dim(3);
        let domain = SiteSet::from_coords(dm, [[0, 0, 0], [1, 0, 0]]).unwrap();
        let t = 12u64;
        let mut g = SiteField::new(dm);
        g.set(dm.pack(&[0, 0, 0]).unwrap(), 6.0).unwrap();
        g.set(dm.pack(&[1, 0, 0]).unwrap(), 6.0).unwrap();
        let bound = gd_upper_bound(dm, &domain, &g, t, 0.2, 5).unwrap();
        let lhs = gd_mc_lhs(dm, &domain, &g, t, 0.2, 100_000, 99, 32).unwrap();
        let (inf_est, se) = lhs
            .iter()
            .map(|(_, e)| (e.estimate, e.se))
            .fold((f64::INFINITY, 0.0), |acc, v| if v.0 < acc.0 { v } else { acc });
        assert!(
            inf_est <= bound.bound + 3.0 * se,
            "MC {inf_est} vs bound {}",
            bound.bound
        );
    }

    #[test]
    fn return_probabilities_small_cases() {
        let dm = dim(3);
        // d = 3: P_0(S_2 = 0) = 1/6, P_0(S_1 = 0) = 0
        let p = return_probability(dm, &[0, 0, 0], 2, ReturnMode::Exact).unwrap();
        assert!((p - 1.0 / 6.0).abs() < 1e-14, "{p}");
        // d = 1: P_0(S_2 = 0) + P_0(S_1 = 0) = 1/2
        let d1 = dim(1);
        let p = return_probability(d1, &[0], 2, ReturnMode::Exact).unwrap();
        assert!((p - 0.5).abs() < 1e-14);
        // parity: consecutive times make the sum positive from any x
        let p = return_probability(dm, &[1, 0, 0], 3, ReturnMode::Exact).unwrap();
        assert!(p > 0.0);
        // bound mode reproduces the exponential form
        let b = return_probability(
            dm,
            &[0, 0, 0],
            100,
            ReturnMode::Bound { c_prime: 2.0, n: 3 },
        )
        .unwrap();
        assert!((b - (-2.0 * 3f64.powi(6) / 100.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn return_probability_matches_direct_enumeration_d2() {
        // exact oracle: direct path enumeration at small k
        let dm = dim(2);
        for (x, k) in [([0, 0], 4u64), ([1, 1], 4), ([2, 0], 6)] {
            let mut hits = 0u64;
            let dirs = 4u32;
            let total = dirs.pow(k as u32);
            for code in 0..total {
                let mut c = code;
                let mut pos = [x[0], x[1]];
                for _ in 0..k {
                    let step = (c % dirs) as u8;
                    c /= dirs;
                    let axis = (step >> 1) as usize;
                    pos[axis] += if step & 1 == 0 { 1 } else { -1 };
                }
                if pos == [0, 0] {
                    hits += 1;
                }
            }
            let exact = hits as f64 / total as f64;
            let got = point_return_probability(dm, &x, k);
            assert!((got - exact).abs() < 1e-12, "x={x:?} k={k}: {got} vs {exact}");
        }
    }

    #[test]
    fn return_probability_gaussian_regime() {
        // sanity of the exp(-c |x|^2 scale / k) shape: the exact value at
        // moderate k dominates a fitted Gaussian-type lower bound
        let dm = dim(3);
        let mut c_fit: f64 = 0.0;
        for (x, k) in [([10, 0, 0], 1000u64), ([20, 5, 0], 2000), ([15, 15, 10], 4000)] {
            let p = return_probability(dm, &x, k, ReturnMode::Exact).unwrap();
            assert!(p > 0.0);
            let x2: f64 = x.iter().map(|&c| (c * c) as f64).sum();
            // p ~ 2 (3/(2 pi k))^{3/2} exp(-3 x^2 / (2k)) in the local CLT
            let c_here = -(p.ln()) * k as f64 / x2.max(1.0);
            c_fit = c_fit.max(c_here);
        }
        assert!(c_fit.is_finite() && c_fit > 0.0);
    }

    #[test]
    fn origin_correction_holds_on_a_small_domain() {
        let dm = dim(3);
        let domain = SiteSet::from_coords(dm, [[0, 0, 0], [1, 0, 0]]).unwrap();
        let mut g = SiteField::new(dm);
        g.set(dm.pack(&[0, 0, 0]).unwrap(), 6.0).unwrap();
        g.set(dm.pack(&[1, 0, 0]).unwrap(), 6.0).unwrap();
        let report =
            origin_correction_check(dm, &domain, &g, 12, 4, 0.3, 100_000, 41, 32).unwrap();
        assert!(report.pass, "lhs {:?} rhs {}", report.lhs, report.rhs_value);

        // radius >= 2 covers the whole simplex diameter: trivially true
        let wide = origin_correction_check(dm, &domain, &g, 12, 4, 2.0, 20_000, 42, 32).unwrap();
        assert!(wide.pass);

        // k = t - 1 inflates the radius past the diameter as well
        let edge = origin_correction_check(dm, &domain, &g, 12, 11, 0.3, 20_000, 43, 32).unwrap();
        assert!(edge.pass);
    }

    #[test]
    fn apriori_terms_arithmetic() {
        // d = 3, c = 1, kappa = 25, n = 10: exponent (12.5 - 12) * 1000 * ln 10
        let terms = apriori_bound_terms(3, 10, 1.0, 25.0, 1.0);
        let expect = -(0.5) * 1000.0 * 10f64.ln();
        assert!((terms.energy_log_bound - expect).abs() < 1e-9);
        assert!((expect + 1151.29).abs() < 0.01);
        assert!(!terms.vacuous);
        assert!(terms.energy_bound < 1e-300);

        // kappa/2 = 4dc exactly: vacuous, bound = 1
        let flat = apriori_bound_terms(3, 10, 1.0, 24.0, 1.0);
        assert!(flat.vacuous);
        assert!((flat.energy_bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn apriori_mc_validation_is_extremely_slack() {
        // free walks at N = 6^5: the joint event {E(f_N) >= kappa n^d ln n,
        // |R_N| <= c n^d} never occurs, and the bound is astronomically small
        use rand::Rng;
        let dm = dim(3);
        let n = 6u32;
        let n_steps = (n as u64).pow(5);
        let c = 1.0;
        let kappa = 25.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0u64;
        let trials = 2_000u64;
        for _ in 0..trials {
            let steps: Vec<u8> = (0..n_steps).map(|_| rng.gen_range(0..6)).collect();
            let walk = WalkPath::build(dm, &[0, 0, 0], steps).unwrap();
            let nd = (n as f64).powi(3);
            if (walk.range_size() as f64) <= c * nd {
                let energy = walk.local_time_sqrt().dirichlet_energy(None);
                if energy >= kappa * nd * (n as f64).ln() {
                    hits += 1;
                }
            }
        }
        let (p, se) = binomial_mean_se(hits, trials);
        let terms = apriori_bound_terms(3, n, c, kappa, 1.0);
        assert!(p <= terms.energy_bound + 3.0 * se + 1e-12);
        assert_eq!(hits, 0);
    }
}
