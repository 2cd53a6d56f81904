//! The coarse-graining pipeline: high-density blocks, enlarged domains,
//! local averaging, eta-discretisation, the Gamma-budget bookkeeping, the
//! block cutoff with its truncation inequality, and the upper-bound
//! functional evaluator.

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::lattice::{block_index, block_sites, Dim, Site, SiteField, SiteSet};

/// Block indices whose side-n block carries high 2*-density:
/// sum over the block of f^{2*} >= delta^{2*} n^{d+2*}. Requires d >= 3.
pub fn high_density_blocks(f: &SiteField, n: u32, delta: f64) -> Result<SiteSet> {
    let dim = f.dim();
    let two_star = dim.two_star()?;
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let threshold = delta.powf(two_star) * (n as f64).powf(dim.get() as f64 + two_star);
    let mut mass: FxHashMap<Site, f64> = FxHashMap::default();
    for (site, v) in f.iter() {
        *mass.entry(block_index(dim, site, n)).or_insert(0.0) += v.powf(two_star);
    }
    let mut out = SiteSet::new(dim);
    for (block, m) in mass {
        if m >= threshold {
            out.insert(block);
        }
    }
    Ok(out)
}

/// The block sets of the coarse-graining: X, its sup-norm-1 enlargement
/// X-hat, the enlarged site domain D (blocks over X-hat) and the core E
/// (blocks over X).
#[derive(Clone, Debug)]
pub struct BlockDecomposition {
    pub dim: Dim,
    pub n: u32,
    pub x: SiteSet,
    pub x_hat: SiteSet,
    /// Union of the side-n blocks indexed by X-hat.
    pub domain: SiteSet,
    /// Union of the side-n blocks indexed by X.
    pub core: SiteSet,
}

impl BlockDecomposition {
    /// |Y(X-hat)|: the number of side-m sub-blocks of D, exact when m | n.
    pub fn sub_block_count(&self, m: u32) -> Result<usize> {
        if m == 0 || self.n % m != 0 {
            return Err(Error::invalid("sub-block side must divide n"));
        }
        let ratio = (self.n / m) as usize;
        Ok(self.x_hat.len() * ratio.pow(self.dim.get() as u32))
    }
}

/// Builds the decomposition from a set of block indices.
pub fn enlarge_and_domains(x: &SiteSet, n: u32) -> BlockDecomposition {
    let dim = x.dim();
    let d = dim.get();
    let mut x_hat = SiteSet::new(dim);
    for idx in x.iter() {
        let mut offs = vec![-1i32; d];
        loop {
            let mut coords = dim.unpack(idx);
            for a in 0..d {
                coords[a] += offs[a];
            }
            x_hat.insert(dim.pack_unchecked(&coords));
            let mut axis = 0;
            loop {
                if axis == d {
                    break;
                }
                offs[axis] += 1;
                if offs[axis] <= 1 {
                    break;
                }
                offs[axis] = -1;
                axis += 1;
            }
            if offs.iter().all(|&o| o == -1) {
                break;
            }
        }
    }
    let mut domain = SiteSet::new(dim);
    for idx in x_hat.iter() {
        for s in block_sites(dim, idx, n) {
            domain.insert(s);
        }
    }
    let mut core = SiteSet::new(dim);
    for idx in x.iter() {
        for s in block_sites(dim, idx, n) {
            core.insert(s);
        }
    }
    BlockDecomposition {
        dim,
        n,
        x: x.clone(),
        x_hat,
        domain,
        core,
    }
}

/// Local average of f over side-m blocks: constant on each block, equal to
/// the block mean; defined (and nonzero) only on blocks meeting the support.
pub fn local_average(f: &SiteField, m: u32) -> Result<SiteField> {
    if m == 0 {
        return Err(Error::invalid("averaging block side must be >= 1"));
    }
    let dim = f.dim();
    let mut sums: FxHashMap<Site, f64> = FxHashMap::default();
    for (site, v) in f.iter() {
        *sums.entry(block_index(dim, site, m)).or_insert(0.0) += v;
    }
    let block_volume = (m as f64).powi(dim.get() as i32);
    let mut out = SiteField::new(dim);
    for (block, total) in sums {
        let mean = total / block_volume;
        if mean > 0.0 {
            for s in block_sites(dim, block, m) {
                out.set(s, mean)?;
            }
        }
    }
    Ok(out)
}

/// The eta-discretised coarse profile on a domain: values eta * floor(f/eta)
/// per side-m block.
#[derive(Clone, Debug)]
pub struct CoarseProfile {
    pub dim: Dim,
    pub m: u32,
    pub eta: f64,
    /// Block-index to quantised value (only blocks meeting the domain).
    pub block_values: FxHashMap<Site, f64>,
    /// The profile as a site field restricted to the domain.
    pub field: SiteField,
}

/// Quantises a block-constant field on the given domain. The input must be
/// constant on each side-m block (as produced by [`local_average`]).
pub fn discretize(
    fbar: &SiteField,
    eta: f64,
    domain: &SiteSet,
    m: u32,
) -> Result<CoarseProfile> {
    if !(eta > 0.0) {
        return Err(Error::invalid("eta must be positive"));
    }
    let dim = fbar.dim();
    let mut block_values: FxHashMap<Site, f64> = FxHashMap::default();
    let mut field = SiteField::new(dim);
    for site in domain.sorted() {
        let b = block_index(dim, site, m);
        let v = fbar.get(site);
        // the epsilon keeps exact multiples of eta fixed under the floor
        let q = eta * (v / eta + 1e-9).floor();
        if let Some(&prev) = block_values.get(&b) {
            if (prev - q).abs() > 1e-9 * eta {
                return Err(Error::invalid(
                    "field is not constant on the averaging blocks",
                ));
            }
        } else {
            block_values.insert(b, q);
        }
        field.set(site, q)?;
    }
    Ok(CoarseProfile {
        dim,
        m,
        eta,
        block_values,
        field,
    })
}

/// The exponent quadruple (alpha, beta, gamma, rho) driving
/// delta = n^-alpha, M = n^beta, eta = n^-gamma, lambda = n^rho.
#[derive(Clone, Copy, Debug)]
pub struct Exponents {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
}

impl Exponents {
    /// The default choice alpha = d/12, beta = 3/4, gamma = d^2/(12(d-2)),
    /// rho = 15/8.
    pub fn defaults(d: usize) -> Exponents {
        let df = d as f64;
        Exponents {
            alpha: df / 12.0,
            beta: 0.75,
            gamma: df * df / (12.0 * (df - 2.0)),
            rho: 15.0 / 8.0,
        }
    }

    /// The six admissibility constraints; returns the violated ones.
    pub fn violated_constraints(&self, d: usize) -> Vec<String> {
        let two_star = 2.0 * d as f64 / (d as f64 - 2.0);
        let mut out = Vec::new();
        let checks: [(bool, &str); 6] = [
            (self.beta < 1.0, "beta < 1"),
            (
                two_star / 2.0 * self.alpha - self.gamma < self.beta,
                "(2*/2) alpha - gamma < beta",
            ),
            (two_star * self.alpha < d as f64 * self.beta, "2* alpha < d beta"),
            (1.0 + self.beta < self.rho, "1 + beta < rho"),
            (
                2.0 - 4.0 * self.alpha / (d as f64) < self.rho,
                "2 - 4 alpha / d < rho",
            ),
            (self.rho < 2.0, "rho < 2"),
        ];
        for (ok, name) in checks {
            if !ok {
                out.push(name.to_string());
            }
        }
        out
    }
}

/// Empirical constants entering the budget formulas.
#[derive(Clone, Copy, Debug)]
pub struct BudgetConstants {
    /// Poincare-Sobolev constant (empirical diagnostic, default 1.0).
    pub c_ps: f64,
    /// Poincare-Wirtinger constant (empirical diagnostic, default 0.5).
    pub c_pw: f64,
    /// The return-probability constant c' (fitted, default 1.0).
    pub c_prime: f64,
}

impl Default for BudgetConstants {
    fn default() -> Self {
        BudgetConstants {
            c_ps: 1.0,
            c_pw: 0.5,
            c_prime: 1.0,
        }
    }
}

/// The coarse-graining error allowances.
#[derive(Clone, Debug)]
pub struct GammaBudget {
    pub n: u32,
    pub d: usize,
    pub c: f64,
    pub kappa: f64,
    pub exponents: Exponents,
    pub constants: BudgetConstants,
    pub delta: f64,
    /// M rounded down to the largest divisor of n at most n^beta.
    pub m: u32,
    /// The unrounded target n^beta.
    pub m_target: f64,
    pub eta: f64,
    pub lambda: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub r_n: f64,
    /// C_0 = delta^{-2*} kappa^4 (ln n)^5 (the block-count envelope).
    pub c0: f64,
    /// The raw block-count bound delta^{-2*} c_PS^{2*} (2 d kappa ln n)^{2*/2}.
    pub cardx_bound: f64,
    /// ln of the per-block profile count (sqrt N / eta)^{(n/M)^d 3^d}.
    pub log_profiles_per_block: f64,
    pub constraints_ok: bool,
    pub violated: Vec<String>,
}

/// Largest divisor of n that is at most `bound` (at least 1).
fn largest_divisor_at_most(n: u32, bound: f64) -> u32 {
    let cap = bound.floor().max(1.0) as u32;
    let mut best = 1;
    let mut i = 1;
    while (i as u64) * (i as u64) <= n as u64 {
        if n % i == 0 {
            if i <= cap {
                best = best.max(i);
            }
            let j = n / i;
            if j <= cap {
                best = best.max(j);
            }
        }
        i += 1;
    }
    best
}

/// Evaluates the Gamma budget for the given parameters. Constraint
/// violations are flagged but the values are still returned.
pub fn gamma_budget(
    n: u32,
    d: usize,
    c: f64,
    kappa: f64,
    exponents: &Exponents,
    constants: &BudgetConstants,
) -> Result<GammaBudget> {
    if d < 3 {
        return Err(Error::invalid("the coarse budget requires d >= 3"));
    }
    if n < 2 {
        return Err(Error::invalid("n must be >= 2"));
    }
    let nf = n as f64;
    let df = d as f64;
    let two_star = 2.0 * df / (df - 2.0);
    let violated = exponents.violated_constraints(d);

    let delta = nf.powf(-exponents.alpha);
    let m_target = nf.powf(exponents.beta);
    let m = largest_divisor_at_most(n, m_target);
    let eta = nf.powf(-exponents.gamma);
    let lambda = nf.powf(exponents.rho);
    let n_steps = nf.powf(df + 2.0);
    let ln_n = nf.ln();

    // Gamma_0 = M c_PW sqrt(kappa n^d ln n)
    //         + eta sqrt(3^d delta^{-2*} c_PS^{2*} (2 d kappa ln n)^{2*/2} n^d)
    let term1 = m as f64 * constants.c_pw * (kappa * nf.powf(df) * ln_n).sqrt();
    let term2 = eta
        * (3f64.powf(df)
            * delta.powf(-two_star)
            * constants.c_ps.powf(two_star)
            * (2.0 * df * kappa * ln_n).powf(two_star / 2.0)
            * nf.powf(df))
        .sqrt();
    let gamma0 = term1 + term2;
    let gamma1 = gamma0 * (2.0 * n_steps.sqrt() + gamma0);
    // Gamma_2 = c delta^{4/d} n^{d+2} (c_d kappa ln n)^{2/2*}, c_d = 2 c_PS^2
    let c_d = 2.0 * constants.c_ps * constants.c_ps;
    let gamma2 = c * delta.powf(4.0 / df) * nf.powf(df + 2.0) * (c_d * kappa * ln_n).powf(2.0 / two_star);
    let r_n = 14.0 * gamma1 / n_steps + 8.0 * gamma2 / n_steps;
    let gamma3 = gamma2 / n_steps + 2.0 * gamma1 / n_steps + r_n;
    let gamma4 = gamma3 + 4.0 * (2.0 * c * lambda / (nf * nf)).sqrt();

    let c0 = delta.powf(-two_star) * kappa.powi(4) * ln_n.powi(5);
    let cardx_bound =
        delta.powf(-two_star) * constants.c_ps.powf(two_star) * (2.0 * df * kappa * ln_n).powf(two_star / 2.0);
    let log_profiles_per_block =
        (nf.powf(df) / (m as f64).powf(df)) * 3f64.powf(df) * (n_steps.sqrt() / eta).ln();

    Ok(GammaBudget {
        n,
        d,
        c,
        kappa,
        exponents: *exponents,
        constants: *constants,
        delta,
        m,
        m_target,
        eta,
        lambda,
        gamma0,
        gamma1,
        gamma2,
        gamma3,
        gamma4,
        r_n,
        c0,
        cardx_bound,
        log_profiles_per_block,
        constraints_ok: violated.is_empty(),
        violated,
    })
}

impl GammaBudget {
    /// Whether the budget satisfies the asymptotic ordering
    /// Gamma_0 < sqrt(N), Gamma_1 < 3 Gamma_0 sqrt(N),
    /// n^{d+1} < Gamma_1 < n^{d+2}, Gamma_2 < N/2.
    pub fn satisfies_ordering(&self) -> bool {
        let nf = self.n as f64;
        let n_steps = nf.powf(self.d as f64 + 2.0);
        let sqrt_n = n_steps.sqrt();
        self.gamma0 < sqrt_n
            && self.gamma1 < 3.0 * self.gamma0 * sqrt_n
            && nf.powf(self.d as f64 + 1.0) < self.gamma1
            && self.gamma1 < n_steps
            && self.gamma2 < n_steps / 2.0
    }
}

/// Smallest n (scanned over multiples of 12 so the divisor rounding stays
/// benign) from which the ordering holds up to `n_max`; the scan confirms
/// the ordering keeps holding on a doubling ladder above the hit.
pub fn smallest_ordering_n(
    d: usize,
    c: f64,
    kappa: f64,
    exponents: &Exponents,
    constants: &BudgetConstants,
    n_max: u32,
) -> Option<u32> {
    let mut n = 12u32;
    while n <= n_max {
        if let Ok(budget) = gamma_budget(n, d, c, kappa, exponents, constants) {
            if budget.satisfies_ordering() {
                // confirm on a doubling ladder
                let mut ok = true;
                let mut probe = n;
                while probe <= n_max / 2 {
                    probe *= 2;
                    match gamma_budget(probe, d, c, kappa, exponents, constants) {
                        Ok(b) if b.satisfies_ordering() => {}
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    return Some(n);
                }
            }
        }
        n += 12;
    }
    None
}

/// The block cutoff: phi_X(y) = max over x in X of the ramp
/// clamp(4 (7/8 - |y/n - x|_inf)) which is 1 on the core blocks and
/// supported inside the enlarged domain.
pub fn cutoff_function(x: &SiteSet, n: u32) -> Result<SiteField> {
    if x.is_empty() {
        return Err(Error::invalid("the block set X must be nonempty"));
    }
    let dim = x.dim();
    let d = dim.get();
    let decomp = enlarge_and_domains(x, n);
    let mut out = SiteField::new(dim);
    let mut coords = vec![0i32; d];
    for site in decomp.domain.sorted() {
        dim.unpack_into(site, &mut coords);
        let mut best = 0.0f64;
        // only blocks adjacent to the site's own block can contribute
        let my_block = block_index(dim, site, n);
        let mut offs = vec![-1i32; d];
        loop {
            let mut bidx = dim.unpack(my_block);
            for a in 0..d {
                bidx[a] += offs[a];
            }
            let candidate = dim.pack_unchecked(&bidx);
            if x.contains(candidate) {
                let mut sup = 0.0f64;
                for a in 0..d {
                    let u = coords[a] as f64 / n as f64 - bidx[a] as f64;
                    sup = sup.max(u.abs());
                }
                let ramp = (4.0 * (7.0 / 8.0 - sup)).clamp(0.0, 1.0);
                best = best.max(ramp);
            }
            let mut axis = 0;
            loop {
                if axis == d {
                    break;
                }
                offs[axis] += 1;
                if offs[axis] <= 1 {
                    break;
                }
                offs[axis] = -1;
                axis += 1;
            }
            if offs.iter().all(|&o| o == -1) {
                break;
            }
        }
        if best > 0.0 {
            out.set(site, best)?;
        }
    }
    Ok(out)
}

/// Both sides of the truncation inequality
/// E(f, D) >= (max(sqrt(E(phi_X f)) - (4/n) |f|_{2, D\E}, 0))^2.
#[derive(Clone, Copy, Debug)]
pub struct TruncationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

pub fn truncated_energy_check(f: &SiteField, decomp: &BlockDecomposition) -> Result<TruncationCheck> {
    let dim = f.dim();
    let cutoff = cutoff_function(&decomp.x, decomp.n)?;
    let mut truncated = SiteField::new(dim);
    for (site, v) in f.iter() {
        let w = cutoff.get(site) * v;
        if w > 0.0 {
            truncated.set(site, w)?;
        }
    }
    let lhs = f.dirichlet_energy(Some(&decomp.domain));
    let mut shell_sq = 0.0;
    for (site, v) in f.iter() {
        if decomp.domain.contains(site) && !decomp.core.contains(site) {
            shell_sq += v * v;
        }
    }
    let correction = 4.0 / decomp.n as f64 * shell_sq.sqrt();
    let rhs = (truncated.dirichlet_energy(None).sqrt() - correction).max(0.0).powi(2);
    Ok(TruncationCheck {
        lhs,
        rhs,
        pass: lhs >= rhs - 1e-12,
    })
}

/// The upper-bound functional
/// |{h > 0}| + (N/2)(1 - n^{-1/4}) (max(sqrt(E(sqrt h)) - n^{-9/8}, 0))^2.
pub fn upper_bound_functional(h: &SiteField, n_steps: u64, n: u32) -> f64 {
    let support = h.support_size() as f64;
    let energy = h.sqrt().dirichlet_energy(None);
    let nf = n as f64;
    let clipped = (energy.sqrt() - nf.powf(-9.0 / 8.0)).max(0.0);
    support + n_steps as f64 / 2.0 * (1.0 - nf.powf(-0.25)) * clipped * clipped
}
