use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::lattice::{Dim, Site, SiteSet};

const NO_NEIGHBOR: u32 = u32::MAX;

/// Principal Dirichlet eigenpair of the discrete Laplacian -Delta_1 on a
/// finite connected domain, with the exterior absorbing.
///
/// -Delta_1 u (y) = u(y) - (1/2d) sum of u over neighbours; the eigenvalue
/// lies in (0, 1] and the eigenvector is strictly positive.
#[derive(Clone, Debug)]
pub struct DiscreteEigenpair {
    pub dim: Dim,
    /// Domain sites in sorted order, aligned with `vector`.
    pub domain: Vec<Site>,
    pub lambda1: f64,
    /// l2-normalised positive eigenvector.
    pub vector: Vec<f64>,
    /// Final residual |(-Delta_1) v - lambda_1 v|_2.
    pub residual: f64,
    pub iterations: usize,
}

impl DiscreteEigenpair {
    pub fn index_of(&self, site: Site) -> Option<usize> {
        self.domain.binary_search(&site).ok()
    }

    pub fn value_at(&self, site: Site) -> Option<f64> {
        self.index_of(site).map(|i| self.vector[i])
    }
}

/// Neighbour-index table for a sorted site list: entry [i][c] is the index of
/// site i's neighbour in direction c, or NO_NEIGHBOR if outside the domain.
fn neighbor_table(dim: Dim, sites: &[Site]) -> Vec<u32> {
    let index: FxHashMap<Site, u32> = sites
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i as u32))
        .collect();
    let dirs = dim.dirs();
    let mut table = vec![NO_NEIGHBOR; sites.len() * dirs];
    for (i, &s) in sites.iter().enumerate() {
        for code in 0..dirs as u8 {
            let nbr = s.offset(dim.step_delta(code));
            if let Some(&j) = index.get(&nbr) {
                table[i * dirs + code as usize] = j;
            }
        }
    }
    table
}

/// Applies the substochastic neighbour-averaging operator P to `v`.
fn apply_p(dim: Dim, table: &[u32], v: &[f64], out: &mut [f64]) {
    let dirs = dim.dirs();
    let inv = 1.0 / dirs as f64;
    for i in 0..v.len() {
        let mut acc = 0.0;
        for c in 0..dirs {
            let j = table[i * dirs + c];
            if j != NO_NEIGHBOR {
                acc += v[j as usize];
            }
        }
        out[i] = acc * inv;
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Computes the principal Dirichlet eigenpair on `domain` by shifted power
/// iteration on I + P, starting from the all-ones vector.
///
/// The shift suppresses the bipartite mirror eigenvalue of the lattice;
/// iteration stops once the Rayleigh quotient stagnates below 1e-10 and the
/// residual is below 1e-9. Disconnected domains are rejected because the
/// eigenvector positivity would fail.
pub fn discrete_principal_eigenpair(dim: Dim, domain: &SiteSet) -> Result<DiscreteEigenpair> {
    if domain.is_empty() {
        return Err(Error::invalid("eigenproblem on an empty domain"));
    }
    if !domain.is_connected() {
        return Err(Error::invalid(
            "domain is disconnected; the principal eigenvector need not be positive",
        ));
    }
    let sites = domain.sorted();
    let table = neighbor_table(dim, &sites);
    let m = sites.len();
    let mut v = vec![1.0 / (m as f64).sqrt(); m];
    let mut pv = vec![0.0; m];
    let mut mu_prev = f64::INFINITY;
    let mut iterations = 0;
    let max_iters = 400_000;
    loop {
        apply_p(dim, &table, &v, &mut pv);
        // Rayleigh quotient mu = v.Pv for the unit vector v
        let mu: f64 = v.iter().zip(&pv).map(|(a, b)| a * b).sum();
        // residual of the eigen equation for P
        let res: f64 = v
            .iter()
            .zip(&pv)
            .map(|(a, b)| (b - mu * a) * (b - mu * a))
            .sum::<f64>()
            .sqrt();
        if (res <= 1e-9 && (mu - mu_prev).abs() <= 1e-10) || iterations >= max_iters {
            if iterations >= max_iters && res > 1e-8 {
                return Err(Error::numerical(format!(
                    "power iteration failed to converge in {max_iters} iterations (residual {res:.3e})"
                )));
            }
            let lambda1 = 1.0 - mu;
            if !v.iter().all(|&x| x > 0.0) {
                return Err(Error::numerical(
                    "principal eigenvector is not strictly positive",
                ));
            }
            return Ok(DiscreteEigenpair {
                dim,
                domain: sites,
                lambda1,
                vector: v,
                residual: res,
                iterations,
            });
        }
        mu_prev = mu;
        // shifted update v <- normalise(v + Pv)
        for i in 0..m {
            pv[i] += v[i];
        }
        let nrm = norm2(&pv);
        for i in 0..m {
            v[i] = pv[i] / nrm;
        }
        iterations += 1;
    }
}

/// Tightens a principal eigenpair until the pointwise relative residual
/// max_x |(P v)(x) - mu v(x)| / (mu v(x)) drops below `tol`; needed where
/// the eigenrelation must hold relative to small boundary values (the
/// h-transform's row sums).
pub fn refine_eigenpair_pointwise(
    dim: Dim,
    pair: &DiscreteEigenpair,
    tol: f64,
) -> Result<DiscreteEigenpair> {
    let sites = pair.domain.clone();
    let table = neighbor_table(dim, &sites);
    let m = sites.len();
    let mut v = pair.vector.clone();
    let mut pv = vec![0.0; m];
    for iteration in 0..2_000_000usize {
        apply_p(dim, &table, &v, &mut pv);
        let mu: f64 = v.iter().zip(&pv).map(|(a, b)| a * b).sum();
        let worst = v
            .iter()
            .zip(&pv)
            .map(|(a, b)| ((b - mu * a) / (mu * a)).abs())
            .fold(0.0f64, f64::max);
        if worst <= tol {
            let res: f64 = v
                .iter()
                .zip(&pv)
                .map(|(a, b)| (b - mu * a) * (b - mu * a))
                .sum::<f64>()
                .sqrt();
            return Ok(DiscreteEigenpair {
                dim,
                domain: sites,
                lambda1: 1.0 - mu,
                vector: v,
                residual: res,
                iterations: pair.iterations + iteration,
            });
        }
        for i in 0..m {
            pv[i] += v[i];
        }
        let nrm = norm2(&pv);
        for i in 0..m {
            v[i] = pv[i] / nrm;
        }
    }
    Err(Error::numerical(
        "pointwise eigenpair refinement failed to converge",
    ))
}

/// Second Dirichlet eigenvalue on the domain, by power iteration on I + P
/// deflated against the principal eigenvector.
pub fn second_dirichlet_eigenvalue(dim: Dim, pair: &DiscreteEigenpair) -> Result<f64> {
    let sites = &pair.domain;
    let m = sites.len();
    if m < 2 {
        return Err(Error::invalid(
            "second eigenvalue needs a domain with at least two sites",
        ));
    }
    let table = neighbor_table(dim, sites);
    // deterministic start with generic overlap against every symmetry sector
    let mut v: Vec<f64> = (0..m).map(|i| ((i + 1) as f64).sin()).collect();
    let deflate = |v: &mut Vec<f64>| {
        let dot: f64 = v.iter().zip(&pair.vector).map(|(a, b)| a * b).sum();
        for (x, &p) in v.iter_mut().zip(&pair.vector) {
            *x -= dot * p;
        }
    };
    deflate(&mut v);
    let nrm = norm2(&v);
    if nrm == 0.0 {
        return Err(Error::numerical("deflated start vector vanished"));
    }
    for x in v.iter_mut() {
        *x /= nrm;
    }
    let mut pv = vec![0.0; m];
    let mut mu_prev = f64::INFINITY;
    for _ in 0..400_000 {
        apply_p(dim, &table, &v, &mut pv);
        let mu: f64 = v.iter().zip(&pv).map(|(a, b)| a * b).sum();
        if (mu - mu_prev).abs() <= 1e-11 {
            return Ok(1.0 - mu);
        }
        mu_prev = mu;
        for i in 0..m {
            pv[i] += v[i];
        }
        deflate(&mut pv);
        let nrm = norm2(&pv);
        if nrm == 0.0 {
            return Err(Error::numerical("deflation collapsed the iterate"));
        }
        for i in 0..m {
            v[i] = pv[i] / nrm;
        }
    }
    Err(Error::numerical("second-eigenvalue iteration stalled"))
}

/// Lattice sites within Euclidean distance `radius` of `center`.
pub fn lattice_ball(dim: Dim, center: &[i32], radius: f64) -> Result<SiteSet> {
    if center.len() != dim.get() {
        return Err(Error::invalid("center has the wrong dimension"));
    }
    let r = radius;
    if !(r >= 0.0) {
        return Err(Error::invalid("radius must be nonnegative"));
    }
    let ri = r.floor() as i32;
    let d = dim.get();
    let mut out = SiteSet::new(dim);
    let mut offs = vec![-ri; d];
    loop {
        let dist2: f64 = offs.iter().map(|&o| (o as f64) * (o as f64)).sum();
        if dist2 <= r * r {
            let coords: Vec<i32> = (0..d).map(|a| center[a] + offs[a]).collect();
            out.insert(dim.pack(&coords)?);
        }
        let mut axis = 0;
        loop {
            if axis == d {
                return Ok(out);
            }
            offs[axis] += 1;
            if offs[axis] <= ri {
                break;
            }
            offs[axis] = -ri;
            axis += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::continuum_constants;

    fn dim3() -> Dim {
        Dim::new(3).unwrap()
    }

    #[test]
    fn singleton_domain_has_lambda_one() {
        let dim = dim3();
        let dom = SiteSet::from_coords(dim, [[0, 0, 0]]).unwrap();
        let pair = discrete_principal_eigenpair(dim, &dom).unwrap();
        assert!((pair.lambda1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_site_domain_d3() {
        // P has eigenvalues +-1/6, so lambda_1 = 5/6
        let dim = dim3();
        let dom = SiteSet::from_coords(dim, [[0, 0, 0], [1, 0, 0]]).unwrap();
        let pair = discrete_principal_eigenpair(dim, &dom).unwrap();
        assert!((pair.lambda1 - 5.0 / 6.0).abs() < 1e-9, "{}", pair.lambda1);
        assert!(pair.vector.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn residual_contract_holds() {
        let dim = dim3();
        let dom = lattice_ball(dim, &[0, 0, 0], 6.0).unwrap();
        let pair = discrete_principal_eigenpair(dim, &dom).unwrap();
        // recompute the residual of -Delta_1 against the returned pair
        let sites = &pair.domain;
        let table = neighbor_table(dim, sites);
        let mut pv = vec![0.0; sites.len()];
        apply_p(dim, &table, &pair.vector, &mut pv);
        let res: f64 = pair
            .vector
            .iter()
            .zip(&pv)
            .map(|(v, p)| {
                let lhs = v - p; // (-Delta_1) v
                let rhs = pair.lambda1 * v;
                (lhs - rhs) * (lhs - rhs)
            })
            .sum::<f64>()
            .sqrt();
        assert!(res <= 1e-8, "residual {res}");
        assert!(pair.lambda1 > 0.0 && pair.lambda1 <= 1.0);
    }

    #[test]
    fn rejects_disconnected_and_empty_domains() {
        let dim = dim3();
        let dom = SiteSet::from_coords(dim, [[0, 0, 0], [3, 3, 3]]).unwrap();
        assert!(discrete_principal_eigenpair(dim, &dom).is_err());
        let empty = SiteSet::new(dim);
        assert!(discrete_principal_eigenpair(dim, &empty).is_err());
    }

    #[test]
    fn ball_eigenvalue_approaches_continuum_scaling() {
        // lambda_1(discrete) ~ lambda_d / (2 d R^2) for lattice balls
        let dim = dim3();
        let spec = continuum_constants(3).unwrap();
        let r = 20.0;
        let dom = lattice_ball(dim, &[0, 0, 0], r).unwrap();
        let pair = discrete_principal_eigenpair(dim, &dom).unwrap();
        let ratio = 6.0 * r * r * pair.lambda1 / spec.lambda;
        assert!((0.90..=1.10).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn ball_eigenvector_symmetric_under_axis_permutation() {
        let dim = dim3();
        let dom = lattice_ball(dim, &[0, 0, 0], 5.0).unwrap();
        let pair = discrete_principal_eigenpair(dim, &dom).unwrap();
        for (i, &s) in pair.domain.iter().enumerate() {
            let c = dim.unpack(s);
            let perm = dim.pack(&[c[1], c[2], c[0]]).unwrap();
            let j = pair.index_of(perm).unwrap();
            let (a, b) = (pair.vector[i], pair.vector[j]);
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()));
        }
    }

    #[test]
    fn second_eigenvalue_on_a_ball_matches_bessel_ratio() {
        // lambda_2 / lambda_1 -> (j_{d/2,1} / j_{d/2-1,1})^2 for balls
        let dim = dim3();
        let dom = lattice_ball(dim, &[0, 0, 0], 12.0).unwrap();
        let pair = discrete_principal_eigenpair(dim, &dom).unwrap();
        let l2 = second_dirichlet_eigenvalue(dim, &pair).unwrap();
        let j0 = crate::spectral::bessel_first_zero(0.5).unwrap();
        let j1 = crate::spectral::bessel_first_zero(1.5).unwrap();
        let expect = (j1 / j0).powi(2);
        let got = l2 / pair.lambda1;
        assert!(
            (got - expect).abs() < 0.10 * expect,
            "ratio {got} vs {expect}"
        );
    }
}
