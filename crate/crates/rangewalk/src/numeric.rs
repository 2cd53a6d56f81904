//! Shared numerical utilities: special functions, 1-D minimisation, simplex
//! search, quadrature, and projections used by the optimisers.

use crate::error::{Error, Result};

/// Natural log of the Gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Table of ln(k!) for k = 0..=n.
pub fn ln_factorials(n: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(n + 1);
    table.push(0.0);
    for k in 1..=n {
        table.push(table[k - 1] + (k as f64).ln());
    }
    table
}

/// Golden-section minimisation of a unimodal function on [a, b].
pub fn golden_section_min(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a, b);
    while (b - a).abs() > tol {
        let c = b - inv_phi * (b - a);
        let d = a + inv_phi * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Downhill-simplex (Nelder-Mead) minimisation in low dimension.
///
/// Deterministic: the initial simplex is `x0` plus `step` along each axis.
pub fn nelder_mead(
    f: impl Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    iters: usize,
) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    pts.push(x0.to_vec());
    for a in 0..d {
        let mut p = x0.to_vec();
        p[a] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();

    for _ in 0..iters {
        // order the simplex
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap());
        let best = order[0];
        let worst = order[d];
        let second_worst = order[d - 1];

        let mut centroid = vec![0.0; d];
        for &i in order.iter().take(d) {
            for a in 0..d {
                centroid[a] += pts[i][a];
            }
        }
        for c in centroid.iter_mut() {
            *c /= d as f64;
        }

        let reflect: Vec<f64> = (0..d)
            .map(|a| centroid[a] + (centroid[a] - pts[worst][a]))
            .collect();
        let fr = f(&reflect);
        if fr < vals[best] {
            let expand: Vec<f64> = (0..d)
                .map(|a| centroid[a] + 2.0 * (centroid[a] - pts[worst][a]))
                .collect();
            let fe = f(&expand);
            if fe < fr {
                pts[worst] = expand;
                vals[worst] = fe;
            } else {
                pts[worst] = reflect;
                vals[worst] = fr;
            }
        } else if fr < vals[second_worst] {
            pts[worst] = reflect;
            vals[worst] = fr;
        } else {
            let contract: Vec<f64> = (0..d)
                .map(|a| centroid[a] + 0.5 * (pts[worst][a] - centroid[a]))
                .collect();
            let fc = f(&contract);
            if fc < vals[worst] {
                pts[worst] = contract;
                vals[worst] = fc;
            } else {
                // shrink toward the best vertex
                let anchor = pts[best].clone();
                for i in 0..=d {
                    if i == best {
                        continue;
                    }
                    for a in 0..d {
                        pts[i][a] = anchor[a] + 0.5 * (pts[i][a] - anchor[a]);
                    }
                    vals[i] = f(&pts[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=d {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    (pts[best].clone(), vals[best])
}

/// Composite Simpson integration of uniformly sampled values with spacing h.
///
/// Accepts any sample count >= 2; a trapezoid step absorbs an odd interval.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    assert!(n >= 2, "simpson needs at least two samples");
    let mut acc = 0.0;
    let mut i = 0;
    // handle an odd number of intervals with one trapezoid at the start
    if (n - 1) % 2 == 1 {
        acc += 0.5 * h * (values[0] + values[1]);
        i = 1;
    }
    while i + 2 < n + 1 {
        if i + 2 >= n {
            break;
        }
        acc += h / 3.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
        i += 2;
    }
    acc
}

/// Euclidean projection onto the probability simplex {x >= 0, sum x = 1}.
pub fn project_simplex(x: &mut [f64]) {
    let n = x.len();
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut tau = 0.0;
    let mut k = 0;
    for (i, &v) in sorted.iter().enumerate() {
        acc += v;
        let candidate = (acc - 1.0) / (i + 1) as f64;
        if v - candidate > 0.0 {
            tau = candidate;
            k = i + 1;
        }
    }
    debug_assert!(k > 0);
    for v in x.iter_mut().take(n) {
        *v = (*v - tau).max(0.0);
    }
}

/// Euclidean projection onto the L1 ball of radius `r` centred at `center`.
pub fn project_l1_ball(x: &mut [f64], center: &[f64], r: f64) {
    let n = x.len();
    if r <= 0.0 {
        x.copy_from_slice(center);
        return;
    }
    let mut diff: Vec<f64> = (0..n).map(|i| x[i] - center[i]).collect();
    let norm: f64 = diff.iter().map(|v| v.abs()).sum();
    if norm <= r {
        return;
    }
    // soft-threshold the absolute differences
    let mut mags: Vec<f64> = diff.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &m) in mags.iter().enumerate() {
        acc += m;
        let candidate = (acc - r) / (i + 1) as f64;
        if m > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    for i in 0..n {
        let mag = (diff[i].abs() - theta).max(0.0);
        diff[i] = mag * diff[i].signum();
        x[i] = center[i] + diff[i];
    }
}

/// SplitMix64 step, used to derive per-worker seeds from a global seed.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for worker/replica `index` derived from the global seed.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    splitmix64(global ^ splitmix64(index.wrapping_add(1)))
}

/// Least-squares slope of y against x.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("slope fit needs >= 2 paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return Err(Error::invalid("slope fit: x values are all equal"));
    }
    Ok(num / den)
}

/// Mean and standard error of a sample.
pub fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and standard error of a Bernoulli sample given the success count.
pub fn binomial_mean_se(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 0.0);
    }
    let p = successes as f64 / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    (p, se)
}
