//! Sampling the range-penalised walk measure and estimating its partition
//! function: exact enumeration, Metropolis over step sequences, annealed
//! importance sampling, and the eigenfunction-tilted kernel with its
//! telescoping importance weights.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::lattice::{AxisSymmetry, Dim, Site, SiteSet, WalkPath};
use crate::numeric::{derive_seed, mean_se};
use crate::spectral::DiscreteEigenpair;

/// Per-move proposal probabilities; they must sum to one.
#[derive(Clone, Copy, Debug)]
pub struct MoveMix {
    pub single: f64,
    pub block: f64,
    pub pivot: f64,
}

impl Default for MoveMix {
    fn default() -> Self {
        MoveMix {
            single: 0.5,
            block: 0.3,
            pivot: 0.2,
        }
    }
}

impl MoveMix {
    fn validate(&self) -> Result<()> {
        let sum = self.single + self.block + self.pivot;
        if (sum - 1.0).abs() > 1e-12 || self.single < 0.0 || self.block < 0.0 || self.pivot < 0.0 {
            return Err(Error::invalid("move probabilities must be >= 0 and sum to 1"));
        }
        Ok(())
    }
}

/// Starting trajectory for a chain.
#[derive(Clone, Copy, Debug)]
pub enum StartPath {
    /// Repeats one direction code (a stretched start, range N+1).
    Straight(u8),
    /// A boustrophedon fill of a box matched to the equilibrium blob
    /// volume omega_d rho_d^d n^d, with the leftover steps oscillating in
    /// place; the chain then only has to redistribute mass locally.
    Compact,
}

/// Configuration of a Metropolis chain targeting exp(-beta |R_N|).
#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub dim: Dim,
    pub n_steps: u64,
    pub beta: f64,
    pub move_mix: MoveMix,
    pub seed: u64,
    /// Recorded samples are separated by this many proposals.
    pub thinning: u64,
    /// Proposals discarded before recording starts.
    pub burn_in: u64,
    pub start: StartPath,
}

impl ChainConfig {
    pub fn new(dim: Dim, n_steps: u64, beta: f64, seed: u64) -> Result<ChainConfig> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid("beta must lie in [0, 1]"));
        }
        let thinning = (n_steps / 8).max(64);
        Ok(ChainConfig {
            dim,
            n_steps,
            beta,
            move_mix: MoveMix::default(),
            seed,
            thinning,
            // the collapsed start reaches the blob equilibrium from below
            // within a few hundred thinning units; keep a wide margin
            burn_in: 1500 * thinning,
            start: StartPath::Compact,
        })
    }
}

/// Builds a snake filling a box whose volume matches the equilibrium blob,
/// then oscillates in place for the remaining steps.
fn compact_steps(dim: Dim, n_steps: u64) -> Vec<u8> {
    let d = dim.get();
    // side of the box with volume omega_d rho_d^d n^d, n = N^{1/(d+2)}
    let side = match crate::spectral::continuum_constants(d) {
        Ok(spec) => {
            let n_scale = (n_steps as f64).powf(1.0 / (d as f64 + 2.0));
            ((spec.omega * spec.rho.powf(d as f64)).powf(1.0 / d as f64) * n_scale)
                .round()
                .max(1.0) as u64
        }
        Err(_) => 1,
    };
    let mut steps = Vec::with_capacity(n_steps as usize);
    let mut counts = vec![0u64; d];
    let mut dirs = vec![0u8; d];
    'fill: while (steps.len() as u64) < n_steps {
        if counts[0] + 1 < side {
            steps.push(dirs[0]);
            counts[0] += 1;
            continue;
        }
        let mut axis = 1;
        while axis < d && counts[axis] + 1 >= side {
            axis += 1;
        }
        if axis == d {
            break 'fill; // box exhausted
        }
        steps.push((axis as u8) << 1 | dirs[axis]);
        counts[axis] += 1;
        dirs[0] ^= 1;
        counts[0] = 0;
        for lower in 1..axis {
            dirs[lower] ^= 1;
            counts[lower] = 0;
        }
    }
    // oscillate in place for the remainder
    let back = steps.last().map(|&c| c ^ 1).unwrap_or(1);
    let fwd = back ^ 1;
    while (steps.len() as u64) < n_steps {
        steps.push(back);
        if (steps.len() as u64) < n_steps {
            steps.push(fwd);
        }
    }
    steps
}

/// A Metropolis chain over step sequences with the uniform base measure,
/// targeting exp(-beta |R_N|) / Z.
pub struct RangeChain {
    cfg: ChainConfig,
    walk: WalkPath,
    rng: ChaCha8Rng,
    symmetries: Vec<AxisSymmetry>,
    max_window: u64,
    scratch: Vec<u8>,
    proposed: u64,
    accepted: u64,
}

impl RangeChain {
    pub fn new(cfg: ChainConfig) -> Result<RangeChain> {
        cfg.move_mix.validate()?;
        if cfg.n_steps == 0 {
            return Err(Error::invalid("the chain needs at least one step"));
        }
        let steps = match cfg.start {
            StartPath::Straight(code) => {
                if code >= cfg.dim.dirs() as u8 {
                    return Err(Error::invalid("bad start direction code"));
                }
                vec![code; cfg.n_steps as usize]
            }
            StartPath::Compact => compact_steps(cfg.dim, cfg.n_steps),
        };
        let walk = WalkPath::build(cfg.dim, &vec![0; cfg.dim.get()], steps)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let symmetries = AxisSymmetry::generators(cfg.dim);
        let max_window = (cfg.n_steps as f64).sqrt().floor().max(1.0) as u64;
        Ok(RangeChain {
            cfg,
            walk,
            rng,
            symmetries,
            max_window,
            scratch: Vec::new(),
            proposed: 0,
            accepted: 0,
        })
    }

    #[inline]
    pub fn walk(&self) -> &WalkPath {
        &self.walk
    }

    pub fn config(&self) -> &ChainConfig {
        &self.cfg
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// One Metropolis proposal: the three move types are symmetric over the
    /// uniform base measure, so the acceptance ratio is exp(-beta d|R|).
    pub fn step(&mut self) {
        let n = self.cfg.n_steps as usize;
        let dirs = self.cfg.dim.dirs() as u8;
        let before = self.walk.range_size() as i64;
        self.proposed += 1;

        let pick: f64 = self.rng.gen();
        if pick < self.cfg.move_mix.single {
            let index = self.rng.gen_range(0..n);
            let code = self.rng.gen_range(0..dirs);
            let old = self.walk.redraw_step(index, code);
            if !self.accept(before) {
                self.walk.redraw_step(index, old);
            }
        } else if pick < self.cfg.move_mix.single + self.cfg.move_mix.block {
            let w = self.rng.gen_range(1..=self.max_window.min(n as u64)) as usize;
            let index = self.rng.gen_range(0..=(n - w));
            let mut new_codes = std::mem::take(&mut self.scratch);
            new_codes.clear();
            for _ in 0..w {
                new_codes.push(self.rng.gen_range(0..dirs));
            }
            let mut old_codes = Vec::with_capacity(w);
            self.walk.redraw_block(index, &new_codes, &mut old_codes);
            if !self.accept(before) {
                let mut undo = Vec::new();
                self.walk.redraw_block(index, &old_codes, &mut undo);
            }
            self.scratch = new_codes;
        } else {
            let index = self.rng.gen_range(0..n);
            let sym = self.symmetries[self.rng.gen_range(0..self.symmetries.len())];
            self.walk.apply_suffix_symmetry(index, sym);
            if !self.accept(before) {
                self.walk.apply_suffix_symmetry(index, sym);
            }
        }
    }

    #[inline]
    fn accept(&mut self, range_before: i64) -> bool {
        let delta = self.walk.range_size() as i64 - range_before;
        let ok = if delta <= 0 {
            true
        } else {
            let p = (-self.cfg.beta * delta as f64).exp();
            self.rng.gen::<f64>() < p
        };
        if ok {
            self.accepted += 1;
        }
        ok
    }

    /// Runs `count` proposals.
    pub fn run(&mut self, count: u64) {
        for _ in 0..count {
            self.step();
        }
    }

    /// Burns in, then records `samples` thinned observations.
    pub fn sample(&mut self, samples: u64, mut record: impl FnMut(u64, &WalkPath)) {
        self.run(self.cfg.burn_in);
        for i in 0..samples {
            self.run(self.cfg.thinning);
            record(i, &self.walk);
        }
    }
}

/// Exact partition function Z_N = E[exp(-|R_N|)] by enumerating all (2d)^N
/// step sequences; rejected above a 1e8 path budget.
pub fn exact_partition(dim: Dim, n_steps: u32) -> Result<f64> {
    let dirs = 2 * dim.get() as u64;
    let mut total = 1u64;
    for _ in 0..n_steps {
        total = total
            .checked_mul(dirs)
            .filter(|&t| t <= 100_000_000)
            .ok_or_else(|| Error::invalid("enumeration budget (2d)^N <= 1e8 exceeded"))?;
    }
    // depth-first enumeration with incremental occupancy counts
    struct Dfs {
        dim: Dim,
        n: usize,
        occ: FxHashMap<Site, u32>,
        acc: f64,
    }
    impl Dfs {
        fn go(&mut self, depth: usize, pos: Site, range: usize) {
            if depth == self.n {
                self.acc += (-(range as f64)).exp();
                return;
            }
            for code in 0..self.dim.dirs() as u8 {
                let next = pos.offset(self.dim.step_delta(code));
                let slot = self.occ.entry(next).or_insert(0);
                let new_range = if *slot == 0 { range + 1 } else { range };
                *slot += 1;
                self.go(depth + 1, next, new_range);
                let slot = self.occ.get_mut(&next).unwrap();
                *slot -= 1;
                if *slot == 0 {
                    self.occ.remove(&next);
                }
            }
        }
    }
    let origin = dim.origin();
    let mut dfs = Dfs {
        dim,
        n: n_steps as usize,
        occ: FxHashMap::default(),
        acc: 0.0,
    };
    dfs.occ.insert(origin, 1);
    dfs.go(0, origin, 1);
    Ok(dfs.acc / total as f64)
}

/// A tempering schedule 0 = beta_0 < ... < beta_K = 1.
#[derive(Clone, Debug)]
pub struct Schedule(Vec<f64>);

impl Schedule {
    pub fn new(betas: Vec<f64>) -> Result<Schedule> {
        if betas.is_empty() || betas[0] != 0.0 {
            return Err(Error::invalid("schedules start at beta = 0"));
        }
        for w in betas.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("schedules must be strictly increasing"));
            }
        }
        if *betas.last().unwrap() > 1.0 {
            return Err(Error::invalid("schedules end at beta <= 1"));
        }
        Ok(Schedule(betas))
    }

    /// 0 followed by `rungs` geometrically spaced values from `beta_min`
    /// to 1.
    pub fn geometric(rungs: usize, beta_min: f64) -> Result<Schedule> {
        if rungs < 1 || !(beta_min > 0.0 && beta_min < 1.0) {
            return Err(Error::invalid("need rungs >= 1 and beta_min in (0,1)"));
        }
        let mut betas = vec![0.0];
        for k in 0..rungs {
            let t = if rungs == 1 {
                1.0
            } else {
                k as f64 / (rungs - 1) as f64
            };
            betas.push(beta_min.powf(1.0 - t));
        }
        Schedule::new(betas)
    }

    /// The degenerate schedule {0}: the estimate is exactly one.
    pub fn trivial() -> Schedule {
        Schedule(vec![0.0])
    }

    pub fn betas(&self) -> &[f64] {
        &self.0
    }
}

/// An annealed importance sampling estimate of Z_N.
#[derive(Clone, Debug)]
pub struct AisEstimate {
    pub estimate: f64,
    pub se: f64,
    pub replicas: u32,
    pub log_weights: Vec<f64>,
}

/// One AIS replica: returns the log importance weight accumulated over the
/// schedule, with `sweeps_per_rung` Metropolis sweeps of N proposals each
/// at every rung.
pub fn ais_replica_log_weight(
    dim: Dim,
    n_steps: u64,
    schedule: &Schedule,
    sweeps_per_rung: u32,
    replica_seed: u64,
) -> Result<f64> {
    let betas = schedule.betas();
    let mut rng = ChaCha8Rng::seed_from_u64(replica_seed);
    // exact sample at beta = 0: uniform step codes
    let dirs = dim.dirs() as u8;
    let steps: Vec<u8> = (0..n_steps).map(|_| rng.gen_range(0..dirs)).collect();
    let mut log_w = 0.0;
    if betas.len() == 1 {
        return Ok(0.0);
    }
    let mut cfg = ChainConfig::new(dim, n_steps, 0.0, 0)?;
    cfg.burn_in = 0;
    let mut chain = RangeChain::new(cfg)?;
    // replace the start with the exact base sample and the derived rng
    let mut old = Vec::new();
    chain.walk.redraw_block(0, &steps, &mut old);
    chain.rng = rng;
    for pair in betas.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        log_w += -(next - prev) * chain.walk.range_size() as f64;
        chain.cfg.beta = next;
        chain.run(sweeps_per_rung as u64 * n_steps);
    }
    Ok(log_w)
}

/// Annealed importance sampling for Z_N with independent replicas; the
/// estimator is unbiased in expectation and the standard error comes from
/// the replica variance.
pub fn ais_partition(
    dim: Dim,
    n_steps: u64,
    schedule: &Schedule,
    replicas: u32,
    sweeps_per_rung: u32,
    seed: u64,
) -> Result<AisEstimate> {
    if replicas == 0 {
        return Err(Error::invalid("need at least one replica"));
    }
    let mut log_weights = Vec::with_capacity(replicas as usize);
    for r in 0..replicas {
        log_weights.push(ais_replica_log_weight(
            dim,
            n_steps,
            schedule,
            sweeps_per_rung,
            derive_seed(seed, r as u64),
        )?);
    }
    let weights: Vec<f64> = log_weights.iter().map(|lw| lw.exp()).collect();
    let (estimate, se) = mean_se(&weights);
    Ok(AisEstimate {
        estimate,
        se,
        replicas,
        log_weights,
    })
}

/// The eigenfunction-tilted transition kernel on a ball:
/// p-hat(x, y) = p(x, y) phi(y) / ((1 - lambda_1) phi(x)), which never
/// leaves the ball and has unit row sums by the eigenrelation.
#[derive(Clone, Debug)]
pub struct TiltedKernel {
    pub dim: Dim,
    /// Ball sites, sorted; indices align with `phi`.
    pub sites: Vec<Site>,
    pub lambda1: f64,
    pub phi: Vec<f64>,
    /// Per site: (neighbour index, transition probability).
    rows: Vec<Vec<(u32, f64)>>,
}

/// Builds the tilted kernel from a discrete eigenpair on the ball.
/// A single-site ball has no interior moves and is rejected as degenerate.
///
/// The eigenpair is refined until the eigenrelation holds pointwise to
/// 1e-12 relative, so the h-transform row sums are within 1e-10 of one
/// even where the eigenvector is small near the boundary.
pub fn tilted_kernel(dim: Dim, ball: &SiteSet, pair: &DiscreteEigenpair) -> Result<TiltedKernel> {
    let sites = ball.sorted();
    if sites.len() < 2 {
        return Err(Error::infeasible(
            "single-site ball: the tilted kernel has no interior moves",
        ));
    }
    if sites != pair.domain {
        return Err(Error::invalid("eigenpair domain differs from the ball"));
    }
    let pair = crate::spectral::refine_eigenpair_pointwise(dim, pair, 1e-12)?;
    let index: FxHashMap<Site, u32> = sites
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i as u32))
        .collect();
    let survival = 1.0 - pair.lambda1;
    if !(survival > 0.0) {
        return Err(Error::infeasible("the ball's survival factor vanishes"));
    }
    let base = 1.0 / dim.dirs() as f64;
    let mut rows = Vec::with_capacity(sites.len());
    for (i, &s) in sites.iter().enumerate() {
        let mut row = Vec::new();
        for code in 0..dim.dirs() as u8 {
            if let Some(&j) = index.get(&s.offset(dim.step_delta(code))) {
                let p = base * pair.vector[j as usize] / (survival * pair.vector[i]);
                row.push((j, p));
            }
        }
        rows.push(row);
    }
    Ok(TiltedKernel {
        dim,
        sites,
        lambda1: pair.lambda1,
        phi: pair.vector.clone(),
        rows,
    })
}

impl TiltedKernel {
    pub fn site_index(&self, site: Site) -> Option<usize> {
        self.sites.binary_search(&site).ok()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, p)| p).sum()
    }

    pub fn max_row_sum_deviation(&self) -> f64 {
        (0..self.rows.len())
            .map(|i| (self.row_sum(i) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Samples one kernel step from site index `i`.
    pub fn step(&self, i: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.rows[i];
        let total = self.row_sum(i);
        let mut u: f64 = rng.gen::<f64>() * total;
        for &(j, p) in row {
            u -= p;
            if u <= 0.0 {
                return j as usize;
            }
        }
        row.last().unwrap().0 as usize
    }

    /// Samples a kernel path of `len` steps as a vector of site indices.
    pub fn sample_path(&self, start: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut path = Vec::with_capacity(len + 1);
        path.push(start);
        let mut here = start;
        for _ in 0..len {
            here = self.step(here, rng);
            path.push(here);
        }
        path
    }
}

/// The importance weight of a kernel path against the free walk:
/// prod p/p-hat over the steps, accumulated in the log domain. It
/// telescopes to (1 - lambda_1)^N phi(X_0) / phi(X_N).
pub fn importance_weight(path: &[usize], kernel: &TiltedKernel) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::invalid("empty path"));
    }
    let survival = 1.0 - kernel.lambda1;
    let mut log_w = 0.0;
    for pair in path.windows(2) {
        // p / p-hat = (1 - lambda_1) phi(x) / phi(y)
        log_w += survival.ln() + kernel.phi[pair[0]].ln() - kernel.phi[pair[1]].ln();
    }
    Ok(log_w.exp())
}

/// The telescoped closed form (1 - lambda_1)^N phi(start) / phi(end).
pub fn importance_weight_closed_form(kernel: &TiltedKernel, start: usize, end: usize, n: u64) -> f64 {
    (1.0 - kernel.lambda1).powi(n as i32) * kernel.phi[start] / kernel.phi[end]
}

/// The importance weight of a walk confined to the kernel's ball.
pub fn importance_weight_of_walk(walk: &WalkPath, kernel: &TiltedKernel) -> Result<f64> {
    let mut path = Vec::with_capacity(walk.positions().len());
    for &p in walk.positions() {
        let idx = kernel
            .site_index(p)
            .ok_or_else(|| Error::invalid("the path exits the kernel's ball"))?;
        path.push(idx);
    }
    importance_weight(&path, kernel)
}

/// States and sparse transition rows of the exact Metropolis kernel over all
/// (2d)^N step sequences; diagnostic for detailed-balance checks.
pub struct ExactKernel {
    pub states: Vec<Vec<u8>>,
    /// Stationary weights exp(-beta |R|), unnormalised.
    pub pi: Vec<f64>,
    /// rows[s] lists (target state, probability); the diagonal completes
    /// each row to one.
    pub rows: Vec<FxHashMap<usize, f64>>,
}

/// Assembles the exact proposal-acceptance kernel for small (d, N); the
/// state budget (2d)^N is capped at 1e5.
pub fn assemble_exact_kernel(dim: Dim, n_steps: u32, beta: f64, mix: MoveMix) -> Result<ExactKernel> {
    mix.validate()?;
    let dirs = 2 * dim.get();
    let mut count = 1usize;
    for _ in 0..n_steps {
        count = count
            .checked_mul(dirs)
            .filter(|&c| c <= 100_000)
            .ok_or_else(|| Error::invalid("state budget (2d)^N <= 1e5 exceeded"))?;
    }
    let n = n_steps as usize;
    let encode = |steps: &[u8]| -> usize {
        steps
            .iter()
            .rev()
            .fold(0usize, |acc, &c| acc * dirs + c as usize)
    };
    let mut states = Vec::with_capacity(count);
    for code in 0..count {
        let mut c = code;
        let mut steps = vec![0u8; n];
        for s in steps.iter_mut() {
            *s = (c % dirs) as u8;
            c /= dirs;
        }
        states.push(steps);
    }
    let origin = vec![0i32; dim.get()];
    let range_of = |steps: &[u8]| -> usize {
        WalkPath::build(dim, &origin, steps.to_vec())
            .expect("valid codes")
            .range_size()
    };
    let pi: Vec<f64> = states
        .iter()
        .map(|s| (-beta * range_of(s) as f64).exp())
        .collect();

    let max_window = (n as f64).sqrt().floor().max(1.0) as usize;
    let symmetries = AxisSymmetry::generators(dim);
    let mut rows: Vec<FxHashMap<usize, f64>> = vec![FxHashMap::default(); count];
    for (s, steps) in states.iter().enumerate() {
        let r_s = range_of(steps);
        let add = |target: Vec<u8>, proposal_prob: f64, rows: &mut Vec<FxHashMap<usize, f64>>| {
            let t = encode(&target);
            if t == s {
                return; // self-proposals never change the state
            }
            let r_t = range_of(&target);
            let acc = (-beta * (r_t as f64 - r_s as f64)).exp().min(1.0);
            *rows[s].entry(t).or_insert(0.0) += proposal_prob * acc;
        };
        // single redraws
        for i in 0..n {
            for code in 0..dirs as u8 {
                let mut t = steps.clone();
                t[i] = code;
                add(t, mix.single / (n as f64 * dirs as f64), &mut rows);
            }
        }
        // block redraws: window length uniform in 1..=max_window, start
        // uniform, codes uniform
        for w in 1..=max_window {
            let starts = n - w + 1;
            let mut t = steps.clone();
            let mut redraw = vec![0u8; w];
            for start in 0..starts {
                loop {
                    for (k, &c) in redraw.iter().enumerate() {
                        t[start + k] = c;
                    }
                    add(
                        t.clone(),
                        mix.block
                            / (max_window as f64 * starts as f64 * (dirs as f64).powi(w as i32)),
                        &mut rows,
                    );
                    // advance the redraw odometer
                    let mut pos = 0;
                    loop {
                        if pos == w {
                            break;
                        }
                        redraw[pos] += 1;
                        if (redraw[pos] as usize) < dirs {
                            break;
                        }
                        redraw[pos] = 0;
                        pos += 1;
                    }
                    if redraw.iter().all(|&c| c == 0) {
                        break;
                    }
                }
                // restore the window before sliding it
                t[start..start + w].copy_from_slice(&steps[start..start + w]);
            }
        }
        // pivots
        for i in 0..n {
            for sym in &symmetries {
                let mut t = steps.clone();
                for c in t[i..].iter_mut() {
                    *c = sym.apply_code(*c);
                }
                add(t, mix.pivot / (n as f64 * symmetries.len() as f64), &mut rows);
            }
        }
    }
    Ok(ExactKernel { states, pi, rows })
}

impl ExactKernel {
    /// Maximum detailed-balance violation |pi_s P(s,t) - pi_t P(t,s)|.
    pub fn detailed_balance_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (s, row) in self.rows.iter().enumerate() {
            for (&t, &p) in row {
                let back = self.rows[t].get(&s).copied().unwrap_or(0.0);
                worst = worst.max((self.pi[s] * p - self.pi[t] * back).abs());
            }
        }
        worst
    }

    /// The stationary distribution by dense power iteration.
    pub fn stationary(&self, iters: usize) -> Vec<f64> {
        let m = self.states.len();
        let mut v = vec![1.0 / m as f64; m];
        let mut next = vec![0.0; m];
        for _ in 0..iters {
            next.iter_mut().for_each(|x| *x = 0.0);
            for (s, row) in self.rows.iter().enumerate() {
                let mut stay = 1.0;
                for (&t, &p) in row {
                    stay -= p;
                    next[t] += v[s] * p;
                }
                next[s] += v[s] * stay;
            }
            std::mem::swap(&mut v, &mut next);
        }
        v
    }
}
