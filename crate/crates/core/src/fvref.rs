//! Reference processes for the large-population limit: the Wright-Fisher
//! diffusion on the simplex, exact Moran fixation probabilities,
//! Poisson-Dirichlet sampling, and a Moran particle approximation of a
//! Fleming-Viot process with averaged coefficients.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Exp1, StandardNormal};

use crate::engine::replicate_rng;
use crate::flow::AveragedCoefficients;
use crate::model::{Dispersal, Kernel};
use crate::space::{BasisFn, Location, SpatialDomain};
use crate::stats::mean_and_stderr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FvError {
    #[error("state {0:?} is not on the simplex")]
    NotOnSimplex(Vec<f64>),
    #[error("dt = {dt} too large: {bad} of {steps} steps left the simplex by more than 0.05")]
    StepTooLarge { dt: f64, bad: usize, steps: usize },
    #[error("Moran size M = {0} exceeds the dense-solve budget of 10^4")]
    TooLarge(u64),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("pair-rate calibration failed: z = {z} ({detail})")]
    Calibration { z: f64, detail: String },
}

/// Wright-Fisher diffusion parameters on `K` traits.
#[derive(Clone, Debug)]
pub struct WfParams {
    /// Off-diagonal mutation rates `theta[i][j]`, `i -> j`.
    pub theta: DMatrix<f64>,
    /// Selection intensities.
    pub alpha: Vec<f64>,
    /// Sampling coefficient; the covariance is `2 rho x_i (delta_ij - x_j)`.
    pub resample: f64,
}

impl WfParams {
    pub fn neutral(k: usize, resample: f64) -> Self {
        Self { theta: DMatrix::zeros(k, k), alpha: vec![0.0; k], resample }
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self) -> Result<(), FvError> {
        let k = self.k();
        if self.theta.nrows() != k || self.theta.ncols() != k {
            return Err(FvError::Invalid("theta must be K x K".into()));
        }
        if (0..k).any(|i| (0..k).any(|j| i != j && self.theta[(i, j)] < 0.0)) {
            return Err(FvError::Invalid("mutation rates must be nonnegative".into()));
        }
        if !(self.resample >= 0.0) {
            return Err(FvError::Invalid("resampling coefficient must be nonnegative".into()));
        }
        Ok(())
    }

    /// Drift `sum_i theta_ij x_i - x_j sum_i theta_ji + x_j (alpha_j - <alpha,x>)`.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        let k = self.k();
        let mean_alpha: f64 = self.alpha.iter().zip(x).map(|(a, b)| a * b).sum();
        for j in 0..k {
            let mut d = x[j] * (self.alpha[j] - mean_alpha);
            for i in 0..k {
                if i != j {
                    d += self.theta[(i, j)] * x[i] - self.theta[(j, i)] * x[j];
                }
            }
            out[j] = d;
        }
    }
}

#[derive(Clone, Debug)]
pub struct WfPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub bad_steps: usize,
    pub steps: usize,
}

fn on_simplex(x: &[f64]) -> bool {
    x.iter().all(|&v| v >= -1e-12) && (x.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

fn wf_step<R: Rng + ?Sized>(p: &WfParams, x: &mut [f64], dt: f64, drift: &mut [f64], z: &mut [f64], rng: &mut R) -> bool {
    let k = x.len();
    p.drift(x, drift);
    let mut s = 0.0;
    for i in 0..k {
        z[i] = rng.sample::<f64, _>(StandardNormal) * x[i].max(0.0).sqrt();
        s += z[i];
    }
    let amp = (2.0 * p.resample * dt).sqrt();
    let mut far = false;
    for i in 0..k {
        x[i] += drift[i] * dt + amp * (z[i] - x[i] * s);
        far |= x[i] < -0.05;
        x[i] = x[i].max(0.0);
    }
    let total: f64 = x.iter().sum();
    for v in x.iter_mut() {
        *v /= total;
    }
    far
}

/// Euler-Maruyama path with clip-and-renormalize projection, recorded every
/// `record_every` steps.
pub fn simulate_wf(p: &WfParams, x0: &[f64], t_end: f64, dt: f64, seed: u64, record_every: usize) -> Result<WfPath, FvError> {
    p.check()?;
    if x0.len() != p.k() || !on_simplex(x0) {
        return Err(FvError::NotOnSimplex(x0.to_vec()));
    }
    if !(dt > 0.0) {
        return Err(FvError::Invalid("dt must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (t_end / dt).round() as usize;
    let mut x = x0.to_vec();
    let (mut drift, mut z) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    let every = record_every.max(1);
    let mut path = WfPath { times: vec![0.0], states: vec![x.clone()], bad_steps: 0, steps };
    for s in 1..=steps {
        if wf_step(p, &mut x, dt, &mut drift, &mut z, &mut rng) {
            path.bad_steps += 1;
        }
        if s % every == 0 || s == steps {
            path.times.push(s as f64 * dt);
            path.states.push(x.clone());
        }
    }
    if path.bad_steps * 100 > steps {
        return Err(FvError::StepTooLarge { dt, bad: path.bad_steps, steps });
    }
    Ok(path)
}

/// Final state of replicate `rep`, stopping early once a vertex is reached
/// with no mutation out of it.
pub fn wf_final(p: &WfParams, x0: &[f64], t_end: f64, dt: f64, seed: u64, rep: u64) -> Result<Vec<f64>, FvError> {
    p.check()?;
    if x0.len() != p.k() || !on_simplex(x0) {
        return Err(FvError::NotOnSimplex(x0.to_vec()));
    }
    let mut rng = replicate_rng(seed, rep);
    let steps = (t_end / dt).round() as usize;
    let mut x = x0.to_vec();
    let (mut drift, mut z) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    let mut bad = 0;
    for s in 1..=steps {
        if wf_step(p, &mut x, dt, &mut drift, &mut z, &mut rng) {
            bad += 1;
        }
        if let Some(v) = x.iter().position(|&c| c == 1.0) {
            if (0..p.k()).all(|j| j == v || p.theta[(v, j)] == 0.0) {
                if bad * 100 > s {
                    return Err(FvError::StepTooLarge { dt, bad, steps: s });
                }
                return Ok(x);
            }
        }
    }
    if bad * 100 > steps {
        return Err(FvError::StepTooLarge { dt, bad, steps });
    }
    Ok(x)
}

/// Largest population handled by [`moran_absorption`].
pub const MORAN_MAX: u64 = 10_000;

/// Fixation probability of `k` mutants of relative fitness `w` in a Moran
/// population of size `m`, from the absorption linear system.
pub fn moran_absorption(m: u64, w: f64, k: u64) -> Result<f64, FvError> {
    check_moran(m, w, k)?;
    if k == 0 || k == m {
        return Ok(if k == 0 { 0.0 } else { 1.0 });
    }
    // interior unknowns P_1..P_{m-1}: (u+d) P_k - u P_{k+1} - d P_{k-1} = 0
    let n = (m - 1) as usize;
    let mf = m as f64;
    let up = |j: f64| w * j * (mf - j) / ((w * j + mf - j) * mf);
    let down = |j: f64| j * (mf - j) / ((w * j + mf - j) * mf);
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for r in 0..n {
        let j = (r + 1) as f64;
        let (u, d) = (up(j), down(j));
        a[r] = -d;
        b[r] = u + d;
        c[r] = -u;
    }
    rhs[n - 1] = up((m - 1) as f64);
    let sol = thomas(&a, &b, &c, &rhs);
    // rounding can push near-certain fixation past 1
    Ok(sol[(k - 1) as usize].clamp(0.0, 1.0))
}

/// Closed form `sum_{i<k} r^i / sum_{i<m} r^i`, `r = 1/w`.
pub fn moran_absorption_ratio(m: u64, w: f64, k: u64) -> Result<f64, FvError> {
    check_moran(m, w, k)?;
    let r = 1.0 / w;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut p = 1.0;
    for i in 0..m {
        if i < k {
            num += p;
        }
        den += p;
        p *= r;
    }
    Ok(num / den)
}

fn check_moran(m: u64, w: f64, k: u64) -> Result<(), FvError> {
    if m > MORAN_MAX {
        return Err(FvError::TooLarge(m));
    }
    if m == 0 || k > m {
        return Err(FvError::Invalid(format!("need 0 <= k <= M and M >= 1, got k = {k}, M = {m}")));
    }
    if !(w > 0.0) {
        return Err(FvError::Invalid("fitness must be positive".into()));
    }
    Ok(())
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let den = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / den;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdParams {
    pub alpha: f64,
    pub truncation: usize,
}

impl PdParams {
    /// Truncation with expected deficit `(alpha/(1+alpha))^n <= 1e-6`.
    pub fn new(alpha: f64) -> Self {
        Self { alpha, truncation: default_truncation(alpha) }
    }
}

pub fn default_truncation(alpha: f64) -> usize {
    let r = alpha / (1.0 + alpha);
    ((1e-6f64).ln() / r.ln()).ceil().max(1.0) as usize
}

/// GEM(alpha) sticks in generation order.
pub fn sample_gem<R: Rng + ?Sized>(p: &PdParams, rng: &mut R) -> Result<Vec<f64>, FvError> {
    if !(p.alpha > 0.0) {
        return Err(FvError::Invalid("Poisson-Dirichlet parameter must be positive".into()));
    }
    let beta = Beta::new(1.0, p.alpha).map_err(|e| FvError::Invalid(e.to_string()))?;
    let mut rest = 1.0;
    let mut w = Vec::with_capacity(p.truncation);
    for _ in 0..p.truncation {
        let b: f64 = beta.sample(rng);
        w.push(rest * b);
        rest *= 1.0 - b;
    }
    Ok(w)
}

/// Poisson-Dirichlet weights: GEM sticks sorted in decreasing order.
pub fn sample_poisson_dirichlet<R: Rng + ?Sized>(p: &PdParams, rng: &mut R) -> Result<Vec<f64>, FvError> {
    let mut w = sample_gem(p, rng)?;
    w.sort_by(|a, b| b.total_cmp(a));
    Ok(w)
}

/// `n` largest-weight samples, one independent stream per draw.
pub fn pd_largest_shares(alpha: f64, n: usize, seed: u64) -> Result<Vec<f64>, FvError> {
    let p = PdParams::new(alpha);
    (0..n).map(|k| sample_poisson_dirichlet(&p, &mut replicate_rng(seed, k as u64)).map(|w| w[0])).collect()
}

/// Largest block share of a size-`m` paintbox sample from PD(alpha), i.e.
/// the largest allele frequency under the Ewens law. Sticks are revealed
/// one at a time with binomial counts, so no truncation is involved.
pub fn ewens_largest_share<R: Rng + ?Sized>(alpha: f64, m: u64, rng: &mut R) -> Result<f64, FvError> {
    if !(alpha > 0.0) {
        return Err(FvError::Invalid("Poisson-Dirichlet parameter must be positive".into()));
    }
    if m == 0 {
        return Err(FvError::Invalid("sample size must be positive".into()));
    }
    let beta = Beta::new(1.0, alpha).map_err(|e| FvError::Invalid(e.to_string()))?;
    let (mut left, mut best) = (m, 0);
    while left > best {
        let v: f64 = beta.sample(rng);
        let k = Binomial::new(left, v).map_err(|e| FvError::Invalid(e.to_string()))?.sample(rng);
        best = best.max(k);
        left -= k;
    }
    Ok(best as f64 / m as f64)
}

/// Ewens largest shares for the given sample sizes, one stream per draw.
pub fn ewens_largest_shares(alpha: f64, sizes: &[u64], seed: u64) -> Result<Vec<f64>, FvError> {
    sizes.iter().enumerate().map(|(k, &m)| ewens_largest_share(alpha, m, &mut replicate_rng(seed, k as u64))).collect()
}

/// One Moran particle: location, clan label, last diffusion update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoranParticle {
    pub loc: Location,
    pub clan: f64,
    pub last_t: f64,
}

#[derive(Clone, Debug)]
pub struct MoranPath {
    pub times: Vec<f64>,
    /// `<f, nu>` per observable at each time.
    pub obs: Vec<Vec<f64>>,
    pub particles: Vec<MoranParticle>,
    pub resamplings: u64,
}

/// `M`-particle Moran approximation of the Fleming-Viot process whose
/// coefficients are `avg`. Every ordered pair `(a,b)` resamples (`b` copies
/// `a`) at rate `pair_rate`; fecundity selection adds `b^s(x_a)/M`,
/// viability selection `d^s(x_b)/M`.
#[derive(Clone, Debug)]
pub struct MoranFv<'a> {
    pub avg: &'a AveragedCoefficients,
    pub m: usize,
    pub pair_rate: f64,
    mig: Option<(DMatrix<f64>, Vec<f64>, f64)>,
    diffusion: f64,
    jumps: Vec<(f64, Option<Kernel>)>,
}

impl<'a> MoranFv<'a> {
    pub fn new(avg: &'a AveragedCoefficients, m: usize) -> Result<Self, FvError> {
        if m < 2 {
            return Err(FvError::Invalid("need at least two particles".into()));
        }
        let mig = avg.migration_matrix().map(|q| {
            let out: Vec<f64> = (0..q.nrows()).map(|s| -q[(s, s)]).collect();
            let max = out.iter().copied().fold(0.0, f64::max);
            (q, out, max)
        });
        let mut jumps: Vec<(f64, Option<Kernel>)> = avg
            .c_avg
            .iter()
            .filter_map(|(_, _, w, d)| match d {
                Dispersal::Rare { c, kernel } => Some((w * c, Some(kernel.clone()))),
                Dispersal::Local { .. } => None,
            })
            .collect();
        // immigration redraws found a fresh clan
        jumps.extend(avg.i_avg.iter().map(|(_, r, law)| (*r, Some(law.clone()))));
        let jumps = jumps.into_iter().filter(|(r, _)| *r > 0.0).collect();
        Ok(Self { avg, m, pair_rate: avg.gamma_smpl, mig, diffusion: avg.diffusion(), jumps })
    }

    fn jump_total(&self) -> f64 {
        self.jumps.iter().map(|(r, _)| r).sum()
    }

    fn immigration_index(&self) -> usize {
        self.jumps.len() - self.avg.i_avg.iter().filter(|(_, r, _)| *r > 0.0).count()
    }

    pub fn initial<R: Rng + ?Sized>(&self, law: &Kernel, rng: &mut R) -> Vec<MoranParticle> {
        (0..self.m)
            .map(|_| MoranParticle { loc: law.sample(&self.avg.domain, &Location::Site(0), rng).0, clan: rng.random(), last_t: 0.0 })
            .collect()
    }

    fn advance<R: Rng + ?Sized>(&self, p: &mut MoranParticle, t: f64, rng: &mut R) {
        if self.diffusion > 0.0 && t > p.last_t {
            self.avg.domain.diffuse(&mut p.loc, self.diffusion, t - p.last_t, rng);
        }
        p.last_t = t;
    }

    /// Runs from `parts` over `[0, t_end]`, recording at `grid` times.
    pub fn run<R: Rng + ?Sized>(
        &self,
        mut parts: Vec<MoranParticle>,
        t_end: f64,
        grid: &[f64],
        observables: &[BasisFn],
        rng: &mut R,
    ) -> MoranPath {
        let m = self.m as f64;
        let dom = &self.avg.domain;
        let b_bound = self.avg.b_s_bound();
        let d_bound = self.avg.d_s_bound();
        let mig_max = self.mig.as_ref().map_or(0.0, |x| x.2);
        let jt = self.jump_total();
        let rates = [
            m * (m - 1.0) * self.pair_rate,
            (m - 1.0) * b_bound,
            (m - 1.0) * d_bound,
            m * mig_max,
            m * jt,
        ];
        let total: f64 = rates.iter().sum();
        let imm_from = self.immigration_index();
        let mut path = MoranPath { times: Vec::new(), obs: Vec::new(), particles: Vec::new(), resamplings: 0 };
        let mut t = 0.0;
        let mut g = 0;
        let record = |parts: &mut Vec<MoranParticle>, tg: f64, path: &mut MoranPath, rng: &mut R| {
            for p in parts.iter_mut() {
                self.advance(p, tg, rng);
            }
            path.times.push(tg);
            path.obs.push(observables.iter().map(|f| parts.iter().map(|p| f.eval(dom, &p.loc)).sum::<f64>() / m).collect());
        };
        loop {
            let t_next = if total > 0.0 { t + rng.sample::<f64, _>(Exp1) / total } else { f64::INFINITY };
            while g < grid.len() && grid[g] <= t_next.min(t_end) {
                record(&mut parts, grid[g], &mut path, rng);
                g += 1;
            }
            if t_next > t_end {
                break;
            }
            t = t_next;
            let mut u = rng.random::<f64>() * total;
            let mut ch = 0;
            while ch < rates.len() - 1 && u >= rates[ch] {
                u -= rates[ch];
                ch += 1;
            }
            let a = rng.random_range(0..self.m);
            match ch {
                0..=2 => {
                    let mut b = rng.random_range(0..self.m - 1);
                    if b >= a {
                        b += 1;
                    }
                    if ch == 1 {
                        self.advance(&mut parts[a], t, rng);
                        if rng.random::<f64>() * b_bound >= self.avg.b_s_avg(&parts[a].loc) {
                            continue;
                        }
                    } else if ch == 2 {
                        self.advance(&mut parts[b], t, rng);
                        if rng.random::<f64>() * d_bound >= self.avg.d_s_avg(&parts[b].loc) {
                            continue;
                        }
                    }
                    self.advance(&mut parts[a], t, rng);
                    parts[b] = parts[a];
                    path.resamplings += 1;
                }
                3 => {
                    let (q, out, max) = self.mig.as_ref().expect("migration channel on a finite set");
                    let s = match parts[a].loc {
                        Location::Site(s) => s as usize,
                        _ => 0,
                    };
                    if rng.random::<f64>() * max >= out[s] {
                        continue;
                    }
                    let mut v = rng.random::<f64>() * out[s];
                    let mut to = s;
                    for d in 0..q.ncols() {
                        if d != s && q[(s, d)] > 0.0 {
                            to = d;
                            if v < q[(s, d)] {
                                break;
                            }
                            v -= q[(s, d)];
                        }
                    }
                    parts[a].loc = Location::Site(to as u32);
                }
                _ => {
                    let mut v = rng.random::<f64>() * jt;
                    let mut k = 0;
                    while k < self.jumps.len() - 1 && v >= self.jumps[k].0 {
                        v -= self.jumps[k].0;
                        k += 1;
                    }
                    self.advance(&mut parts[a], t, rng);
                    let kernel = self.jumps[k].1.as_ref().expect("jump kernel");
                    let (to, fresh) = kernel.sample(dom, &parts[a].loc, rng);
                    parts[a].loc = to;
                    if fresh || k >= imm_from {
                        parts[a].clan = rng.random();
                    }
                }
            }
        }
        for p in parts.iter_mut() {
            self.advance(p, t_end, rng);
        }
        path.particles = parts;
        path
    }

    /// Analytic drift of `F = <f,nu>^2` for the limit generator on a finite
    /// set, at the empirical measure of `parts`.
    pub fn generator_square(&self, f: &[f64], parts: &[MoranParticle]) -> f64 {
        let m = parts.len() as f64;
        let site = |p: &MoranParticle| match p.loc {
            Location::Site(s) => s as usize,
            _ => 0,
        };
        let mean = parts.iter().map(|p| f[site(p)]).sum::<f64>() / m;
        let sq = parts.iter().map(|p| f[site(p)] * f[site(p)]).sum::<f64>() / m;
        let mut lf = 0.0;
        if let Some((q, _, _)) = &self.mig {
            lf += parts.iter().map(|p| (0..f.len()).map(|d| q[(site(p), d)] * f[d]).sum::<f64>()).sum::<f64>() / m;
        }
        for (r, k) in &self.jumps {
            let k = k.as_ref().expect("jump kernel");
            let sites = f.len();
            lf += r * parts
                .iter()
                .map(|p| (0..sites).map(|d| k.site_prob(sites, site(p), d) * f[d]).sum::<f64>() - f[site(p)])
                .sum::<f64>()
                / m;
        }
        let bx = |p: &MoranParticle| self.avg.b_s_avg(&p.loc);
        let dx = |p: &MoranParticle| self.avg.d_s_avg(&p.loc);
        let sel = parts.iter().map(|p| (bx(p) - dx(p)) * f[site(p)]).sum::<f64>() / m
            - parts.iter().map(|p| bx(p) - dx(p)).sum::<f64>() / m * mean;
        2.0 * mean * (lf + sel) + 2.0 * self.avg.gamma_smpl * (sq - mean * mean)
    }

    /// Monte-Carlo check that the pair rate reproduces the sampling term:
    /// z-score of `E[F(nu_dt) - F(nu_0)]/dt` against [`Self::generator_square`]
    /// for `F = <f,nu>^2` on a finite set.
    pub fn calibrate(&self, seed: u64, reps: usize) -> Result<f64, FvError> {
        let SpatialDomain::FiniteSet { sites, .. } = self.avg.domain else {
            return Ok(0.0);
        };
        let f: Vec<f64> = (0..sites).map(|s| if s % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let mut rng = replicate_rng(seed, u64::MAX);
        let parts: Vec<MoranParticle> = (0..self.m)
            .map(|a| MoranParticle { loc: Location::Site((a * sites / self.m) as u32), clan: rng.random(), last_t: 0.0 })
            .collect();
        let m = self.m as f64;
        let big_f = |ps: &[MoranParticle]| {
            let v = ps.iter().map(|p| if let Location::Site(s) = p.loc { f[s as usize] } else { 0.0 }).sum::<f64>() / m;
            v * v
        };
        let f0 = big_f(&parts);
        let expected = self.generator_square(&f, &parts);
        let total_rate = m * m * (self.pair_rate + self.jump_total()) + m * self.mig.as_ref().map_or(0.0, |x| x.2);
        let dt = 0.05 / total_rate.max(1e-300);
        let diffs: Vec<f64> = crate::engine::farm(reps, |r| {
            let mut rng = replicate_rng(seed, r as u64);
            let out = self.run(parts.clone(), dt, &[], &[], &mut rng);
            big_f(&out.particles) - f0
        });
        let (mean, se) = mean_and_stderr(&diffs);
        let z = if se == 0.0 { if mean / dt == expected { 0.0 } else { f64::INFINITY } } else { (mean / dt - expected) / (se / dt) };
        if z.abs() >= 4.0 {
            return Err(FvError::Calibration {
                z,
                detail: format!("observed {} vs analytic {expected} at M = {}", mean / dt, self.m),
            });
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moran_oracles_agree() {
        for &(m, w, k) in &[(100, 1.05, 1), (100, 1.0, 30), (57, 0.9, 13), (2, 3.0, 1)] {
            let a = moran_absorption(m, w, k).unwrap();
            let b = moran_absorption_ratio(m, w, k).unwrap();
            assert!((a - b).abs() < 1e-12, "{m} {w} {k}: {a} vs {b}");
        }
    }

    #[test]
    fn default_truncation_meets_deficit() {
        for &a in &[0.25, 1.0, 2.0, 10.0] {
            let n = default_truncation(a);
            assert!((a / (1.0 + a)).powi(n as i32) <= 1e-6);
            assert!((a / (1.0 + a)).powi(n as i32 - 1) > 1e-6);
        }
    }
}
