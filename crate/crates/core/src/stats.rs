//! Convergence diagnostics on trajectory records and the sample comparisons
//! used against the reference processes.

use std::collections::HashMap;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::engine::TrajectoryRecord;
use crate::model::PopulationState;
use crate::space::{dot, Location, SpatialDomain};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("record grid does not cover [{from}, {to}]")]
    InsufficientGrid { from: f64, to: f64 },
    #[error("observable `{0}` was not recorded")]
    MissingObservable(String),
    #[error("population carries no clan labels")]
    Clanless,
    #[error("empty sample")]
    Empty,
}

const GRID_EPS: f64 = 1e-9;

/// Rows with `t_N <= t <= T + t_N`, after checking the grid reaches both ends.
fn shifted_rows(traj: &TrajectoryRecord, horizon: f64) -> Result<Vec<usize>, StatsError> {
    let (from, to) = (traj.t_shift, traj.t_shift + horizon);
    let rows: Vec<usize> =
        (0..traj.rows()).filter(|&r| traj.times[r] >= from - GRID_EPS && traj.times[r] <= to + GRID_EPS).collect();
    let covered = rows.first().is_some_and(|&r| (traj.times[r] - from).abs() <= GRID_EPS)
        && rows.last().is_some_and(|&r| (traj.times[r] - to).abs() <= GRID_EPS);
    if covered {
        Ok(rows)
    } else {
        Err(StatsError::InsufficientGrid { from, to })
    }
}

/// `sup_{t in [0,T]} |h^N(t + t_N) - h_eq|_1` over the recorded grid.
pub fn density_deviation(traj: &TrajectoryRecord, h_eq: &[f64], horizon: f64) -> Result<f64, StatsError> {
    let rows = shifted_rows(traj, horizon)?;
    Ok(rows
        .into_iter()
        .map(|r| traj.h(r).iter().zip(h_eq).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// `sup_t max_{i,j} |h_j <f,mu_i> - h_i <f,mu_j>|` at shifted times.
pub fn inseparability(traj: &TrajectoryRecord, label: &str, horizon: f64) -> Result<f64, StatsError> {
    let rows = shifted_rows(traj, horizon)?;
    let k = traj.labels.iter().position(|l| l == label).ok_or_else(|| StatsError::MissingObservable(label.into()))?;
    let q = traj.q;
    let mut sup: f64 = 0.0;
    for r in rows {
        let h = traj.h(r);
        let f = &traj.obs[r][k * q..(k + 1) * q];
        for i in 0..q {
            for j in 0..q {
                sup = sup.max((h[j] * f[i] - h[i] * f[j]).abs());
            }
        }
    }
    Ok(sup)
}

/// `Y_i = <f,mu_i> sum_j h_j - h_i sum_j <f,mu_j>` per row; rows sum to zero.
pub fn yn_paths(traj: &TrajectoryRecord, label: &str) -> Result<Vec<Vec<f64>>, StatsError> {
    let k = traj.labels.iter().position(|l| l == label).ok_or_else(|| StatsError::MissingObservable(label.into()))?;
    let q = traj.q;
    Ok((0..traj.rows())
        .map(|r| {
            let h = traj.h(r);
            let f = &traj.obs[r][k * q..(k + 1) * q];
            let (hs, fs): (f64, f64) = (h.iter().sum(), f.iter().sum());
            (0..q).map(|i| f[i] * hs - h[i] * fs).collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClanStatistics {
    /// Clan shares, descending.
    pub weights: Vec<f64>,
    pub largest_share: f64,
    /// Mean squared geodesic distance to the centroid of the largest clan.
    pub dominant_dispersion: f64,
    /// `sum_c sum_{a != b in c} |x_a - x_b|^2`, chord metric.
    pub pair_chord2: f64,
    /// `sum_c n_c (n_c - 1)`.
    pub pairs: f64,
}

impl ClanStatistics {
    /// Mean squared chord distance between two distinct same-clan particles.
    pub fn pair_dispersion(&self) -> f64 {
        self.pair_chord2 / self.pairs
    }
}

/// Euclidean embedding whose distances are chords of the domain metric.
fn embed(domain: &SpatialDomain, loc: &Location) -> [f64; 3] {
    match (domain, loc) {
        (SpatialDomain::Circle { circumference, .. }, Location::Arc(a)) => {
            let r = circumference / std::f64::consts::TAU;
            let th = a / r;
            [r * th.cos(), r * th.sin(), 0.0]
        }
        (_, Location::Point(p)) => *p,
        (_, Location::Unit(x)) => [*x, 0.0, 0.0],
        _ => [0.0; 3],
    }
}

#[derive(Default)]
struct ClanAcc {
    n: u64,
    sum: [f64; 3],
    sq: f64,
    sites: HashMap<u32, u64>,
}

pub fn clan_statistics(domain: &SpatialDomain, pop: &PopulationState) -> Result<ClanStatistics, StatsError> {
    let mut clans: HashMap<u64, ClanAcc> = HashMap::new();
    let mut total = 0u64;
    for p in pop.types.iter().flatten() {
        let c = p.clan.ok_or(StatsError::Clanless)?;
        let acc = clans.entry(c.to_bits()).or_default();
        acc.n += 1;
        total += 1;
        if let Location::Site(s) = p.loc {
            *acc.sites.entry(s).or_default() += 1;
        } else {
            let x = embed(domain, &p.loc);
            for k in 0..3 {
                acc.sum[k] += x[k];
            }
            acc.sq += dot(&x, &x);
        }
    }
    if total == 0 {
        return Ok(ClanStatistics {
            weights: Vec::new(),
            largest_share: 0.0,
            dominant_dispersion: f64::NAN,
            pair_chord2: 0.0,
            pairs: 0.0,
        });
    }
    let mut list: Vec<(u64, ClanAcc)> = clans.into_iter().collect();
    list.sort_by(|a, b| b.1.n.cmp(&a.1.n).then(a.0.cmp(&b.0)));
    let (mut pair_chord2, mut pairs) = (0.0, 0.0);
    for (_, a) in &list {
        let n = a.n as f64;
        pairs += n * (n - 1.0);
        pair_chord2 += if a.sites.is_empty() {
            (2.0 * n * a.sq - 2.0 * dot(&a.sum, &a.sum)).max(0.0)
        } else {
            n * n - a.sites.values().map(|&c| (c * c) as f64).sum::<f64>()
        };
    }
    let weights: Vec<f64> = list.iter().map(|(_, a)| a.n as f64 / total as f64).collect();
    let top = list[0].0;
    let centroid = dominant_centroid(domain, &list[0].1);
    let dominant_dispersion = match centroid {
        Some(c) => {
            let members = pop.types.iter().flatten().filter(|p| p.clan.map(f64::to_bits) == Some(top));
            let (s, m) = members.fold((0.0, 0u64), |(s, m), p| {
                let d = domain.distance(&p.loc, &c);
                (s + d * d, m + 1)
            });
            s / m as f64
        }
        None => f64::NAN,
    };
    Ok(ClanStatistics { largest_share: weights[0], weights, dominant_dispersion, pair_chord2, pairs })
}

fn dominant_centroid(domain: &SpatialDomain, a: &ClanAcc) -> Option<Location> {
    let n = a.n as f64;
    match domain {
        SpatialDomain::FiniteSet { .. } => {
            a.sites.iter().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0))).map(|(s, _)| Location::Site(*s))
        }
        SpatialDomain::Sphere { radius, .. } => {
            let norm = dot(&a.sum, &a.sum).sqrt();
            (norm > 1e-12 * n).then(|| Location::Point(a.sum.map(|x| x * radius / norm)))
        }
        SpatialDomain::Circle { circumference, .. } => {
            let norm = (a.sum[0] * a.sum[0] + a.sum[1] * a.sum[1]).sqrt();
            (norm > 1e-12 * n).then(|| {
                let th = a.sum[1].atan2(a.sum[0]).rem_euclid(std::f64::consts::TAU);
                Location::Arc((th / std::f64::consts::TAU * circumference).min(circumference * (1.0 - f64::EPSILON)))
            })
        }
        SpatialDomain::Interval { .. } => Some(Location::Unit(a.sum[0] / n)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KsMethod {
    Exact,
    Asymptotic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: KsMethod,
    /// Both samples are constant (the test carries no information).
    pub degenerate: bool,
}

/// Largest `n * m` handled by the exact lattice-path computation.
pub const KS_EXACT_LIMIT: usize = 1_000_000;

/// Two-sample Kolmogorov-Smirnov test.
pub fn compare_samples(a: &[f64], b: &[f64]) -> Result<KsResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    // D in lattice units: max |i m - j n| over the merged order
    let (mut i, mut j, mut k) = (0usize, 0usize, 0i64);
    while i < n || j < m {
        let v = match (x.get(i), y.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        k = k.max((i as i64 * m as i64 - j as i64 * n as i64).abs());
    }
    let statistic = k as f64 / (n * m) as f64;
    let degenerate = x[0] == x[n - 1] && y[0] == y[m - 1];
    if n * m <= KS_EXACT_LIMIT {
        Ok(KsResult { statistic, p_value: ks_exact_p(n, m, k), method: KsMethod::Exact, degenerate })
    } else {
        let ne = (n * m) as f64 / (n + m) as f64;
        Ok(KsResult { statistic, p_value: kolmogorov_q(ks_lambda(ne, statistic)), method: KsMethod::Asymptotic, degenerate })
    }
}

/// `P(D >= k/(nm))` under the null: one minus the probability that a
/// uniformly random interleaving stays strictly inside the band.
fn ks_exact_p(n: usize, m: usize, k: i64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let inside = |i: usize, j: usize| (i as i64 * m as i64 - j as i64 * n as i64).abs() < k;
    let mut prev = vec![0.0f64; m + 1];
    let mut cur = vec![0.0f64; m + 1];
    // prev/cur hold path probabilities for fixed i over j
    prev[0] = 1.0;
    for j in 1..=m {
        prev[j] = if inside(0, j) { prev[j - 1] * (m - j + 1) as f64 / (n + m - j + 1) as f64 } else { 0.0 };
    }
    for i in 1..=n {
        for j in 0..=m {
            if !inside(i, j) {
                cur[j] = 0.0;
                continue;
            }
            let left = n + m - (i - 1) - j;
            let from_up = prev[j] * (n - i + 1) as f64 / left as f64;
            let from_left = if j > 0 { cur[j - 1] * (m - j + 1) as f64 / (n + m - i - (j - 1)) as f64 } else { 0.0 };
            cur[j] = from_up + from_left;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    (1.0 - prev[m]).clamp(0.0, 1.0)
}

fn ks_lambda(ne: f64, d: f64) -> f64 {
    (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d
}

/// Kolmogorov survival function `Q(l) = 2 sum (-1)^{k-1} exp(-2 k^2 l^2)`.
pub fn kolmogorov_q(l: f64) -> f64 {
    if l < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=200 {
        let kf = f64::from(k);
        let term = (-2.0 * kf * kf * l * l).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS against a continuous CDF (asymptotic p-value).
pub fn ks_one_sample<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<KsResult, StatsError> {
    if sample.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let degenerate = x[0] == x[x.len() - 1];
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(ks_lambda(n, d)), method: KsMethod::Asymptotic, degenerate })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proportion {
    pub successes: u64,
    pub trials: u64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Wilson score interval at normal quantile `z`.
pub fn wilson(successes: u64, trials: u64, z: f64) -> Proportion {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Proportion { successes, trials, estimate: p, lower: centre - half, upper: centre + half }
}

/// Fixation frequency with a 95% Wilson interval.
pub fn fixation_estimate(outcomes: &[bool]) -> Proportion {
    wilson(outcomes.iter().filter(|&&b| b).count() as u64, outcomes.len() as u64, 1.959_963_984_540_054)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson goodness of fit; adjacent cells are pooled until each expected
/// count reaches 5.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> ChiSquareResult {
    let n: u64 = observed.iter().sum();
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&ob, &p) in observed.iter().zip(probs) {
        o += ob as f64;
        e += p * n as f64;
        if e >= 5.0 {
            cells.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => cells.push((o, e)),
        }
    }
    let stat: f64 = cells.iter().map(|(o, e)| if *e > 0.0 { (o - e) * (o - e) / e } else { 0.0 }).sum();
    let df = cells.len().saturating_sub(1);
    let p_value = if df == 0 { 1.0 } else { ChiSquared::new(df as f64).map_or(f64::NAN, |d| d.sf(stat)) };
    ChiSquareResult { statistic: stat, df, p_value }
}

/// Adds independent chi-square statistics and their degrees of freedom.
pub fn combine_chi_square(parts: &[ChiSquareResult]) -> ChiSquareResult {
    let statistic = parts.iter().map(|p| p.statistic).sum();
    let df = parts.iter().map(|p| p.df).sum();
    let p_value = if df == 0 { 1.0 } else { ChiSquared::new(df as f64).map_or(f64::NAN, |d| d.sf(statistic)) };
    ChiSquareResult { statistic, df, p_value }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Per-`N` replicate diagnostics for the scaling checks.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticSeries {
    pub n: u64,
    pub deviations: Vec<f64>,
    pub inseparability: Vec<f64>,
}

impl DiagnosticSeries {
    pub fn median_deviation(&self) -> f64 {
        median(&self.deviations)
    }

    pub fn median_inseparability(&self) -> f64 {
        median(&self.inseparability)
    }
}

/// True when every consecutive value is strictly smaller.
pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}
