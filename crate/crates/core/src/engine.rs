//! Exact event-driven simulation of the scaled particle system.
//!
//! Channels are aggregated per type: birth `(i,j)` at `n_i (N beta_ij(h) +
//! |b^s_ij|)`, death `i` at `n_i (N rho_i(h) + |d^s_i|)`, immigration `i` at
//! `N kappa_i(h)` and, on finite sets, migration `i` at `n_i max_s(-M_i[s,s])`.
//! The position-dependent and site-dependent parts are realized by thinning.
//! Continuous-domain positions are advanced lazily, only when a particle is
//! touched or observed.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::error::SimError;
use crate::model::{Dispersal, Kernel, ModelSpec, Particle, PopulationState};
use crate::poly::FlatPoly;
use crate::space::{BasisFn, Location, SpatialDomain};
use crate::stats::{clan_statistics, ClanStatistics};

/// Run parameters for one replicate.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub n: u64,
    /// Simulation horizon on the slow timescale.
    pub t_end: f64,
    /// Warm-up shift `t_N`.
    pub t_shift: f64,
    pub seed: u64,
    /// Sorted observation times in `[0, t_end]`.
    pub record_grid: Vec<f64>,
    pub observables: Vec<BasisFn>,
    pub clan_stats: bool,
}

impl SimConfig {
    /// Horizon `T + t_N` with `t_N = N^{-1/2}`; records at 0 and on
    /// `t_N + k * step` for `k = 0..=T/step`.
    pub fn new(n: u64, horizon: f64, step: f64, seed: u64) -> Self {
        let t_shift = 1.0 / (n as f64).sqrt();
        let mut cfg = Self {
            n,
            t_end: horizon + t_shift,
            t_shift,
            seed,
            record_grid: Vec::new(),
            observables: Vec::new(),
            clan_stats: false,
        };
        cfg.set_grid(horizon, step);
        cfg
    }

    /// Rebuilds the default grid after `t_shift` changes.
    pub fn set_grid(&mut self, horizon: f64, step: f64) {
        let k = (horizon / step).round() as usize;
        self.t_end = horizon + self.t_shift;
        self.record_grid = std::iter::once(0.0).chain((0..=k).map(|m| self.t_shift + m as f64 * step)).collect();
        if let Some(last) = self.record_grid.last_mut() {
            *last = self.t_end;
        }
        self.record_grid.dedup();
    }

    /// No recording except the final state.
    pub fn bare(n: u64, t_end: f64, seed: u64) -> Self {
        Self {
            n,
            t_end,
            t_shift: 1.0 / (n as f64).sqrt(),
            seed,
            record_grid: Vec::new(),
            observables: Vec::new(),
            clan_stats: false,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::Setup("N must be positive".into()));
        }
        if !(self.t_shift > 0.0) {
            return Err(SimError::Setup("t_N must be positive".into()));
        }
        if !(self.t_end >= 0.0) {
            return Err(SimError::Setup("T must be nonnegative".into()));
        }
        if self.record_grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(SimError::Setup("record grid must be sorted".into()));
        }
        if self.record_grid.iter().any(|&t| t < 0.0 || t > self.t_end) {
            return Err(SimError::Setup("record grid must lie in [0, T]".into()));
        }
        Ok(())
    }
}

/// One executed transition.
#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    LocalBirth { i: usize, j: usize, parent: usize },
    DispersedBirth { i: usize, j: usize, parent: usize, to: Location },
    Death { i: usize, particle: usize },
    Immigration { i: usize, loc: Location },
    /// Finite sets only.
    MigrationJump { i: usize, particle: usize, to: u32 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EventCounters {
    pub local_births: u64,
    pub dispersed_births: u64,
    pub deaths: u64,
    pub immigrations: u64,
    pub migrations: u64,
    /// Proposals discarded by thinning.
    pub rejected: u64,
}

impl EventCounters {
    pub fn total(&self) -> u64 {
        self.local_births + self.dispersed_births + self.deaths + self.immigrations + self.migrations
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EndReason {
    Completed,
    /// Total rate hit zero; the state is frozen from `t` on.
    Absorbed { t: f64 },
    /// An observer ended the run.
    Stopped { t: f64 },
}

/// Read-only view handed to observers after each event.
pub struct SimView<'a> {
    pub t: f64,
    pub pop: &'a PopulationState,
    /// Per type, per site counts (finite sets only).
    pub site_counts: Option<&'a [Vec<u64>]>,
}

pub trait Observer {
    /// Returning `true` ends the run after this event.
    fn after_event(&mut self, _event: &EventKind, _view: &SimView<'_>) -> bool {
        false
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Stops once every particle of every type sits on one site.
#[derive(Default)]
pub struct FixationObserver {
    pub fixed_site: Option<u32>,
}

impl Observer for FixationObserver {
    fn after_event(&mut self, _event: &EventKind, view: &SimView<'_>) -> bool {
        let Some(sc) = view.site_counts else { return false };
        let sites = sc.first().map_or(0, Vec::len);
        let mut occupied = None;
        for s in 0..sites {
            if sc.iter().any(|row| row[s] > 0) {
                if occupied.is_some() {
                    return false;
                }
                occupied = Some(s as u32);
            }
        }
        self.fixed_site = occupied;
        occupied.is_some()
    }
}

/// Grid observations of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub q: usize,
    pub n_scale: u64,
    pub t_shift: f64,
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
    /// Row layout: observable-major, then type.
    pub obs: Vec<Vec<f64>>,
    pub clans: Vec<ClanRow>,
    pub counters: EventCounters,
    pub end: EndReason,
}

/// Clan summary stored per grid time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClanRow {
    pub clans: u64,
    pub largest_share: f64,
    /// `sum_c sum_{a != b in c} |x_a - x_b|^2` (chord distance).
    pub pair_chord2: f64,
    /// `sum_c n_c (n_c - 1)`.
    pub pairs: f64,
    /// Mean squared geodesic distance to the centroid of the largest clan.
    pub centroid_disp2: f64,
}

impl ClanRow {
    const EMPTY: Self = Self { clans: 0, largest_share: f64::NAN, pair_chord2: 0.0, pairs: 0.0, centroid_disp2: f64::NAN };
}

impl From<&ClanStatistics> for ClanRow {
    fn from(c: &ClanStatistics) -> Self {
        Self {
            clans: c.weights.len() as u64,
            largest_share: c.largest_share,
            pair_chord2: c.pair_chord2,
            pairs: c.pairs,
            centroid_disp2: c.dominant_dispersion,
        }
    }
}

impl TrajectoryRecord {
    pub fn h(&self, row: usize) -> Vec<f64> {
        let n = self.n_scale as f64;
        self.counts[row].iter().map(|&c| c as f64 / n).collect()
    }

    /// `<f, mu_i>` at a row for the observable labelled `label`.
    pub fn observable(&self, row: usize, label: &str, i: usize) -> Option<f64> {
        let k = self.labels.iter().position(|l| l == label)?;
        Some(self.obs[row][k * self.q + i])
    }

    pub fn rows(&self) -> usize {
        self.times.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let end = match self.end {
            EndReason::Completed => "completed".to_string(),
            EndReason::Absorbed { t } => format!("absorbed@{t}"),
            EndReason::Stopped { t } => format!("stopped@{t}"),
        };
        let c = &self.counters;
        let _ = writeln!(s, "# N={} q={} t_shift={} end={}", self.n_scale, self.q, self.t_shift, end);
        let _ = writeln!(
            s,
            "# counters={},{},{},{},{},{}",
            c.local_births, c.dispersed_births, c.deaths, c.immigrations, c.migrations, c.rejected
        );
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=self.q).map(|i| format!("n_{i}")));
        cols.extend((1..=self.q).map(|i| format!("h_{i}")));
        for l in &self.labels {
            cols.extend((1..=self.q).map(|i| format!("{l}_{i}")));
        }
        if !self.clans.is_empty() {
            cols.extend(["clans", "largest_share", "pair_chord2", "pairs", "centroid_disp2"].map(String::from));
        }
        let _ = writeln!(s, "{}", cols.join(","));
        for r in 0..self.rows() {
            let mut row = vec![format!("{}", self.times[r])];
            row.extend(self.counts[r].iter().map(|c| c.to_string()));
            row.extend(self.h(r).iter().map(|x| format!("{x}")));
            row.extend(self.obs[r].iter().map(|x| format!("{x}")));
            if let Some(cr) = self.clans.get(r) {
                row.push(cr.clans.to_string());
                row.extend([cr.largest_share, cr.pair_chord2, cr.pairs, cr.centroid_disp2].iter().map(|x| format!("{x}")));
            }
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let meta = lines.next().ok_or("empty file")?;
        let field = |key: &str| -> Result<&str, String> {
            meta.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| format!("missing `{key}` in header"))
        };
        let n_scale: u64 = field("N")?.parse().map_err(|e| format!("N: {e}"))?;
        let q: usize = field("q")?.parse().map_err(|e| format!("q: {e}"))?;
        let t_shift: f64 = field("t_shift")?.parse().map_err(|e| format!("t_shift: {e}"))?;
        let end_s = field("end")?;
        let end = if end_s == "completed" {
            EndReason::Completed
        } else if let Some(t) = end_s.strip_prefix("absorbed@") {
            EndReason::Absorbed { t: t.parse().map_err(|e| format!("end: {e}"))? }
        } else if let Some(t) = end_s.strip_prefix("stopped@") {
            EndReason::Stopped { t: t.parse().map_err(|e| format!("end: {e}"))? }
        } else {
            return Err(format!("unknown end reason `{end_s}`"));
        };
        let cl = lines.next().ok_or("missing counters line")?;
        let nums: Vec<u64> = cl
            .strip_prefix("# counters=")
            .ok_or("malformed counters line")?
            .split(',')
            .map(|x| x.parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("counters: {e}"))?;
        if nums.len() != 6 {
            return Err("counters line needs 6 values".into());
        }
        let counters = EventCounters {
            local_births: nums[0],
            dispersed_births: nums[1],
            deaths: nums[2],
            immigrations: nums[3],
            migrations: nums[4],
            rejected: nums[5],
        };
        let header: Vec<&str> = lines.next().ok_or("missing column header")?.split(',').collect();
        let has_clans = header.last() == Some(&"centroid_disp2");
        let n_obs_cols = header.len() - 1 - 2 * q - if has_clans { 5 } else { 0 };
        if q == 0 || n_obs_cols % q != 0 {
            return Err("column count does not match q".into());
        }
        let labels: Vec<String> = (0..n_obs_cols / q)
            .map(|k| {
                let col = header[1 + 2 * q + k * q];
                col.rsplit_once('_').map_or(col, |(l, _)| l).to_string()
            })
            .collect();
        let mut rec = Self {
            q,
            n_scale,
            t_shift,
            labels,
            times: Vec::new(),
            counts: Vec::new(),
            obs: Vec::new(),
            clans: Vec::new(),
            counters,
            end,
        };
        for (ln, line) in lines.enumerate() {
            let v: Vec<&str> = line.split(',').collect();
            if v.len() != header.len() {
                return Err(format!("row {}: expected {} fields", ln + 1, header.len()));
            }
            let f = |x: &str| x.parse::<f64>().map_err(|e| format!("row {}: {e}", ln + 1));
            rec.times.push(f(v[0])?);
            rec.counts.push(v[1..=q].iter().map(|x| x.parse::<u64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?);
            rec.obs.push(v[1 + 2 * q..1 + 2 * q + n_obs_cols].iter().map(|x| f(x)).collect::<Result<_, _>>()?);
            if has_clans {
                let b = 1 + 2 * q + n_obs_cols;
                rec.clans.push(ClanRow {
                    clans: v[b].parse().map_err(|e| format!("row {}: {e}", ln + 1))?,
                    largest_share: f(v[b + 1])?,
                    pair_chord2: f(v[b + 2])?,
                    pairs: f(v[b + 3])?,
                    centroid_disp2: f(v[b + 4])?,
                });
            }
        }
        Ok(rec)
    }
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub record: TrajectoryRecord,
    pub state: PopulationState,
}

/// How clan labels are assigned at time 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClanInit {
    /// Every particle founds its own clan.
    Distinct,
    /// All particles share one clan.
    Single,
}

/// Initial law: `round(h0_i N)` particles of type `i` placed by `laws[i]`.
/// Site weights are allocated by largest remainder, so site fractions are
/// exact up to rounding.
#[derive(Clone, Debug)]
pub struct InitialLaw {
    pub h0: Vec<f64>,
    pub laws: Vec<Kernel>,
    pub clans: ClanInit,
}

impl InitialLaw {
    pub fn uniform(h0: Vec<f64>) -> Self {
        let q = h0.len();
        Self { h0, laws: vec![Kernel::Uniform; q], clans: ClanInit::Distinct }
    }

    pub fn sample<R: Rng + ?Sized>(&self, spec: &ModelSpec, n: u64, rng: &mut R) -> Result<PopulationState, SimError> {
        if self.h0.len() != spec.q || (self.laws.len() != spec.q && self.laws.len() != 1) {
            return Err(SimError::Setup(format!("initial law needs {} densities and laws", spec.q)));
        }
        let mut pop = PopulationState::empty(spec.q, n);
        let shared = rng.random::<f64>();
        for i in 0..spec.q {
            if !(self.h0[i] >= 0.0) {
                return Err(SimError::Setup("initial densities must be nonnegative".into()));
            }
            let count = (self.h0[i] * n as f64).round() as usize;
            let law = if self.laws.len() == 1 { &self.laws[0] } else { &self.laws[i] };
            let locs: Vec<Location> = match (law, &spec.domain) {
                (Kernel::Sites(w), SpatialDomain::FiniteSet { sites, .. }) => {
                    if w.ncols() != *sites {
                        return Err(SimError::Setup("initial site weights have the wrong length".into()));
                    }
                    allocate(count, w.row(0).iter().copied().collect::<Vec<_>>().as_slice())
                        .into_iter()
                        .enumerate()
                        .flat_map(|(s, c)| std::iter::repeat_n(Location::Site(s as u32), c))
                        .collect()
                }
                (Kernel::FreshClan, _) => {
                    return Err(SimError::Setup("fresh_clan is not a location law".into()));
                }
                (k, d) => (0..count).map(|_| k.sample(d, &Location::Site(0), rng).0).collect(),
            };
            pop.types[i] = locs
                .into_iter()
                .map(|loc| {
                    let clan = spec.track_clans.then(|| match self.clans {
                        ClanInit::Distinct => rng.random::<f64>(),
                        ClanInit::Single => shared,
                    });
                    Particle { loc, clan, last_t: 0.0 }
                })
                .collect();
        }
        Ok(pop)
    }
}

/// Largest-remainder split of `count` by weights.
fn allocate(count: usize, w: &[f64]) -> Vec<usize> {
    let total: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|x| count as f64 * x / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = count - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[k] += 1;
        rest -= 1;
    }
    out
}

/// Independent stream for replicate `rep` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Runs `f` over replicate indices on the worker pool, results in index order.
pub fn farm<T, F>(reps: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..reps).into_par_iter().map(f).collect()
}

/// One replicate from a sampled initial state.
pub fn simulate(spec: &ModelSpec, cfg: &SimConfig, init: &InitialLaw) -> Result<SimOutcome, SimError> {
    simulate_replicate(spec, cfg, init, 0, &mut NoObserver)
}

pub fn simulate_replicate<O: Observer>(
    spec: &ModelSpec,
    cfg: &SimConfig,
    init: &InitialLaw,
    rep: u64,
    obs: &mut O,
) -> Result<SimOutcome, SimError> {
    let mut rng = replicate_rng(cfg.seed, rep);
    let pop = init.sample(spec, cfg.n, &mut rng)?;
    simulate_from(spec, cfg, pop, &mut rng, obs)
}

/// Many replicates in parallel, merged in replicate order.
pub fn simulate_replicates(
    spec: &ModelSpec,
    cfg: &SimConfig,
    init: &InitialLaw,
    reps: usize,
) -> Vec<Result<TrajectoryRecord, SimError>> {
    farm(reps, |r| simulate_replicate(spec, cfg, init, r as u64, &mut NoObserver).map(|o| o.record))
}

struct MigrationTable {
    out: Vec<f64>,
    max_out: f64,
    /// Off-diagonal rates per source site.
    rows: DMatrix<f64>,
}

struct Engine<'a> {
    spec: &'a ModelSpec,
    q: usize,
    n: f64,
    beta: Vec<Vec<FlatPoly>>,
    rho: Vec<FlatPoly>,
    kappa: Vec<Option<FlatPoly>>,
    bs_bound: Vec<Vec<f64>>,
    ds_bound: Vec<f64>,
    diff: Vec<f64>,
    disp_prob: Vec<Vec<f64>>,
    local_sigma: f64,
    migration: Option<Vec<MigrationTable>>,
    sites: usize,
}

impl<'a> Engine<'a> {
    fn new(spec: &'a ModelSpec, n: u64) -> Self {
        let q = spec.q;
        let nf = n as f64;
        let bound = |f: &Option<crate::model::PositionFn>| f.as_ref().map_or(0.0, |f| f.bound);
        let diff = match &spec.domain {
            SpatialDomain::Circle { diffusion, .. }
            | SpatialDomain::Sphere { diffusion, .. }
            | SpatialDomain::Interval { diffusion } => diffusion.clone(),
            SpatialDomain::FiniteSet { .. } => vec![0.0; q],
        };
        let migration = match &spec.domain {
            SpatialDomain::FiniteSet { migration, .. } => Some(
                migration
                    .iter()
                    .map(|m| {
                        let out: Vec<f64> = (0..m.nrows()).map(|s| -m[(s, s)]).collect();
                        let max_out = out.iter().copied().fold(0.0, f64::max);
                        let rows = DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| if a == b { 0.0 } else { m[(a, b)] });
                        MigrationTable { out, max_out, rows }
                    })
                    .collect(),
            ),
            _ => None,
        };
        Self {
            spec,
            q,
            n: nf,
            beta: spec.beta.iter().map(|r| r.iter().map(|b| FlatPoly::new(&b.poly)).collect()).collect(),
            rho: spec.rho.iter().map(|r| FlatPoly::new(&r.poly)).collect(),
            kappa: spec.immigration.iter().map(|im| im.as_ref().map(|im| FlatPoly::new(&im.kappa.poly))).collect(),
            bs_bound: spec.b_s.iter().map(|r| r.iter().map(bound).collect()).collect(),
            ds_bound: spec.d_s.iter().map(bound).collect(),
            diff,
            disp_prob: spec.dispersal.iter().map(|r| r.iter().map(|d| d.as_ref().map_or(0.0, |d| d.prob(nf))).collect()).collect(),
            local_sigma: 1.0 / nf.sqrt(),
            migration,
            sites: spec.domain.sites().unwrap_or(0),
        }
    }

    /// Channel layout: births `q*q`, deaths `q`, immigration `q`, migration `q`.
    fn rates(&self, counts: &[usize], h: &[f64], out: &mut [f64]) {
        let q = self.q;
        for i in 0..q {
            let ni = counts[i] as f64;
            for j in 0..q {
                out[i * q + j] = ni * (self.n * self.beta[i][j].eval(h).max(0.0) + self.bs_bound[i][j]);
            }
            out[q * q + i] = ni * (self.n * self.rho[i].eval(h).max(0.0) + self.ds_bound[i]);
            out[q * q + q + i] = self.kappa[i].as_ref().map_or(0.0, |k| self.n * k.eval(h).max(0.0));
            out[q * q + 2 * q + i] = self.migration.as_ref().map_or(0.0, |m| ni * m[i].max_out);
        }
    }

    #[inline]
    fn advance<R: Rng + ?Sized>(&self, p: &mut Particle, i: usize, t: f64, rng: &mut R) {
        if self.diff[i] > 0.0 && t > p.last_t {
            self.spec.domain.diffuse(&mut p.loc, self.diff[i], t - p.last_t, rng);
        }
        p.last_t = t;
    }
}

#[inline]
fn site_of(loc: &Location) -> usize {
    match loc {
        Location::Site(s) => *s as usize,
        _ => 0,
    }
}

/// Simulates from a given state until `cfg.t_end` (times relative to 0).
pub fn simulate_from<R: Rng + ?Sized, O: Observer>(
    spec: &ModelSpec,
    cfg: &SimConfig,
    mut pop: PopulationState,
    rng: &mut R,
    obs: &mut O,
) -> Result<SimOutcome, SimError> {
    cfg.check()?;
    if pop.q() != spec.q || pop.n_scale != cfg.n {
        return Err(SimError::Setup("initial state does not match the model".into()));
    }
    if cfg.clan_stats && !spec.track_clans {
        return Err(SimError::Setup("clan statistics need clan tracking".into()));
    }
    let eng = Engine::new(spec, cfg.n);
    let q = spec.q;
    let finite = spec.domain.is_finite();
    let mut site_counts: Vec<Vec<u64>> = if finite { (0..q).map(|i| pop.site_counts(i, eng.sites)).collect() } else { Vec::new() };
    let needs_positions = cfg.clan_stats || cfg.observables.iter().any(|f| *f != BasisFn::Constant);
    let mut rec = TrajectoryRecord {
        q,
        n_scale: cfg.n,
        t_shift: cfg.t_shift,
        labels: cfg.observables.iter().map(BasisFn::label).collect(),
        times: Vec::new(),
        counts: Vec::new(),
        obs: Vec::new(),
        clans: Vec::new(),
        counters: EventCounters::default(),
        end: EndReason::Completed,
    };
    let mut counts = pop.counts();
    let mut h = vec![0.0; q];
    let mut rates = vec![0.0; q * q + 3 * q];
    let mut t = pop.t;
    let mut next_rec = 0usize;
    let h_norm = |counts: &[usize]| counts.iter().sum::<usize>() as f64 / eng.n;
    if h_norm(&counts) > spec.h_max {
        return Err(SimError::Explosion { t, norm: h_norm(&counts), h_max: spec.h_max });
    }

    let record = |pop: &mut PopulationState, rec: &mut TrajectoryRecord, tg: f64, rng: &mut R| {
        if needs_positions {
            for i in 0..q {
                for p in pop.types[i].iter_mut() {
                    eng.advance(p, i, tg, rng);
                }
            }
        }
        rec.times.push(tg);
        rec.counts.push(pop.types.iter().map(|v| v.len() as u64).collect());
        let mut row = Vec::with_capacity(cfg.observables.len() * q);
        for f in &cfg.observables {
            for i in 0..q {
                row.push(pop.integrate(&spec.domain, f, i));
            }
        }
        rec.obs.push(row);
        if cfg.clan_stats {
            let row = clan_statistics(&spec.domain, pop).map_or(ClanRow::EMPTY, |c| ClanRow::from(&c));
            rec.clans.push(row);
        }
    };

    loop {
        for (i, c) in counts.iter().enumerate() {
            h[i] = *c as f64 / eng.n;
        }
        eng.rates(&counts, &h, &mut rates);
        let total: f64 = rates.iter().sum();
        let t_next = if total > 0.0 {
            let e: f64 = Exp1.sample(rng);
            t + e / total
        } else {
            f64::INFINITY
        };
        while next_rec < cfg.record_grid.len() && cfg.record_grid[next_rec] <= t_next.min(cfg.t_end) {
            let tg = cfg.record_grid[next_rec];
            record(&mut pop, &mut rec, tg, rng);
            next_rec += 1;
        }
        if total <= 0.0 {
            rec.end = EndReason::Absorbed { t };
            t = cfg.t_end;
            break;
        }
        if t_next > cfg.t_end {
            t = cfg.t_end;
            break;
        }
        t = t_next;

        let mut u = rng.random::<f64>() * total;
        let mut ch = rates.len() - 1;
        for (k, r) in rates.iter().enumerate() {
            if u < *r {
                ch = k;
                break;
            }
            u -= r;
        }
        // rounding can land on a zero-rate tail channel
        while rates[ch] <= 0.0 && ch > 0 {
            ch -= 1;
        }

        let event = if ch < q * q {
            let (i, j) = (ch / q, ch % q);
            let k = rng.random_range(0..counts[i]);
            let base = eng.n * eng.beta[i][j].eval(&h).max(0.0);
            if let Some(bs) = &spec.b_s[i][j] {
                let p = &mut pop.types[i][k];
                eng.advance(p, i, t, rng);
                let accept = base + bs.eval(&spec.domain, &p.loc, &h);
                if rng.random::<f64>() * (base + eng.bs_bound[i][j]) >= accept {
                    rec.counters.rejected += 1;
                    continue;
                }
            }
            let mut parent = pop.types[i][k];
            eng.advance(&mut parent, i, t, rng);
            pop.types[i][k] = parent;
            let mut child = Particle { loc: parent.loc, clan: parent.clan, last_t: t };
            let dispersed = eng.disp_prob[i][j] > 0.0 && rng.random::<f64>() < eng.disp_prob[i][j];
            let ev = if dispersed {
                match spec.dispersal[i][j].as_ref().expect("dispersal probability implies a mechanism") {
                    Dispersal::Rare { kernel, .. } => {
                        let (to, fresh) = kernel.sample(&spec.domain, &parent.loc, rng);
                        child.loc = to;
                        if fresh && child.clan.is_some() {
                            child.clan = Some(rng.random::<f64>());
                        }
                    }
                    Dispersal::Local { s } => {
                        spec.domain.gaussian_step(&mut child.loc, s * eng.local_sigma, rng);
                    }
                }
                rec.counters.dispersed_births += 1;
                EventKind::DispersedBirth { i, j, parent: k, to: child.loc }
            } else {
                rec.counters.local_births += 1;
                EventKind::LocalBirth { i, j, parent: k }
            };
            if finite {
                site_counts[j][site_of(&child.loc)] += 1;
            }
            pop.types[j].push(child);
            counts[j] += 1;
            ev
        } else if ch < q * q + q {
            let i = ch - q * q;
            let k = rng.random_range(0..counts[i]);
            if let Some(ds) = &spec.d_s[i] {
                let base = eng.n * eng.rho[i].eval(&h).max(0.0);
                let p = &mut pop.types[i][k];
                eng.advance(p, i, t, rng);
                let accept = base + ds.eval(&spec.domain, &p.loc, &h);
                if rng.random::<f64>() * (base + eng.ds_bound[i]) >= accept {
                    rec.counters.rejected += 1;
                    continue;
                }
            }
            let gone = pop.types[i].swap_remove(k);
            if finite {
                site_counts[i][site_of(&gone.loc)] -= 1;
            }
            counts[i] -= 1;
            rec.counters.deaths += 1;
            EventKind::Death { i, particle: k }
        } else if ch < q * q + 2 * q {
            let i = ch - q * q - q;
            let law = &spec.immigration[i].as_ref().expect("positive rate implies immigration").law;
            let (loc, _) = law.sample(&spec.domain, &Location::Site(0), rng);
            let clan = spec.track_clans.then(|| rng.random::<f64>());
            if finite {
                site_counts[i][site_of(&loc)] += 1;
            }
            pop.types[i].push(Particle { loc, clan, last_t: t });
            counts[i] += 1;
            rec.counters.immigrations += 1;
            EventKind::Immigration { i, loc }
        } else {
            let i = ch - q * q - 2 * q;
            let tab = &eng.migration.as_ref().expect("migration channel on a finite set")[i];
            let k = rng.random_range(0..counts[i]);
            let s = site_of(&pop.types[i][k].loc);
            if rng.random::<f64>() * tab.max_out >= tab.out[s] {
                rec.counters.rejected += 1;
                continue;
            }
            let mut u = rng.random::<f64>() * tab.out[s];
            let mut to = s;
            for d in 0..tab.rows.ncols() {
                let r = tab.rows[(s, d)];
                if r > 0.0 {
                    to = d;
                    if u < r {
                        break;
                    }
                    u -= r;
                }
            }
            pop.types[i][k].loc = Location::Site(to as u32);
            site_counts[i][s] -= 1;
            site_counts[i][to] += 1;
            rec.counters.migrations += 1;
            EventKind::MigrationJump { i, particle: k, to: to as u32 }
        };

        let norm = h_norm(&counts);
        if norm > spec.h_max {
            return Err(SimError::Explosion { t, norm, h_max: spec.h_max });
        }
        let view = SimView { t, pop: &pop, site_counts: finite.then_some(site_counts.as_slice()) };
        if obs.after_event(&event, &view) {
            rec.end = EndReason::Stopped { t };
            break;
        }
    }
    // absorbed runs stay frozen: fill the rest of the grid
    if matches!(rec.end, EndReason::Absorbed { .. }) {
        while next_rec < cfg.record_grid.len() {
            let tg = cfg.record_grid[next_rec];
            record(&mut pop, &mut rec, tg, rng);
            next_rec += 1;
        }
    }
    pop.t = t;
    for i in 0..q {
        for p in pop.types[i].iter_mut() {
            eng.advance(p, i, t, rng);
        }
    }
    Ok(SimOutcome { record: rec, state: pop })
}

/// Coefficient function `c(h)` of a test-function factor.
pub type Coef = std::sync::Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One factor `sum_i c_i(h) <f_i, mu_i>` with site tables `f_i`.
#[derive(Clone)]
pub struct TestFactor {
    pub tables: Vec<Vec<f64>>,
    pub coeffs: Vec<Coef>,
}

/// Product of factors on a finite domain.
#[derive(Clone)]
pub struct TestFunction {
    pub label: String,
    pub factors: Vec<TestFactor>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TestFunction({}, {} factors)", self.label, self.factors.len())
    }
}

fn unit(_: &[f64]) -> f64 {
    1.0
}

impl TestFunction {
    /// `F = h_i`.
    pub fn density(i: usize, q: usize, sites: usize) -> Self {
        Self::site_mass_table(format!("h_{}", i + 1), i, q, vec![1.0; sites])
    }

    /// `F = <f, mu_i>` for a site table `f`.
    pub fn site_mass_table(label: String, i: usize, q: usize, f: Vec<f64>) -> Self {
        let sites = f.len();
        let tables = (0..q).map(|k| if k == i { f.clone() } else { vec![0.0; sites] }).collect();
        Self { label, factors: vec![TestFactor { tables, coeffs: vec![std::sync::Arc::new(unit); q] }] }
    }

    /// Densities, first-site masses and their pairwise products for every
    /// type; the set exercised by `compare` and the consistency checks.
    pub fn standard_set(q: usize, sites: usize) -> Vec<Self> {
        let first = |i: usize| {
            let f = (0..sites).map(|s| if s == 0 { 1.0 } else { 0.0 }).collect();
            Self::site_mass_table(format!("m{}_{}", 1, i + 1), i, q, f)
        };
        let mut set: Vec<Self> = (0..q).map(|i| Self::density(i, q, sites)).collect();
        set.extend((0..q).map(first));
        set.push(first(0).times(Self::density(0, q, sites)));
        if q > 1 {
            set.push(first(0).times(first(1)));
        }
        set
    }

    /// Product with another test function.
    pub fn times(mut self, other: Self) -> Self {
        self.label = format!("{}*{}", self.label, other.label);
        self.factors.extend(other.factors);
        self
    }

    pub fn eval_counts(&self, sc: &[Vec<u64>], n: f64) -> f64 {
        let h: Vec<f64> = sc.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
        self.factors
            .iter()
            .map(|fac| {
                (0..sc.len())
                    .map(|i| {
                        let m: f64 = sc[i].iter().zip(&fac.tables[i]).map(|(&c, f)| c as f64 * f).sum();
                        (fac.coeffs[i])(&h) * m / n
                    })
                    .sum::<f64>()
            })
            .product()
    }

    pub fn eval(&self, pop: &PopulationState, sites: usize) -> f64 {
        let sc: Vec<Vec<u64>> = (0..pop.q()).map(|i| pop.site_counts(i, sites)).collect();
        self.eval_counts(&sc, pop.n_scale as f64)
    }
}

/// Generator split by mechanism.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorParts {
    /// `N`-scaled births and deaths (offspring at the parent site).
    pub regulation: f64,
    /// Position-dependent births and deaths.
    pub selection: f64,
    /// Offspring displacement.
    pub dispersal: f64,
    pub immigration: f64,
    pub migration: f64,
}

impl GeneratorParts {
    pub fn total(&self) -> f64 {
        self.regulation + self.selection + self.dispersal + self.immigration + self.migration
    }
}

/// Exact `A^N F(mu)` on a finite domain by enumerating every transition.
pub fn generator_apply(spec: &ModelSpec, f: &TestFunction, pop: &PopulationState) -> Result<f64, SimError> {
    generator_parts(spec, f, pop).map(|p| p.total())
}

pub fn generator_parts(spec: &ModelSpec, f: &TestFunction, pop: &PopulationState) -> Result<GeneratorParts, SimError> {
    let SpatialDomain::FiniteSet { sites, migration } = &spec.domain else {
        return Err(SimError::NeedsFiniteSet);
    };
    let (k, q) = (*sites, spec.q);
    let n = pop.n_scale as f64;
    let mut sc: Vec<Vec<u64>> = (0..q).map(|i| pop.site_counts(i, k)).collect();
    let h: Vec<f64> = sc.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
    let f0 = f.eval_counts(&sc, n);
    let delta = |sc: &mut Vec<Vec<u64>>, add: Option<(usize, usize)>, sub: Option<(usize, usize)>| {
        if let Some((i, s)) = add {
            sc[i][s] += 1;
        }
        if let Some((i, s)) = sub {
            sc[i][s] -= 1;
        }
        let v = f.eval_counts(sc, n) - f0;
        if let Some((i, s)) = add {
            sc[i][s] -= 1;
        }
        if let Some((i, s)) = sub {
            sc[i][s] += 1;
        }
        v
    };
    let mut parts = GeneratorParts::default();
    for i in 0..q {
        for s in 0..k {
            let cnt = sc[i][s] as f64;
            if cnt == 0.0 {
                continue;
            }
            let loc = Location::Site(s as u32);
            for j in 0..q {
                let base = n * spec.beta[i][j].eval(&h).max(0.0);
                let sel = spec.b_s[i][j].as_ref().map_or(0.0, |g| g.eval(&spec.domain, &loc, &h));
                if base + sel == 0.0 {
                    continue;
                }
                let here = delta(&mut sc, Some((j, s)), None);
                parts.regulation += cnt * base * here;
                parts.selection += cnt * sel * here;
                if let Some(Dispersal::Rare { c, kernel }) = &spec.dispersal[i][j] {
                    let p = (c / n).min(1.0);
                    let moved: f64 = (0..k)
                        .map(|d| {
                            let w = kernel.site_prob(k, s, d);
                            if w == 0.0 || d == s {
                                0.0
                            } else {
                                w * (delta(&mut sc, Some((j, d)), None) - here)
                            }
                        })
                        .sum();
                    parts.dispersal += cnt * (base + sel) * p * moved;
                }
            }
            let base = n * spec.rho[i].eval(&h).max(0.0);
            let sel = spec.d_s[i].as_ref().map_or(0.0, |g| g.eval(&spec.domain, &loc, &h));
            if base + sel > 0.0 {
                let gone = delta(&mut sc, None, Some((i, s)));
                parts.regulation += cnt * base * gone;
                parts.selection += cnt * sel * gone;
            }
            for d in 0..k {
                let r = migration[i][(s, d)];
                if d != s && r > 0.0 {
                    parts.migration += cnt * r * delta(&mut sc, Some((i, d)), Some((i, s)));
                }
            }
        }
        if let Some(im) = &spec.immigration[i] {
            let rate = n * im.kappa.eval(&h).max(0.0);
            if rate > 0.0 {
                for d in 0..k {
                    let w = im.law.site_prob(k, 0, d);
                    if w > 0.0 {
                        parts.immigration += rate * w * delta(&mut sc, Some((i, d)), None);
                    }
                }
            }
        }
    }
    Ok(parts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyResult {
    pub z: f64,
    /// Monte-Carlo estimate of `E[F(mu_D) - F(mu_0)] / D`.
    pub empirical: f64,
    pub analytic: f64,
    pub stderr: f64,
}

/// Monte-Carlo check that [`simulate_from`] realizes [`generator_apply`].
pub fn generator_consistency_test(
    spec: &ModelSpec,
    f: &TestFunction,
    pop0: &PopulationState,
    dt: f64,
    reps: usize,
    seed: u64,
) -> Result<ConsistencyResult, SimError> {
    let sites = spec.domain.sites().ok_or(SimError::NeedsFiniteSet)?;
    let analytic = generator_apply(spec, f, pop0)?;
    let f0 = f.eval(pop0, sites);
    let cfg = SimConfig::bare(pop0.n_scale, dt, seed);
    let mut start = pop0.clone();
    start.t = 0.0;
    let diffs: Vec<Result<f64, SimError>> = farm(reps, |r| {
        let mut rng = replicate_rng(seed, r as u64);
        simulate_from(spec, &cfg, start.clone(), &mut rng, &mut NoObserver).map(|o| f.eval(&o.state, sites) - f0)
    });
    let diffs = diffs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let (mean, se) = crate::stats::mean_and_stderr(&diffs);
    let empirical = mean / dt;
    let num = empirical - analytic;
    let z = if num == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY.copysign(num)
    } else {
        num / (se / dt)
    };
    Ok(ConsistencyResult { z, empirical, analytic, stderr: se / dt })
}
