//! Populations, model specifications and the density map.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::ModelError;
use crate::poly::RateFn;
use crate::space::{probe_locations, sample_vmf, BasisFn, Location, SpatialDomain};

/// One individual: where it is, its clan label, and when its position was
/// last brought up to date.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub loc: Location,
    pub clan: Option<f64>,
    pub last_t: f64,
}

/// Atomic measure with mass `1/N` per particle, one list per type.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationState {
    pub n_scale: u64,
    pub types: Vec<Vec<Particle>>,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityVector(pub Vec<f64>);

impl DensityVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().map(|x| x.abs()).sum()
    }
}

impl PopulationState {
    pub fn empty(q: usize, n_scale: u64) -> Self {
        Self { n_scale, types: vec![Vec::new(); q], t: 0.0 }
    }

    pub fn q(&self) -> usize {
        self.types.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.types.iter().map(Vec::len).collect()
    }

    pub fn clans_enabled(&self) -> bool {
        self.types.iter().flatten().next().is_some_and(|p| p.clan.is_some())
    }

    /// `<f, mu_i>` for a basis function `f`.
    pub fn integrate(&self, domain: &SpatialDomain, f: &BasisFn, i: usize) -> f64 {
        let s: f64 = self.types[i].iter().map(|p| f.eval(domain, &p.loc)).sum();
        s / self.n_scale as f64
    }

    /// Per-site particle counts of type `i` on a finite domain.
    pub fn site_counts(&self, i: usize, sites: usize) -> Vec<u64> {
        let mut c = vec![0; sites];
        for p in &self.types[i] {
            if let Location::Site(s) = p.loc {
                c[s as usize] += 1;
            }
        }
        c
    }
}

/// `H(mu)`: per-type particle counts divided by `N`.
pub fn density_map(pop: &PopulationState) -> DensityVector {
    let n = pop.n_scale as f64;
    DensityVector(pop.types.iter().map(|v| v.len() as f64 / n).collect())
}

/// Bounded position-dependent rate `x, h -> sum_k phi_k(x) c_k(h)`.
#[derive(Clone, Debug)]
pub struct PositionFn {
    pub terms: Vec<(BasisFn, RateFn)>,
    /// Declared sup-norm bound over `E x [0, H_max]^q`.
    pub bound: f64,
}

impl PositionFn {
    #[inline]
    pub fn eval(&self, domain: &SpatialDomain, loc: &Location, h: &[f64]) -> f64 {
        self.terms.iter().map(|(b, c)| b.eval(domain, loc) * c.eval(h)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// Uniform law on the domain.
    Uniform,
    /// Row-stochastic site transition matrix (finite sets).
    Sites(DMatrix<f64>),
    /// Location unchanged, fresh uniform clan label (infinitely many alleles).
    FreshClan,
    VonMisesFisher { mean: [f64; 3], kappa: f64 },
}

impl Kernel {
    /// Draws a destination from `from`; returns whether a fresh clan is needed.
    pub fn sample<R: Rng + ?Sized>(&self, domain: &SpatialDomain, from: &Location, rng: &mut R) -> (Location, bool) {
        match self {
            Self::Uniform => (domain.sample_uniform(rng), false),
            Self::Sites(m) => {
                let row = match from {
                    Location::Site(s) if m.nrows() > 1 => *s as usize,
                    _ => 0,
                };
                (Location::Site(sample_row(m, row, rng) as u32), false)
            }
            Self::FreshClan => (*from, true),
            Self::VonMisesFisher { mean, kappa } => {
                let r = match domain {
                    SpatialDomain::Sphere { radius, .. } => *radius,
                    _ => 1.0,
                };
                let u = sample_vmf(mean, *kappa, rng);
                (Location::Point([u[0] * r, u[1] * r, u[2] * r]), false)
            }
        }
    }

    /// Transition probability between sites (finite sets only).
    pub fn site_prob(&self, sites: usize, from: usize, to: usize) -> f64 {
        match self {
            Self::Uniform => 1.0 / sites as f64,
            Self::Sites(m) => {
                let row = if m.nrows() > 1 { from } else { 0 };
                m[(row, to)]
            }
            Self::FreshClan => f64::from(from == to),
            Self::VonMisesFisher { .. } => 0.0,
        }
    }
}

fn sample_row<R: Rng + ?Sized>(m: &DMatrix<f64>, row: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for c in 0..m.ncols() {
        acc += m[(row, c)];
        if u < acc {
            return c;
        }
    }
    // rounding: fall back to the last column with positive weight
    (0..m.ncols()).rev().find(|&c| m[(row, c)] > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dispersal {
    /// `p^N = min(1, c/N)`, destination from `kernel`. `C f = c (K f - f)`.
    Rare { c: f64, kernel: Kernel },
    /// `p^N = 1`, Gaussian step of scale `s/sqrt(N)`. `C = (s^2/2) Δ`.
    Local { s: f64 },
}

impl Dispersal {
    #[inline]
    pub fn prob(&self, n: f64) -> f64 {
        match self {
            Self::Rare { c, .. } => (c / n).min(1.0),
            Self::Local { .. } => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Immigration {
    /// Total immigration intensity is `N kappa(h)`.
    pub kappa: RateFn,
    /// Declared `C` in `kappa(h) <= C (1 + |h|_1)`.
    pub growth_bound: f64,
    pub law: Kernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mechanism {
    PositionDependent,
    Dispersal,
    Immigration,
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub q: usize,
    pub domain: SpatialDomain,
    /// `beta[i][j]`: rate at which a type-`i` individual bears type `j`.
    pub beta: Vec<Vec<RateFn>>,
    pub rho: Vec<RateFn>,
    pub b_s: Vec<Vec<Option<PositionFn>>>,
    pub d_s: Vec<Option<PositionFn>>,
    pub dispersal: Vec<Vec<Option<Dispersal>>>,
    pub immigration: Vec<Option<Immigration>>,
    pub h_max: f64,
    pub degree_cap: u32,
    pub track_clans: bool,
    /// Starting point for the equilibrium search.
    pub eq_guess: Vec<f64>,
}

impl ModelSpec {
    /// Bare spec with the given rates and no optional mechanisms.
    pub fn basic(domain: SpatialDomain, beta: Vec<Vec<RateFn>>, rho: Vec<RateFn>, h_max: f64) -> Self {
        let q = rho.len();
        Self {
            q,
            domain,
            beta,
            rho,
            b_s: vec![vec![None; q]; q],
            d_s: vec![None; q],
            dispersal: vec![vec![None; q]; q],
            immigration: vec![None; q],
            h_max,
            degree_cap: 8,
            track_clans: false,
            eq_guess: vec![1.0; q],
        }
    }

    pub fn mechanisms(&self) -> Vec<Mechanism> {
        let mut m = Vec::new();
        if self.b_s.iter().flatten().any(Option::is_some) || self.d_s.iter().any(Option::is_some) {
            m.push(Mechanism::PositionDependent);
        }
        if self.dispersal.iter().flatten().any(Option::is_some) {
            m.push(Mechanism::Dispersal);
        }
        if self.immigration.iter().any(Option::is_some) {
            m.push(Mechanism::Immigration);
        }
        m
    }

    /// Structural checks that do not need the density flow.
    pub fn check_structure(&self) -> Result<(), ModelError> {
        let q = self.q;
        if q == 0 {
            return Err(ModelError::field("q", "need at least one type"));
        }
        if self.beta.len() != q || self.beta.iter().any(|r| r.len() != q) {
            return Err(ModelError::field("beta", format!("must be {q}x{q}")));
        }
        if self.rho.len() != q {
            return Err(ModelError::field("rho", format!("must have {q} entries")));
        }
        if !(self.h_max > 0.0) {
            return Err(ModelError::field("h_max", "must be positive"));
        }
        if self.eq_guess.len() != q {
            return Err(ModelError::field("equilibrium_guess", format!("must have {q} entries")));
        }
        self.domain.validate(q)?;
        let all_rates = self
            .beta
            .iter()
            .flatten()
            .map(|r| ("beta", r))
            .chain(self.rho.iter().map(|r| ("rho", r)))
            .chain(self.immigration.iter().flatten().map(|im| ("kappa", &im.kappa)));
        for (name, r) in all_rates {
            if r.poly.nvars() != q {
                return Err(ModelError::field(name, "polynomial has the wrong variable count"));
            }
            if r.poly.degree() > self.degree_cap {
                return Err(ModelError::field(
                    name,
                    format!("'{}' has degree {} above the cap {}", r.source, r.poly.degree(), self.degree_cap),
                ));
            }
        }
        for (i, row) in self.dispersal.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                match d {
                    Some(Dispersal::Local { s }) => {
                        if self.domain.is_finite() {
                            return Err(ModelError::field(
                                format!("dispersal[{i}][{j}]"),
                                "local Gaussian dispersal needs a continuous domain",
                            ));
                        }
                        if !(*s > 0.0) {
                            return Err(ModelError::field(format!("dispersal[{i}][{j}]"), "scale must be positive"));
                        }
                    }
                    Some(Dispersal::Rare { c, kernel }) => {
                        if !(*c >= 0.0) {
                            return Err(ModelError::field(format!("dispersal[{i}][{j}]"), "c must be nonnegative"));
                        }
                        self.check_kernel(kernel, &format!("dispersal[{i}][{j}]"))?;
                    }
                    None => {}
                }
            }
        }
        for (i, im) in self.immigration.iter().enumerate() {
            if let Some(im) = im {
                if im.law == Kernel::FreshClan {
                    return Err(ModelError::field(format!("immigration[{i}]"), "law cannot be fresh_clan"));
                }
                self.check_kernel(&im.law, &format!("immigration[{i}]"))?;
            }
        }
        let pos_fns = self.b_s.iter().flatten().chain(self.d_s.iter()).flatten();
        for pf in pos_fns {
            for (b, c) in &pf.terms {
                if !b.supported_on(&self.domain) {
                    return Err(ModelError::field("b_s/d_s", format!("basis {b:?} not defined on this domain")));
                }
                if c.poly.nvars() != q {
                    return Err(ModelError::field("b_s/d_s", "coefficient has the wrong variable count"));
                }
            }
            if !(pf.bound >= 0.0) || !pf.bound.is_finite() {
                return Err(ModelError::field("b_s/d_s", "declared sup-norm bound must be finite and >= 0"));
            }
        }
        Ok(())
    }

    fn check_kernel(&self, k: &Kernel, field: &str) -> Result<(), ModelError> {
        match (k, &self.domain) {
            (Kernel::Sites(m), SpatialDomain::FiniteSet { sites, .. }) => {
                if m.ncols() != *sites || (m.nrows() != 1 && m.nrows() != *sites) {
                    return Err(ModelError::field(field, "site weights have the wrong shape"));
                }
                for r in 0..m.nrows() {
                    let s: f64 = m.row(r).iter().sum();
                    if m.row(r).iter().any(|w| *w < 0.0) || (s - 1.0).abs() > 1e-9 {
                        return Err(ModelError::field(field, "site weights must be a probability vector"));
                    }
                }
                Ok(())
            }
            (Kernel::Sites(_), _) => Err(ModelError::field(field, "site weights need a finite-set domain")),
            (Kernel::VonMisesFisher { mean, kappa }, SpatialDomain::Sphere { .. }) => {
                if dotn(mean) == 0.0 || *kappa < 0.0 {
                    return Err(ModelError::field(field, "von Mises-Fisher needs a nonzero mean and kappa >= 0"));
                }
                Ok(())
            }
            (Kernel::VonMisesFisher { .. }, _) => Err(ModelError::field(field, "von Mises-Fisher needs a sphere")),
            _ => Ok(()),
        }
    }

    /// Dense grid over `[0, H_max]^q` used for the nonnegativity checks.
    pub fn grid_points(&self) -> Vec<Vec<f64>> {
        let per_axis = match self.q {
            1 => 401,
            2 => 61,
            3 => 21,
            4 => 11,
            _ => 5,
        };
        let mut pts = Vec::new();
        let mut idx = vec![0usize; self.q];
        loop {
            pts.push(idx.iter().map(|&k| self.h_max * k as f64 / (per_axis - 1) as f64).collect());
            let mut d = 0;
            loop {
                if d == self.q {
                    return pts;
                }
                idx[d] += 1;
                if idx[d] < per_axis {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }

    /// Probe locations for sup-norm checks of the position-dependent rates.
    pub fn probe_locations(&self) -> Vec<Location> {
        probe_locations(&self.domain, 64)
    }
}

fn dotn(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
