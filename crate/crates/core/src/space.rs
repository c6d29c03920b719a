//! Compact spatial domains, locations on them and the migration motions.
//!
//! Continuous domains move particles by Brownian motion with generator
//! `(D/2)Δ`. Circle and interval increments are sampled exactly (wrapped and
//! reflected Gaussians); on the sphere a geodesic Gaussian step is applied in
//! substeps small enough that `D dt / R^2 <= SPHERE_SUBSTEP`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

use crate::error::ModelError;

/// Largest `D dt / R^2` taken in one geodesic step on the sphere.
pub const SPHERE_SUBSTEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub enum SpatialDomain {
    /// `K` sites with one migration rate matrix per type.
    FiniteSet { sites: usize, migration: Vec<DMatrix<f64>> },
    Circle { circumference: f64, diffusion: Vec<f64> },
    Sphere { radius: f64, diffusion: Vec<f64> },
    /// The unit interval `[0,1]` with reflecting boundaries.
    Interval { diffusion: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Location {
    Site(u32),
    /// Arc-length coordinate in `[0, circumference)`.
    Arc(f64),
    /// Point on the sphere of radius `R` (norm `R`).
    Point([f64; 3]),
    Unit(f64),
}

impl SpatialDomain {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::FiniteSet { .. } => "finite_set",
            Self::Circle { .. } => "circle",
            Self::Sphere { .. } => "sphere",
            Self::Interval { .. } => "interval",
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Self::FiniteSet { .. })
    }

    pub fn sites(&self) -> Option<usize> {
        match self {
            Self::FiniteSet { sites, .. } => Some(*sites),
            _ => None,
        }
    }

    pub fn validate(&self, q: usize) -> Result<(), ModelError> {
        let pos = |v: &[f64], what: &str| -> Result<(), ModelError> {
            if v.len() != q {
                return Err(ModelError::field(what, format!("expected {q} entries, got {}", v.len())));
            }
            if v.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
                return Err(ModelError::field(what, "diffusion coefficients must be strictly positive"));
            }
            Ok(())
        };
        match self {
            Self::FiniteSet { sites, migration } => {
                if *sites == 0 {
                    return Err(ModelError::field("domain.sites", "need at least one site"));
                }
                if migration.len() != q {
                    return Err(ModelError::field("domain.migration", format!("expected {q} matrices")));
                }
                for (i, m) in migration.iter().enumerate() {
                    if m.nrows() != *sites || m.ncols() != *sites {
                        return Err(ModelError::field(format!("domain.migration[{i}]"), "wrong shape"));
                    }
                    for r in 0..*sites {
                        let mut row = 0.0;
                        for c in 0..*sites {
                            if r != c && m[(r, c)] < 0.0 {
                                return Err(ModelError::field(
                                    format!("domain.migration[{i}]"),
                                    "off-diagonal rates must be nonnegative",
                                ));
                            }
                            row += m[(r, c)];
                        }
                        if row.abs() > 1e-12 * (1.0 + m[(r, r)].abs()) {
                            return Err(ModelError::field(
                                format!("domain.migration[{i}]"),
                                format!("row {r} sums to {row}, expected 0"),
                            ));
                        }
                    }
                }
                Ok(())
            }
            Self::Circle { circumference, diffusion } => {
                if !(*circumference > 0.0) {
                    return Err(ModelError::field("domain.circumference", "must be positive"));
                }
                pos(diffusion, "domain.diffusion")
            }
            Self::Sphere { radius, diffusion } => {
                if !(*radius > 0.0) {
                    return Err(ModelError::field("domain.radius", "must be positive"));
                }
                pos(diffusion, "domain.diffusion")
            }
            Self::Interval { diffusion } => pos(diffusion, "domain.diffusion"),
        }
    }

    /// Checks that `loc` is a valid coordinate on this domain.
    pub fn contains(&self, loc: &Location) -> bool {
        match (self, loc) {
            (Self::FiniteSet { sites, .. }, Location::Site(s)) => (*s as usize) < *sites,
            (Self::Circle { circumference, .. }, Location::Arc(a)) => *a >= 0.0 && a < circumference,
            (Self::Sphere { radius, .. }, Location::Point(p)) => {
                let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                (n / radius - 1.0).abs() < 1e-12
            }
            (Self::Interval { .. }, Location::Unit(u)) => (0.0..=1.0).contains(u),
            _ => false,
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Location {
        match self {
            Self::FiniteSet { sites, .. } => Location::Site(rng.random_range(0..*sites) as u32),
            Self::Circle { circumference, .. } => Location::Arc(rng.random::<f64>() * circumference),
            Self::Sphere { radius, .. } => {
                let u: [f64; 3] = UnitSphere.sample(rng);
                Location::Point([u[0] * radius, u[1] * radius, u[2] * radius])
            }
            Self::Interval { .. } => Location::Unit(rng.random::<f64>()),
        }
    }

    /// Brownian displacement with generator `(d/2)Δ` over time `dt`.
    pub fn diffuse<R: Rng + ?Sized>(&self, loc: &mut Location, d: f64, dt: f64, rng: &mut R) {
        if dt <= 0.0 || d <= 0.0 {
            return;
        }
        match (self, loc) {
            (Self::Circle { circumference, .. }, Location::Arc(a)) => {
                let z: f64 = rng.sample(StandardNormal);
                *a = wrap(*a + (d * dt).sqrt() * z, *circumference);
            }
            (Self::Interval { .. }, Location::Unit(u)) => {
                let z: f64 = rng.sample(StandardNormal);
                *u = reflect_unit(*u + (d * dt).sqrt() * z);
            }
            (Self::Sphere { radius, .. }, Location::Point(p)) => {
                sphere_diffuse(p, *radius, d, dt, rng);
            }
            _ => {}
        }
    }

    /// Gaussian step of standard deviation `sigma` per tangent coordinate.
    pub fn gaussian_step<R: Rng + ?Sized>(&self, loc: &mut Location, sigma: f64, rng: &mut R) {
        // A step of variance sigma^2 is Brownian motion run for sigma^2 with d = 1.
        self.diffuse(loc, 1.0, sigma * sigma, rng);
    }

    /// Geodesic distance between two locations (0/1 metric on finite sets).
    pub fn distance(&self, a: &Location, b: &Location) -> f64 {
        match (self, a, b) {
            (Self::FiniteSet { .. }, Location::Site(x), Location::Site(y)) => f64::from(x != y),
            (Self::Circle { circumference, .. }, Location::Arc(x), Location::Arc(y)) => {
                let d = (x - y).abs() % circumference;
                d.min(circumference - d)
            }
            (Self::Sphere { radius, .. }, Location::Point(x), Location::Point(y)) => {
                let c = (dot(x, y) / (radius * radius)).clamp(-1.0, 1.0);
                radius * c.acos()
            }
            (Self::Interval { .. }, Location::Unit(x), Location::Unit(y)) => (x - y).abs(),
            _ => f64::NAN,
        }
    }
}

pub fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn wrap(x: f64, l: f64) -> f64 {
    let r = x.rem_euclid(l);
    // rem_euclid can round up to exactly l for tiny negative inputs
    if r >= l {
        0.0
    } else {
        r
    }
}

/// Folds the real line onto `[0,1]` by reflection at both ends.
pub fn reflect_unit(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    if r > 1.0 {
        2.0 - r
    } else {
        r
    }
}

fn sphere_diffuse<R: Rng + ?Sized>(p: &mut [f64; 3], radius: f64, d: f64, dt: f64, rng: &mut R) {
    let total = d * dt / (radius * radius);
    let steps = (total / SPHERE_SUBSTEP).ceil().max(1.0) as usize;
    let sd = (total / steps as f64).sqrt();
    let mut u = [p[0] / radius, p[1] / radius, p[2] / radius];
    for _ in 0..steps {
        let z = [
            rng.sample::<f64, _>(StandardNormal) * sd,
            rng.sample::<f64, _>(StandardNormal) * sd,
            rng.sample::<f64, _>(StandardNormal) * sd,
        ];
        // project onto the tangent plane at u
        let c = dot(&z, &u);
        let v = [z[0] - c * u[0], z[1] - c * u[1], z[2] - c * u[2]];
        let nv = dot(&v, &v).sqrt();
        if nv > 0.0 {
            let (s, co) = nv.sin_cos();
            for k in 0..3 {
                u[k] = co * u[k] + s * v[k] / nv;
            }
            let n = dot(&u, &u).sqrt();
            for x in &mut u {
                *x /= n;
            }
        }
    }
    *p = [u[0] * radius, u[1] * radius, u[2] * radius];
}

/// von Mises-Fisher sample on the unit sphere (Wood's algorithm, p = 3).
pub fn sample_vmf<R: Rng + ?Sized>(mean: &[f64; 3], kappa: f64, rng: &mut R) -> [f64; 3] {
    if kappa <= 0.0 {
        return UnitSphere.sample(rng);
    }
    // For p = 3 the cosine has the closed-form inverse CDF.
    let u: f64 = rng.random();
    let w = 1.0 + ((u + (1.0 - u) * (-2.0 * kappa).exp()).ln()) / kappa;
    let w = w.clamp(-1.0, 1.0);
    let phi = 2.0 * PI * rng.random::<f64>();
    let s = (1.0 - w * w).max(0.0).sqrt();
    let local = [s * phi.cos(), s * phi.sin(), w];
    let n = dot(mean, mean).sqrt();
    let m = [mean[0] / n, mean[1] / n, mean[2] / n];
    rotate_from_pole(&m, &local)
}

/// Orthogonal map taking the north pole to `m`, applied to `v`.
///
/// A Householder reflection suffices: the laws moved through it are
/// symmetric about the pole.
fn rotate_from_pole(m: &[f64; 3], v: &[f64; 3]) -> [f64; 3] {
    let e = [0.0, 0.0, 1.0];
    let d = [e[0] - m[0], e[1] - m[1], e[2] - m[2]];
    let dd = dot(&d, &d);
    if dd < 1e-30 {
        return *v;
    }
    let c = 2.0 * dot(&d, v) / dd;
    [v[0] - c * d[0], v[1] - c * d[1], v[2] - c * d[2]]
}

/// Real basis functions used for position-dependent rates and observables.
#[derive(Clone, Debug, PartialEq)]
pub enum BasisFn {
    Constant,
    /// Indicator of one site of a finite set.
    Indicator(usize),
    /// `cos(2 pi k s / L)` on the circle, `cos(pi k x)` on the interval.
    Cos(u32),
    /// `sin(2 pi k s / L)` on the circle, `sin(pi k x)` on the interval.
    Sin(u32),
    /// Legendre `P_l(<x/R, axis>)` on the sphere.
    Zonal { l: u32, axis: [f64; 3] },
    /// Cartesian coordinate `x_k / R` on the sphere.
    Coord(usize),
}

impl BasisFn {
    pub fn eval(&self, domain: &SpatialDomain, loc: &Location) -> f64 {
        match (self, loc) {
            (Self::Constant, _) => 1.0,
            (Self::Indicator(s), Location::Site(x)) => f64::from(*x as usize == *s),
            (Self::Cos(k), Location::Arc(a)) => {
                let l = circumference(domain);
                (2.0 * PI * f64::from(*k) * a / l).cos()
            }
            (Self::Sin(k), Location::Arc(a)) => {
                let l = circumference(domain);
                (2.0 * PI * f64::from(*k) * a / l).sin()
            }
            (Self::Cos(k), Location::Unit(x)) => (PI * f64::from(*k) * x).cos(),
            (Self::Sin(k), Location::Unit(x)) => (PI * f64::from(*k) * x).sin(),
            (Self::Zonal { l, axis }, Location::Point(p)) => {
                let r = dot(p, p).sqrt();
                let na = dot(axis, axis).sqrt();
                legendre(*l, dot(p, axis) / (r * na))
            }
            (Self::Coord(k), Location::Point(p)) => p[*k] / dot(p, p).sqrt(),
            _ => 0.0,
        }
    }

    /// Upper bound on `|f|` over the domain.
    pub fn sup_norm(&self) -> f64 {
        1.0
    }

    pub fn label(&self) -> String {
        match self {
            Self::Constant => "one".into(),
            Self::Indicator(s) => format!("site{s}"),
            Self::Cos(k) => format!("cos{k}"),
            Self::Sin(k) => format!("sin{k}"),
            Self::Zonal { l, .. } => format!("zonal{l}"),
            Self::Coord(k) => format!("coord{k}"),
        }
    }

    pub fn supported_on(&self, domain: &SpatialDomain) -> bool {
        matches!(
            (self, domain),
            (Self::Constant, _)
                | (Self::Indicator(_), SpatialDomain::FiniteSet { .. })
                | (Self::Cos(_) | Self::Sin(_), SpatialDomain::Circle { .. } | SpatialDomain::Interval { .. })
                | (Self::Zonal { .. } | Self::Coord(_), SpatialDomain::Sphere { .. })
        ) && match (self, domain) {
            (Self::Indicator(s), SpatialDomain::FiniteSet { sites, .. }) => s < sites,
            (Self::Coord(k), _) => *k < 3,
            _ => true,
        }
    }
}

fn circumference(domain: &SpatialDomain) -> f64 {
    match domain {
        SpatialDomain::Circle { circumference, .. } => *circumference,
        _ => 1.0,
    }
}

fn legendre(l: u32, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return 1.0;
    }
    for n in 1..l {
        let nf = f64::from(n);
        let p2 = ((2.0 * nf + 1.0) * x * p1 - nf * p0) / (nf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Deterministic sample of locations used for sup-norm and grid checks.
pub fn probe_locations(domain: &SpatialDomain, n: usize) -> Vec<Location> {
    match domain {
        SpatialDomain::FiniteSet { sites, .. } => (0..*sites).map(|s| Location::Site(s as u32)).collect(),
        SpatialDomain::Circle { circumference, .. } => {
            (0..n).map(|k| Location::Arc(circumference * k as f64 / n as f64)).collect()
        }
        SpatialDomain::Interval { .. } => (0..=n).map(|k| Location::Unit(k as f64 / n as f64)).collect(),
        SpatialDomain::Sphere { radius, .. } => {
            // Fibonacci lattice
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = golden * k as f64;
                    Location::Point([radius * r * a.cos(), radius * r * a.sin(), radius * z])
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reflection_folds_into_unit_interval() {
        assert_eq!(reflect_unit(1.25), 0.75);
        assert_eq!(reflect_unit(-0.25), 0.25);
        assert_eq!(reflect_unit(2.5), 0.5);
    }

    #[test]
    fn sphere_steps_stay_on_sphere() {
        let dom = SpatialDomain::Sphere { radius: 2.0, diffusion: vec![0.1] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut loc = Location::Point([0.0, 0.0, 2.0]);
        for _ in 0..100 {
            dom.diffuse(&mut loc, 0.1, 0.37, &mut rng);
            assert!(dom.contains(&loc));
        }
    }

    #[test]
    fn sphere_mean_cosine_decays_like_heat_kernel() {
        // E<x_t, x_0>/R^2 = exp(-D t / R^2) for generator (D/2)Δ.
        let dom = SpatialDomain::Sphere { radius: 1.0, diffusion: vec![1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, t, n) = (1.0, 0.3, 20_000);
        let mut acc = 0.0;
        for _ in 0..n {
            let mut loc = Location::Point([0.0, 0.0, 1.0]);
            dom.diffuse(&mut loc, d, t, &mut rng);
            if let Location::Point(p) = loc {
                acc += p[2];
            }
        }
        let mean = acc / n as f64;
        assert!((mean - (-d * t).exp()).abs() < 0.01, "mean cosine {mean}");
    }

    #[test]
    fn vmf_mean_resultant_length() {
        // E[w] = coth(kappa) - 1/kappa for p = 3.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kappa = 4.0;
        let m = [1.0, 0.0, 0.0];
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| sample_vmf(&m, kappa, &mut rng)[0]).sum::<f64>() / n as f64;
        let expect = 1.0 / kappa.tanh() - 1.0 / kappa;
        assert!((mean - expect).abs() < 0.01);
    }

    #[test]
    fn legendre_values() {
        assert!((legendre(2, 0.5) - (-0.125)).abs() < 1e-15);
        assert!((legendre(3, 1.0) - 1.0).abs() < 1e-15);
    }
}
