//! Deterministic density layer: `A(h)`, `theta(h) = A(h) h`, the flow it
//! generates, the equilibrium `h_eq` with its spectral data, and the
//! coefficients of the limiting Fleming-Viot generator.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::FlowError;
use crate::model::{Dispersal, Kernel, ModelSpec, PositionFn};
use crate::ode::{dopri5, DenseSolution, OdeFailure, OdeOptions, StepControl};
use crate::poly::Poly;
use crate::space::{Location, SpatialDomain};

/// Polynomial entries of `A(h)` and their partial derivatives.
#[derive(Clone, Debug)]
pub struct DensityDynamics {
    pub q: usize,
    pub h_max: f64,
    a: Vec<Vec<Poly>>,
    da: Vec<Vec<Vec<Poly>>>,
}

impl DensityDynamics {
    pub fn new(spec: &ModelSpec) -> Self {
        let q = spec.q;
        let a: Vec<Vec<Poly>> = (0..q)
            .map(|i| {
                (0..q)
                    .map(|j| {
                        if i == j {
                            spec.beta[i][i].poly.sub(&spec.rho[i].poly)
                        } else {
                            spec.beta[j][i].poly.clone()
                        }
                    })
                    .collect()
            })
            .collect();
        let da = a.iter().map(|row| row.iter().map(|p| (0..q).map(|k| p.partial(k)).collect()).collect()).collect();
        Self { q, h_max: spec.h_max, a, da }
    }

    pub fn entry(&self, i: usize, j: usize) -> &Poly {
        &self.a[i][j]
    }

    pub fn a_matrix(&self, h: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.q, self.q, |i, j| self.a[i][j].eval(h))
    }

    pub fn theta_into(&self, h: &[f64], out: &mut [f64]) {
        for i in 0..self.q {
            out[i] = (0..self.q).map(|j| self.a[i][j].eval(h) * h[j]).sum();
        }
    }

    pub fn theta(&self, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        self.theta_into(h, &mut out);
        out
    }

    /// `[J theta](h)_{ik} = sum_j dA_ij/dh_k h_j + A_ik`.
    pub fn jacobian(&self, h: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.q, self.q, |i, k| {
            let s: f64 = (0..self.q).map(|j| self.da[i][j][k].eval(h) * h[j]).sum();
            s + self.a[i][k].eval(h)
        })
    }

    pub fn in_box(&self, h: &[f64]) -> bool {
        h.iter().all(|&x| x >= -1e-12 && x <= self.h_max * (1.0 + 1e-12))
    }

    fn check_box(&self, h: &[f64]) -> Result<(), FlowError> {
        if self.in_box(h) {
            Ok(())
        } else {
            Err(FlowError::OutsideBox { h: h.to_vec(), h_max: self.h_max })
        }
    }
}

pub fn interaction_matrix(spec: &ModelSpec, h: &[f64]) -> Result<DMatrix<f64>, FlowError> {
    let dd = DensityDynamics::new(spec);
    dd.check_box(h)?;
    Ok(dd.a_matrix(h))
}

pub fn theta(spec: &ModelSpec, h: &[f64]) -> Result<Vec<f64>, FlowError> {
    let dd = DensityDynamics::new(spec);
    dd.check_box(h)?;
    Ok(dd.theta(h))
}

/// Central-difference Jacobian of `theta`; kept as an oracle for the exact one.
pub fn jacobian_fd(spec: &ModelSpec, h: &[f64], step: f64) -> DMatrix<f64> {
    let dd = DensityDynamics::new(spec);
    let q = spec.q;
    let mut j = DMatrix::zeros(q, q);
    for k in 0..q {
        let mut hp = h.to_vec();
        let mut hm = h.to_vec();
        hp[k] += step;
        hm[k] -= step;
        let (tp, tm) = (dd.theta(&hp), dd.theta(&hm));
        for i in 0..q {
            j[(i, k)] = (tp[i] - tm[i]) / (2.0 * step);
        }
    }
    j
}

/// Dense-output solution `t -> psi_theta(h0, t)` on `[0, T]`.
#[derive(Clone, Debug)]
pub struct FlowTrajectory {
    pub h0: Vec<f64>,
    pub sol: DenseSolution,
}

impl FlowTrajectory {
    pub fn at(&self, t: f64) -> Vec<f64> {
        self.sol.eval(t)
    }

    pub fn end(&self) -> &[f64] {
        &self.sol.y_end
    }

    pub fn t_end(&self) -> f64 {
        self.sol.t_end
    }
}

pub fn integrate_flow(spec: &ModelSpec, h0: &[f64], t_end: f64, tol: f64) -> Result<FlowTrajectory, FlowError> {
    let dd = DensityDynamics::new(spec);
    dd.check_box(h0)?;
    let sol = dopri5(
        |_, y, dy| dd.theta_into(y, dy),
        0.0,
        h0,
        t_end,
        OdeOptions::tol(tol),
        |_, y| if dd.in_box(y) { StepControl::Continue } else { StepControl::Abort },
    )
    .map_err(ode_err)?;
    Ok(FlowTrajectory { h0: h0.to_vec(), sol })
}

pub(crate) fn ode_err(e: OdeFailure) -> FlowError {
    match e {
        OdeFailure::Aborted { t } => FlowError::LeftBox { t },
        OdeFailure::StepUnderflow { t } | OdeFailure::TooManySteps { t } => FlowError::StepUnderflow { t },
    }
}

/// Grid maximum of `sum_ij beta_ji`, the Gronwall rate for `|psi|_1`.
pub fn gronwall_constant(spec: &ModelSpec) -> f64 {
    spec.grid_points()
        .iter()
        .map(|h| spec.beta.iter().flatten().map(|b| b.eval(h)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Equilibrium `h_eq` with the spectral data used downstream.
#[derive(Clone, Debug)]
pub struct EquilibriumData {
    pub h_eq: Vec<f64>,
    pub v_eq: Vec<f64>,
    pub a_eq: DMatrix<f64>,
    pub jac: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
    pub spec_a: Vec<Complex<f64>>,
    pub spec_j: Vec<Complex<f64>>,
    pub spec_g_bar: Vec<Complex<f64>>,
    pub gamma_smpl: f64,
    pub newton_iters: usize,
}

impl EquilibriumData {
    /// `1 / min |Re lambda(J)|`, the slowest relaxation time of the density.
    pub fn relaxation_time(&self) -> f64 {
        1.0 / self.spec_j.iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min)
    }
}

/// Thresholds for the "simple zero eigenvalue" test on `A(h_eq)`.
#[derive(Clone, Copy, Debug)]
pub struct SpectralThresholds {
    pub zero: f64,
    pub gap: f64,
}

impl Default for SpectralThresholds {
    fn default() -> Self {
        Self { zero: 1e-8, gap: 1e-4 }
    }
}

/// Eigenvalues sorted by real part, descending (ties by imaginary part).
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<Complex<f64>> = m.clone().complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    ev
}

/// Damped Newton iteration on `theta`; step halved until `|theta|` drops.
pub fn newton_equilibrium(spec: &ModelSpec, guess: &[f64], tol: f64) -> Result<(Vec<f64>, usize), FlowError> {
    let dd = DensityDynamics::new(spec);
    let norm = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mut h = guess.to_vec();
    let mut th = dd.theta(&h);
    let mut res = norm(&th);
    const MAX_ITERS: usize = 100;
    for it in 0..MAX_ITERS {
        if res < tol {
            return Ok((h, it));
        }
        let j = dd.jacobian(&h);
        let svd = j.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smax == 0.0 || smin / smax < 1e-14 {
            return Err(FlowError::SingularJacobian { h });
        }
        let step = j.lu().solve(&DVector::from_vec(th.clone())).ok_or(FlowError::SingularJacobian { h: h.clone() })?;
        let mut lam = 1.0;
        loop {
            let cand: Vec<f64> = (0..h.len()).map(|k| h[k] - lam * step[k]).collect();
            let tc = dd.theta(&cand);
            let rc = norm(&tc);
            if rc < res || lam < 1e-10 {
                h = cand;
                th = tc;
                res = rc;
                break;
            }
            lam *= 0.5;
        }
    }
    if res < tol {
        Ok((h, MAX_ITERS))
    } else {
        Err(FlowError::NoConvergence { iters: MAX_ITERS, residual: res })
    }
}

/// Newton from `guess`; if that fails or lands off the positive orthant,
/// the flow is run from `guess` for growing horizons and Newton restarted at
/// its endpoint.
pub fn locate_equilibrium(spec: &ModelSpec, guess: &[f64], tol: f64) -> Result<(Vec<f64>, usize), FlowError> {
    let dd = DensityDynamics::new(spec);
    let good = |h: &[f64]| h.iter().all(|&x| x > 0.0) && dd.in_box(h);
    let first = newton_equilibrium(spec, guess, tol);
    if let Ok((h, _)) = &first {
        if good(h) {
            return first;
        }
    }
    for horizon in [10.0, 40.0, 160.0] {
        let Ok(traj) = integrate_flow(spec, guess, horizon, 1e-10) else { break };
        if let Ok((h, it)) = newton_equilibrium(spec, traj.end(), tol) {
            if good(&h) {
                return Ok((h, it));
            }
        }
    }
    first
}

/// `G = (I - h 1^T / <1,h>) A`, reduced to `(q-1)x(q-1)` by subtracting the
/// last column.
pub fn g_bar(a: &DMatrix<f64>, h: &[f64]) -> DMatrix<f64> {
    let q = a.nrows();
    let s: f64 = h.iter().sum();
    let proj = DMatrix::from_fn(q, q, |i, j| f64::from(i == j) - h[i] / s);
    let g = proj * a;
    DMatrix::from_fn(q - 1, q - 1, |i, j| g[(i, j)] - g[(i, q - 1)])
}

/// Strong connectivity of the positive off-diagonal pattern.
pub fn is_irreducible(a: &DMatrix<f64>) -> bool {
    let q = a.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; q];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..q {
                let w = if forward { a[(i, j)] } else { a[(j, i)] };
                if i != j && w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    reach(true) && reach(false)
}

/// Positive left null vector of `a`, normalized so that `<v, h> = 1`.
pub fn left_null_vector(a: &DMatrix<f64>, h: &[f64]) -> Vec<f64> {
    let svd = a.transpose().svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let (imin, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).unwrap();
    let mut v: Vec<f64> = vt.row(imin).iter().copied().collect();
    let dot: f64 = v.iter().zip(h).map(|(a, b)| a * b).sum();
    for x in &mut v {
        *x /= dot;
    }
    v
}

pub fn find_equilibrium(spec: &ModelSpec, guess: &[f64], tol: f64) -> Result<EquilibriumData, FlowError> {
    find_equilibrium_with(spec, guess, tol, SpectralThresholds::default())
}

pub fn find_equilibrium_with(
    spec: &ModelSpec,
    guess: &[f64],
    tol: f64,
    thr: SpectralThresholds,
) -> Result<EquilibriumData, FlowError> {
    let (h, iters) = locate_equilibrium(spec, guess, tol)?;
    let mut eq = equilibrium_data(spec, &h, thr)?;
    eq.newton_iters = iters;
    Ok(eq)
}

/// Spectral checks and derived quantities at a known zero of `theta`.
pub fn equilibrium_data(spec: &ModelSpec, h: &[f64], thr: SpectralThresholds) -> Result<EquilibriumData, FlowError> {
    let dd = DensityDynamics::new(spec);
    if h.iter().any(|&x| x <= 0.0) {
        return Err(FlowError::NonPositive { h: h.to_vec() });
    }
    let jac = dd.jacobian(h);
    let sv = jac.clone().svd(false, false).singular_values;
    if sv.max() == 0.0 || sv.min() / sv.max() < 1e-12 {
        return Err(FlowError::SingularJacobian { h: h.to_vec() });
    }
    let spec_j = eigenvalues(&jac);
    let max_re_j = spec_j.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if max_re_j >= 0.0 {
        return Err(FlowError::Unstable { which: "J theta(h_eq)", max_re: max_re_j });
    }
    let a_eq = dd.a_matrix(h);
    let spec_a = eigenvalues(&a_eq);
    let mut moduli: Vec<f64> = spec_a.iter().map(|z| z.norm()).collect();
    moduli.sort_by(f64::total_cmp);
    let simple = moduli[0] < thr.zero && moduli.get(1).is_none_or(|&m| m > thr.gap);
    if !simple {
        return Err(FlowError::ZeroNotSimple { moduli });
    }
    let others_max = spec_a.iter().filter(|z| z.norm() >= thr.zero).map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if others_max >= 0.0 {
        return Err(FlowError::Unstable { which: "A(h_eq) off the zero eigenvalue", max_re: others_max });
    }
    let v_eq = left_null_vector(&a_eq, h);
    if v_eq.iter().any(|&x| x <= 0.0) {
        return Err(FlowError::NotPositiveVector { v: v_eq });
    }
    let gb = g_bar(&a_eq, h);
    let spec_g_bar = eigenvalues(&gb);
    let max_re_g = spec_g_bar.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if max_re_g >= 0.0 {
        return Err(FlowError::Unstable { which: "G_bar(h_eq)", max_re: max_re_g });
    }
    let gamma_smpl = (0..spec.q).map(|i| v_eq[i] * v_eq[i] * h[i] * spec.rho[i].eval(h)).sum();
    Ok(EquilibriumData {
        h_eq: h.to_vec(),
        v_eq,
        a_eq,
        jac,
        g_bar: gb,
        spec_a,
        spec_j,
        spec_g_bar,
        gamma_smpl,
        newton_iters: 0,
    })
}

/// Coefficients of the limiting generator, all evaluated at `h_eq`.
#[derive(Clone, Debug)]
pub struct AveragedCoefficients {
    pub h_eq: Vec<f64>,
    pub v_eq: Vec<f64>,
    /// Convex weights `v_i h_i` of the migration generators `B_i`.
    pub b_avg_weights: Vec<f64>,
    pub gamma_smpl: f64,
    /// `(weight v_j h_i, b^s_ij)` pairs making up `b^s_avg`.
    pub b_s_parts: Vec<(f64, PositionFn)>,
    /// `(weight v_i h_i, d^s_i)` pairs making up `d^s_avg`.
    pub d_s_parts: Vec<(f64, PositionFn)>,
    /// `(i, j, beta_ij(h_eq) v_j h_i, dispersal)` terms of `C_avg`.
    pub c_avg: Vec<(usize, usize, f64, Dispersal)>,
    /// `(i, kappa_i(h_eq) v_i, law)` terms of `I_avg`.
    pub i_avg: Vec<(usize, f64, Kernel)>,
    pub domain: SpatialDomain,
}

impl AveragedCoefficients {
    pub fn b_s_avg(&self, x: &Location) -> f64 {
        self.b_s_parts.iter().map(|(w, f)| w * f.eval(&self.domain, x, &self.h_eq)).sum()
    }

    pub fn d_s_avg(&self, x: &Location) -> f64 {
        self.d_s_parts.iter().map(|(w, f)| w * f.eval(&self.domain, x, &self.h_eq)).sum()
    }

    pub fn b_s_bound(&self) -> f64 {
        self.b_s_parts.iter().map(|(w, f)| w * f.bound).sum()
    }

    pub fn d_s_bound(&self) -> f64 {
        self.d_s_parts.iter().map(|(w, f)| w * f.bound).sum()
    }

    /// `sum_i w_i Q_i` on a finite set.
    pub fn migration_matrix(&self) -> Option<DMatrix<f64>> {
        match &self.domain {
            SpatialDomain::FiniteSet { sites, migration } => {
                let mut m = DMatrix::zeros(*sites, *sites);
                for (w, q) in self.b_avg_weights.iter().zip(migration) {
                    m += q * *w;
                }
                Some(m)
            }
            _ => None,
        }
    }

    /// `sum_i w_i D_i` on continuous domains, plus local-dispersal diffusion.
    pub fn diffusion(&self) -> f64 {
        let base: f64 = match &self.domain {
            SpatialDomain::Circle { diffusion, .. }
            | SpatialDomain::Sphere { diffusion, .. }
            | SpatialDomain::Interval { diffusion } => {
                self.b_avg_weights.iter().zip(diffusion).map(|(w, d)| w * d).sum()
            }
            SpatialDomain::FiniteSet { .. } => 0.0,
        };
        let local: f64 = self
            .c_avg
            .iter()
            .map(|(_, _, w, d)| match d {
                Dispersal::Local { s } => w * s * s,
                Dispersal::Rare { .. } => 0.0,
            })
            .sum();
        base + local
    }

    /// Total rate of rare-dispersal jumps and immigration redraws per particle.
    pub fn jump_rate(&self) -> f64 {
        let c: f64 = self
            .c_avg
            .iter()
            .map(|(_, _, w, d)| match d {
                Dispersal::Rare { c, .. } => w * c,
                Dispersal::Local { .. } => 0.0,
            })
            .sum();
        c + self.i_avg.iter().map(|(_, r, _)| r).sum::<f64>()
    }
}

pub fn averaged_coefficients(spec: &ModelSpec, eq: &EquilibriumData) -> AveragedCoefficients {
    let (h, v) = (&eq.h_eq, &eq.v_eq);
    let q = spec.q;
    let mut b_s_parts = Vec::new();
    let mut c_avg = Vec::new();
    for i in 0..q {
        for j in 0..q {
            if let Some(f) = &spec.b_s[i][j] {
                b_s_parts.push((v[j] * h[i], f.clone()));
            }
            if let Some(d) = &spec.dispersal[i][j] {
                c_avg.push((i, j, spec.beta[i][j].eval(h) * v[j] * h[i], d.clone()));
            }
        }
    }
    let d_s_parts = (0..q).filter_map(|i| spec.d_s[i].as_ref().map(|f| (v[i] * h[i], f.clone()))).collect();
    let i_avg = (0..q)
        .filter_map(|i| spec.immigration[i].as_ref().map(|im| (i, im.kappa.eval(h) * v[i], im.law.clone())))
        .collect();
    AveragedCoefficients {
        h_eq: h.clone(),
        v_eq: v.clone(),
        b_avg_weights: (0..q).map(|i| v[i] * h[i]).collect(),
        gamma_smpl: eq.gamma_smpl,
        b_s_parts,
        d_s_parts,
        c_avg,
        i_avg,
        domain: spec.domain.clone(),
    }
}
