//! Mixing weights `Λ(h)` solving `A^T(h) Λ + [JΛ] θ = 0` with `Λ(h_eq) = v_eq`.
//!
//! Near `h_eq` the solution is a power series whose degree-`k` coefficients
//! solve one block linear system per degree, assembled in a real eigenbasis
//! of `J = [Jθ(h_eq)]` (`x = P (h - h_eq)`, `P J P^{-1} = M` real block
//! diagonal). Away from `h_eq` the series is transported along the flow:
//! `Λ(h) = Φ(h, 0, T) Λ̄(ψ(h, T))` once `ψ(h, T)` is inside the trust ball.

use std::collections::HashMap;

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FlowError, LambdaError};
use crate::flow::{ode_err, DensityDynamics, EquilibriumData};
use crate::model::{ModelSpec, PopulationState};
use crate::ode::{dopri5, DenseSolution, OdeOptions, StepControl};
use crate::poly::Poly;
use crate::space::Location;

/// Residual level certifying the trust radius.
pub const TRUST_RESIDUAL: f64 = 1e-8;

/// All multi-indices of total degree `k` in `q` variables, graded
/// lexicographic (first component largest first).
pub fn multi_indices(q: usize, k: u32) -> Vec<Vec<u32>> {
    fn rec(q: usize, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == q - 1 {
            prefix.push(k);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in (0..=k).rev() {
            prefix.push(a);
            rec(q, k - a, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(q, k, &mut Vec::with_capacity(q), &mut out);
    out
}

/// Per-degree record of the block system.
#[derive(Clone, Debug)]
pub struct DegreeDiagnostics {
    pub k: usize,
    pub size: usize,
    pub condition: f64,
    pub diag_dominant: bool,
    /// `|Ξ^{-1}|_inf`.
    pub inv_norm: f64,
    /// Varah's bound `1 / min_i(|Ξ_ii| - sum_j |Ξ_ij|)`, when dominant.
    pub varah_bound: Option<f64>,
    /// `1 / (k ε_0)`.
    pub eps_bound: f64,
    /// Whether `inv_norm <= eps_bound` (only meaningful when dominant).
    pub within_eps_bound: Option<bool>,
}

/// Truncated power series of `Λ` around `h_eq`.
#[derive(Clone, Debug)]
pub struct LambdaSeries {
    pub center: Vec<f64>,
    pub k_max: usize,
    /// `(α, γ_α)` in powers of `h - h_eq`, graded order.
    pub coeffs: Vec<(Vec<u32>, Vec<f64>)>,
    /// Same series in eigen-coordinates `x = P (h - h_eq)`.
    pub eig_coeffs: Vec<(Vec<u32>, Vec<f64>)>,
    pub p: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub eigenvalues: Vec<Complex<f64>>,
    pub eps0: f64,
    pub c_hat: f64,
    pub r_trust: f64,
    pub diagnostics: Vec<DegreeDiagnostics>,
    polys: Vec<Poly>,
    grads: Vec<Vec<Poly>>,
}

impl LambdaSeries {
    pub fn q(&self) -> usize {
        self.center.len()
    }

    pub fn eval(&self, h: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = h.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        self.polys.iter().map(|p| p.eval(&d)).collect()
    }

    /// Exact Jacobian of the truncated series.
    pub fn jacobian(&self, h: &[f64]) -> DMatrix<f64> {
        let d: Vec<f64> = h.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let q = self.q();
        DMatrix::from_fn(q, q, |i, k| self.grads[i][k].eval(&d))
    }

    pub fn coeff(&self, alpha: &[u32]) -> Option<&[f64]> {
        self.coeffs.iter().find(|(a, _)| a == alpha).map(|(_, g)| g.as_slice())
    }

    pub fn in_trust_ball(&self, h: &[f64]) -> bool {
        dist(h, &self.center) < self.r_trust
    }

    /// PDE residual of the truncated series with its exact derivative.
    pub fn residual(&self, dd: &DensityDynamics, h: &[f64]) -> Vec<f64> {
        let lam = DVector::from_vec(self.eval(h));
        let th = DVector::from_vec(dd.theta(h));
        let r = dd.a_matrix(h).transpose() * &lam + self.jacobian(h) * th;
        r.iter().copied().collect()
    }

    /// Maximum residual over `n` deterministic directions at radius `r`.
    pub fn max_residual_at(&self, dd: &DensityDynamics, r: f64) -> f64 {
        sphere_directions(self.q())
            .iter()
            .map(|u| {
                let h: Vec<f64> = self.center.iter().zip(u).map(|(c, d)| c + r * d).collect();
                self.residual(dd, &h).iter().fold(0.0f64, |m, x| m.max(x.abs()))
            })
            .fold(0.0, f64::max)
    }
}

/// Least-squares slope of `log residual` against `log r`, with the residuals.
pub fn residual_slope(series: &LambdaSeries, dd: &DensityDynamics, radii: &[f64]) -> (f64, Vec<f64>) {
    let res: Vec<f64> = radii.iter().map(|&r| series.max_residual_at(dd, r)).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = radii.iter().zip(&res).map(|(r, e)| (r.ln(), e.ln())).unzip();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    (slope, res)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sphere_directions(q: usize) -> Vec<Vec<f64>> {
    match q {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..32)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 32.0;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let mut out: Vec<Vec<f64>> = (0..q)
                .flat_map(|i| {
                    let mut e = vec![0.0; q];
                    e[i] = 1.0;
                    let mut m = e.clone();
                    m[i] = -1.0;
                    [e, m]
                })
                .collect();
            for _ in 0..64 {
                let v: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                out.push(v.iter().map(|x| x / n).collect());
            }
            out
        }
    }
}

/// Real eigenbasis `(P, M, eigenvalues)` with `P J P^{-1} = M`.
pub fn real_eigenbasis(j: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<Complex<f64>>), LambdaError> {
    let q = j.nrows();
    let ev = crate::flow::eigenvalues(j);
    let scale = j.norm().max(1.0);
    let tol = 1e-8 * scale;
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(q);
    let mut used = vec![false; ev.len()];
    for a in 0..ev.len() {
        if used[a] || ev[a].im < -tol {
            continue;
        }
        let lam = ev[a];
        let group: Vec<usize> = (0..ev.len()).filter(|&b| !used[b] && (ev[b] - lam).norm() < 1e-6 * scale).collect();
        for &b in &group {
            used[b] = true;
        }
        let mult = group.len();
        if lam.im.abs() <= tol {
            let shifted = j - DMatrix::identity(q, q) * lam.re;
            let svd = shifted.svd(false, true);
            let vt = svd.v_t.unwrap();
            let mut order: Vec<usize> = (0..q).collect();
            order.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
            if svd.singular_values[order[mult - 1]] > 1e-6 * scale {
                return Err(LambdaError::NotDiagonalizable { cond: f64::INFINITY });
            }
            for &r in order.iter().take(mult) {
                cols.push(vt.row(r).transpose());
            }
        } else {
            // mark the conjugate partners as used
            for b in 0..ev.len() {
                if !used[b] && (ev[b] - lam.conj()).norm() < 1e-6 * scale {
                    used[b] = true;
                }
            }
            let jc: DMatrix<Complex<f64>> = j.map(|x| Complex::new(x, 0.0));
            let shifted = jc - DMatrix::identity(q, q) * lam;
            let svd = shifted.svd(false, true);
            let vt = svd.v_t.unwrap();
            let mut order: Vec<usize> = (0..q).collect();
            order.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
            if svd.singular_values[order[mult - 1]] > 1e-6 * scale {
                return Err(LambdaError::NotDiagonalizable { cond: f64::INFINITY });
            }
            for &r in order.iter().take(mult) {
                // right singular vectors of the shifted matrix: conj of V^T rows
                let v: Vec<Complex<f64>> = vt.row(r).iter().map(|z| z.conj()).collect();
                cols.push(DVector::from_iterator(q, v.iter().map(|z| z.re)));
                cols.push(DVector::from_iterator(q, v.iter().map(|z| z.im)));
            }
        }
    }
    if cols.len() != q {
        return Err(LambdaError::NotDiagonalizable { cond: f64::INFINITY });
    }
    let qm = DMatrix::from_columns(&cols);
    let sv = qm.clone().svd(false, false).singular_values;
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > 1e8 {
        return Err(LambdaError::NotDiagonalizable { cond });
    }
    let mut p = qm.try_inverse().ok_or(LambdaError::NotDiagonalizable { cond })?;
    for r in 0..q {
        let row = p.row(r).clone_owned();
        let n = row.norm();
        let big = row.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let s = if big < 0.0 { -1.0 / n } else { 1.0 / n };
        p.row_mut(r).scale_mut(s);
    }
    let qinv = p.clone().try_inverse().ok_or(LambdaError::NotDiagonalizable { cond })?;
    let mut m = &p * j * &qinv;
    let mnorm = m.norm();
    m.apply(|x| {
        if x.abs() < 1e-13 * mnorm {
            *x = 0.0
        }
    });
    Ok((p, m, ev))
}

/// Power-series solution around `h_eq` up to total degree `k_max`.
pub fn solve_series(spec: &ModelSpec, eq: &EquilibriumData, k_max: usize) -> Result<LambdaSeries, LambdaError> {
    let q = spec.q;
    let dd = DensityDynamics::new(spec);
    let h_eq = &eq.h_eq;
    let (p, m, ev) = real_eigenbasis(&eq.jac)?;
    let qinv = p.clone().try_inverse().ok_or(LambdaError::NotDiagonalizable { cond: f64::INFINITY })?;
    let eps0 = ev.iter().map(|z| -z.re).fold(f64::INFINITY, f64::min) / 4.0;

    // Â(x)_{ij} = A_{ji}(h_eq + Q x)
    let a_hat: Vec<Vec<Poly>> =
        (0..q).map(|i| (0..q).map(|j| dd.entry(j, i).compose_affine(h_eq, &qinv)).collect()).collect();
    // θ̂(x) = P θ(h_eq + Q x)
    let theta_h: Vec<Poly> = (0..q)
        .map(|i| {
            (0..q).fold(Poly::zero(q), |acc, j| acc.add(&dd.entry(i, j).mul(&Poly::var(q, j))))
        })
        .collect();
    let theta_x: Vec<Poly> = theta_h.iter().map(|t| t.compose_affine(h_eq, &qinv)).collect();
    let theta_hat: Vec<Poly> = (0..q)
        .map(|i| (0..q).fold(Poly::zero(q), |acc, j| acc.add(&theta_x[j].scale(p[(i, j)]))))
        .collect();
    // nonlinear Taylor coefficients of θ̂: (m, β, t_{m,β}) with |β| >= 2
    let theta_nl: Vec<(usize, Vec<u32>, f64)> = theta_hat
        .iter()
        .enumerate()
        .flat_map(|(mi, poly)| {
            poly.terms().filter(|(e, _)| e.iter().sum::<u32>() >= 2).map(move |(e, c)| (mi, e.to_vec(), c))
        })
        .collect();
    // Â_β for β != 0
    let mut a_terms: HashMap<Vec<u32>, DMatrix<f64>> = HashMap::new();
    for i in 0..q {
        for j in 0..q {
            for (e, c) in a_hat[i][j].terms() {
                if e.iter().any(|&x| x > 0) {
                    a_terms.entry(e.to_vec()).or_insert_with(|| DMatrix::zeros(q, q))[(i, j)] += c;
                }
            }
        }
    }
    let a0 = eq.a_eq.transpose();

    let mut gamma: HashMap<Vec<u32>, DVector<f64>> = HashMap::new();
    gamma.insert(vec![0; q], DVector::from_vec(eq.v_eq.clone()));
    let mut diagnostics = Vec::new();
    let mut order: Vec<Vec<u32>> = vec![vec![0; q]];

    for k in 1..=k_max {
        let idx = multi_indices(q, k as u32);
        let pos: HashMap<&Vec<u32>, usize> = idx.iter().enumerate().map(|(n, a)| (a, n)).collect();
        let n = idx.len() * q;
        let mut xi = DMatrix::<f64>::zeros(n, n);
        let mut y = DVector::<f64>::zeros(n);
        for (r, alpha) in idx.iter().enumerate() {
            let base = r * q;
            // diagonal block Â(0) + sum_m M_mm α_m I
            let shift: f64 = (0..q).map(|mi| m[(mi, mi)] * f64::from(alpha[mi])).sum();
            for i in 0..q {
                for j in 0..q {
                    xi[(base + i, base + j)] += a0[(i, j)];
                }
                xi[(base + i, base + i)] += shift;
            }
            // same-degree coupling through off-diagonal M_{mj}, m != j
            for mi in 0..q {
                for j in 0..q {
                    if mi == j || m[(mi, j)] == 0.0 || alpha[j] == 0 {
                        continue;
                    }
                    let mut a2 = alpha.clone();
                    a2[mi] += 1;
                    a2[j] -= 1;
                    let c = pos[&a2] * q;
                    let w = m[(mi, j)] * f64::from(alpha[mi] + 1);
                    for i in 0..q {
                        xi[(base + i, c + i)] += w;
                    }
                }
            }
            // lower-degree terms
            let mut acc = DVector::<f64>::zeros(q);
            for (beta, mat) in &a_terms {
                if let Some(rest) = sub_index(alpha, beta) {
                    if let Some(g) = gamma.get(&rest) {
                        acc += mat * g;
                    }
                }
            }
            for (mi, beta, t) in &theta_nl {
                let mut a2 = alpha.clone();
                a2[*mi] += 1;
                if let Some(rest) = sub_index(&a2, beta) {
                    if rest[*mi] > 0 {
                        if let Some(g) = gamma.get(&rest) {
                            acc += g * (t * f64::from(rest[*mi]));
                        }
                    }
                }
            }
            for i in 0..q {
                y[base + i] = -acc[i];
            }
        }
        let diag = degree_diagnostics(&xi, k, eps0);
        if diag.condition > 1e12 || !diag.condition.is_finite() {
            return Err(LambdaError::Singular { k, cond: diag.condition });
        }
        let sol = xi.clone().lu().solve(&y).ok_or(LambdaError::Singular { k, cond: diag.condition })?;
        for (r, alpha) in idx.iter().enumerate() {
            gamma.insert(alpha.clone(), sol.rows(r * q, q).clone_owned());
            order.push(alpha.clone());
        }
        diagnostics.push(diag);
    }

    let eig_coeffs: Vec<(Vec<u32>, Vec<f64>)> =
        order.iter().map(|a| (a.clone(), gamma[a].iter().copied().collect())).collect();
    // back to powers of d = h - h_eq via x = P d
    let zero = vec![0.0; q];
    let polys: Vec<Poly> = (0..q)
        .map(|c| {
            Poly::from_terms(q, eig_coeffs.iter().map(|(a, g)| (a.clone(), g[c]))).compose_affine(&zero, &p)
        })
        .collect();
    let coeffs: Vec<(Vec<u32>, Vec<f64>)> =
        order.iter().map(|a| (a.clone(), polys.iter().map(|pl| pl.coeff(a)).collect())).collect();
    let grads = polys.iter().map(|pl| (0..q).map(|k| pl.partial(k)).collect()).collect();
    let c_hat = coeffs
        .iter()
        .filter(|(a, _)| a.iter().sum::<u32>() >= 1)
        .map(|(a, g)| {
            let n = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            n.powf(1.0 / f64::from(a.iter().sum::<u32>()))
        })
        .fold(1e-12, f64::max);

    let mut series = LambdaSeries {
        center: h_eq.clone(),
        k_max,
        coeffs,
        eig_coeffs,
        p,
        m,
        eigenvalues: ev,
        eps0,
        c_hat,
        r_trust: 0.0,
        diagnostics,
        polys,
        grads,
    };
    series.r_trust = trust_radius(&series, &dd)?;
    Ok(series)
}

fn sub_index(a: &[u32], b: &[u32]) -> Option<Vec<u32>> {
    a.iter().zip(b).map(|(x, y)| x.checked_sub(*y)).collect()
}

fn degree_diagnostics(xi: &DMatrix<f64>, k: usize, eps0: f64) -> DegreeDiagnostics {
    let n = xi.nrows();
    let sv = xi.clone().svd(false, false).singular_values;
    let condition = sv.max() / sv.min();
    let mut margin = f64::INFINITY;
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| xi[(i, j)].abs()).sum();
        margin = margin.min(xi[(i, i)].abs() - off);
    }
    let diag_dominant = margin > 0.0;
    let inv_norm = xi
        .clone()
        .try_inverse()
        .map(|inv| (0..n).map(|i| inv.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max))
        .unwrap_or(f64::INFINITY);
    let eps_bound = 1.0 / (k as f64 * eps0);
    DegreeDiagnostics {
        k,
        size: n,
        condition,
        diag_dominant,
        inv_norm,
        varah_bound: diag_dominant.then(|| 1.0 / margin),
        eps_bound,
        within_eps_bound: diag_dominant.then_some(inv_norm <= eps_bound * (1.0 + 1e-12)),
    }
}

fn trust_radius(series: &LambdaSeries, dd: &DensityDynamics) -> Result<f64, LambdaError> {
    let h = &series.center;
    let to_wall = h.iter().map(|&x| x.min(dd.h_max - x)).fold(f64::INFINITY, f64::min);
    let mut r = (0.5 / series.c_hat).min(0.9 * to_wall);
    while r > 1e-6 * to_wall.max(1e-300) {
        if series.max_residual_at(dd, r) < TRUST_RESIDUAL {
            return Ok(r);
        }
        r *= 0.8;
    }
    Err(LambdaError::NoTrustRadius { tol: TRUST_RESIDUAL })
}

/// `A^T(h) Λ(h) + [JΛ(h)] θ(h)` with a central-difference Jacobian, and the
/// normalization defect `<Λ(h), h> - 1`.
#[derive(Clone, Debug)]
pub struct PdeResidual {
    pub residual: Vec<f64>,
    pub normalization: f64,
}

pub fn pde_residual<F>(spec: &ModelSpec, lambda: F, h: &[f64], fd_step: f64) -> PdeResidual
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let dd = DensityDynamics::new(spec);
    let jl = fd_jacobian(&lambda, h, fd_step);
    residual_with(&dd, &lambda, h, &jl)
}

/// As [`pde_residual`], with one Richardson extrapolation of the Jacobian.
pub fn pde_residual_richardson<F>(spec: &ModelSpec, lambda: F, h: &[f64], fd_step: f64) -> PdeResidual
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let dd = DensityDynamics::new(spec);
    let j1 = fd_jacobian(&lambda, h, fd_step);
    let j2 = fd_jacobian(&lambda, h, fd_step / 2.0);
    let jl = (j2 * 4.0 - j1) / 3.0;
    residual_with(&dd, &lambda, h, &jl)
}

fn fd_jacobian<F: Fn(&[f64]) -> Vec<f64>>(lambda: &F, h: &[f64], step: f64) -> DMatrix<f64> {
    let q = h.len();
    let mut jl = DMatrix::zeros(q, q);
    for k in 0..q {
        let mut hp = h.to_vec();
        let mut hm = h.to_vec();
        hp[k] += step;
        hm[k] -= step;
        let (lp, lm) = (lambda(&hp), lambda(&hm));
        for i in 0..q {
            jl[(i, k)] = (lp[i] - lm[i]) / (2.0 * step);
        }
    }
    jl
}

fn residual_with<F: Fn(&[f64]) -> Vec<f64>>(dd: &DensityDynamics, lambda: &F, h: &[f64], jl: &DMatrix<f64>) -> PdeResidual {
    let lam = lambda(h);
    let r = dd.a_matrix(h).transpose() * DVector::from_column_slice(&lam) + jl * DVector::from_vec(dd.theta(h));
    PdeResidual {
        residual: r.iter().copied().collect(),
        normalization: lam.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() - 1.0,
    }
}

/// `Φ(h, t, t0)` for `t` in `[0, t0]`, from the backward matrix equation
/// `∂_t Φ = -A^T(ψ(h,t)) Φ`, `Φ(h, t0, t0) = I`.
#[derive(Clone, Debug)]
pub struct TransportMatrix {
    pub h: Vec<f64>,
    pub t0: f64,
    flow: DenseSolution,
    phi: DenseSolution,
}

impl TransportMatrix {
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let q = self.h.len();
        DMatrix::from_row_slice(q, q, &self.phi.eval(t))
    }

    pub fn psi(&self, t: f64) -> Vec<f64> {
        self.flow.eval(t)
    }
}

pub fn transport_matrix(spec: &ModelSpec, h: &[f64], t0: f64, tol: f64) -> Result<TransportMatrix, LambdaError> {
    let dd = DensityDynamics::new(spec);
    let q = spec.q;
    if !dd.in_box(h) {
        return Err(FlowError::OutsideBox { h: h.to_vec(), h_max: spec.h_max }.into());
    }
    let opts = OdeOptions::tol(tol);
    let flow = dopri5(|_, y, dy| dd.theta_into(y, dy), 0.0, h, t0, opts, |_, y| {
        if dd.in_box(y) {
            StepControl::Continue
        } else {
            StepControl::Abort
        }
    })
    .map_err(ode_err)?;
    let ident: Vec<f64> = DMatrix::<f64>::identity(q, q).iter().copied().collect();
    let mut hbuf = vec![0.0; q];
    let phi = dopri5(
        |t, y, dy| {
            flow.eval_into(t, &mut hbuf);
            let a = dd.a_matrix(&hbuf);
            // row-major Φ: dΦ_ik = -sum_l A_li Φ_lk
            for i in 0..q {
                for k in 0..q {
                    dy[i * q + k] = -(0..q).map(|l| a[(l, i)] * y[l * q + k]).sum::<f64>();
                }
            }
        },
        t0,
        &ident,
        0.0,
        opts,
        |_, _| StepControl::Continue,
    )
    .map_err(ode_err)?;
    Ok(TransportMatrix { h: h.to_vec(), t0, flow, phi })
}

/// Joint forward integration of `h' = θ(h)` and `∂_T Φ(h,0,T) = Φ A^T(ψ)`.
pub fn transport_forward<C>(spec: &ModelSpec, h: &[f64], t_max: f64, tol: f64, mut stop: C) -> Result<DenseSolution, LambdaError>
where
    C: FnMut(&[f64]) -> bool,
{
    let dd = DensityDynamics::new(spec);
    let q = spec.q;
    if !dd.in_box(h) {
        return Err(FlowError::OutsideBox { h: h.to_vec(), h_max: spec.h_max }.into());
    }
    let mut y0 = h.to_vec();
    y0.extend(DMatrix::<f64>::identity(q, q).iter().copied());
    if stop(h) {
        return dopri5(|_, _, dy| dy.fill(0.0), 0.0, &y0, 0.0, OdeOptions::tol(tol), |_, _| StepControl::Continue)
            .map_err(|e| ode_err(e).into());
    }
    dopri5(
        |_, y, dy| {
            let (hs, ph) = y.split_at(q);
            dd.theta_into(hs, &mut dy[..q]);
            let a = dd.a_matrix(hs);
            for i in 0..q {
                for k in 0..q {
                    dy[q + i * q + k] = (0..q).map(|l| ph[i * q + l] * a[(k, l)]).sum::<f64>();
                }
            }
        },
        0.0,
        &y0,
        t_max,
        OdeOptions::tol(tol),
        |_, y| {
            if !dd.in_box(&y[..q]) {
                StepControl::Abort
            } else if stop(&y[..q]) {
                StepControl::Stop
            } else {
                StepControl::Continue
            }
        },
    )
    .map_err(|e| ode_err(e).into())
}

/// `Λ` on the certified part of the region of attraction.
#[derive(Clone, Debug)]
pub struct LambdaField<'a> {
    pub spec: &'a ModelSpec,
    pub series: &'a LambdaSeries,
    pub t_max: f64,
    pub tol: f64,
}

impl<'a> LambdaField<'a> {
    pub fn new(spec: &'a ModelSpec, series: &'a LambdaSeries) -> Self {
        Self { spec, series, t_max: 200.0, tol: 1e-12 }
    }

    pub fn eval(&self, h: &[f64]) -> Result<Vec<f64>, LambdaError> {
        extend_lambda_with(self.spec, self.series, h, self.t_max, self.tol)
    }
}

pub fn extend_lambda(spec: &ModelSpec, series: &LambdaSeries, h: &[f64]) -> Result<Vec<f64>, LambdaError> {
    extend_lambda_with(spec, series, h, 200.0, 1e-12)
}

pub fn extend_lambda_with(
    spec: &ModelSpec,
    series: &LambdaSeries,
    h: &[f64],
    t_max: f64,
    tol: f64,
) -> Result<Vec<f64>, LambdaError> {
    let q = spec.q;
    let sol = transport_forward(spec, h, t_max, tol, |x| series.in_trust_ball(x))?;
    let end = &sol.y_end;
    if !series.in_trust_ball(&end[..q]) {
        return Err(LambdaError::Undetermined { h: h.to_vec(), t_max });
    }
    let lam = combine(q, end, series);
    check_lambda(h, &lam)?;
    Ok(lam)
}

/// Transport over a fixed horizon `t` (the endpoint must lie in the ball).
pub fn extend_lambda_at_time(spec: &ModelSpec, series: &LambdaSeries, h: &[f64], t: f64, tol: f64) -> Result<Vec<f64>, LambdaError> {
    let q = spec.q;
    let sol = transport_forward(spec, h, t, tol, |_| false)?;
    if !series.in_trust_ball(&sol.y_end[..q]) {
        return Err(LambdaError::Undetermined { h: h.to_vec(), t_max: t });
    }
    Ok(combine(q, &sol.y_end, series))
}

fn combine(q: usize, y: &[f64], series: &LambdaSeries) -> Vec<f64> {
    let (hs, ph) = y.split_at(q);
    let lb = series.eval(hs);
    (0..q).map(|i| (0..q).map(|k| ph[i * q + k] * lb[k]).sum()).collect()
}

fn check_lambda(h: &[f64], lam: &[f64]) -> Result<(), LambdaError> {
    if lam.iter().any(|&x| !(x > 0.0)) {
        return Err(LambdaError::Invariant { h: h.to_vec(), value: lam.to_vec(), what: "strict positivity" });
    }
    let norm: f64 = lam.iter().zip(h).map(|(a, b)| a * b).sum();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(LambdaError::Invariant { h: h.to_vec(), value: lam.to_vec(), what: "<Λ(h), h> = 1" });
    }
    Ok(())
}

/// Weighted atoms `(type, location, weight)` of `ν = sum_i Λ_i(h) μ_i`.
#[derive(Clone, Debug)]
pub struct WeightedMeasure {
    pub atoms: Vec<(usize, Location, f64)>,
}

impl WeightedMeasure {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.2).sum()
    }
}

pub fn gamma_map<F>(lambda: F, pop: &PopulationState) -> Result<WeightedMeasure, LambdaError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, LambdaError>,
{
    let h = crate::model::density_map(pop).0;
    let lam = lambda(&h)?;
    let n = pop.n_scale as f64;
    let lam_ref = &lam;
    let atoms: Vec<(usize, Location, f64)> = pop
        .types
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().map(move |p| (i, p.loc, lam_ref[i] / n)))
        .collect();
    let m = WeightedMeasure { atoms };
    let mass = m.total_mass();
    if (mass - 1.0).abs() > 1e-10 {
        return Err(LambdaError::Invariant { h, value: lam, what: "unit total mass" });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_index_enumeration() {
        assert_eq!(multi_indices(2, 2), vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(multi_indices(3, 1), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert_eq!(multi_indices(1, 4), vec![vec![4]]);
        // stars and bars
        assert_eq!(multi_indices(3, 4).len(), 15);
    }

    #[test]
    fn eigenbasis_of_rotation_block() {
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -1.0]);
        let (p, m, _) = real_eigenbasis(&j).unwrap();
        let back = p.clone().try_inverse().unwrap() * &m * &p;
        assert!((back - &j).norm() < 1e-12);
    }

    #[test]
    fn eigenbasis_rejects_jordan_block() {
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        assert!(matches!(real_eigenbasis(&j), Err(LambdaError::NotDiagonalizable { .. })));
    }
}
