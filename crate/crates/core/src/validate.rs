//! Structural validation of a model against the standing assumptions:
//! (A) a nonzero equilibrium, (B) a stable Jacobian there, (C) irreducibility
//! of `A(h_eq)`, (D) analyticity (automatic for polynomial rates).

use std::fmt;

use crate::error::FlowError;
use crate::flow::{self, EquilibriumData, SpectralThresholds};
use crate::model::ModelSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Assumption part `A`-`D` this check belongs to, if any.
    pub part: Option<char>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub equilibrium: Option<EquilibriumData>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "status: {}", if self.accepted() { "ACCEPTED" } else { "REJECTED" })?;
        for c in &self.checks {
            let part = c.part.map(|p| format!(" ({p})")).unwrap_or_default();
            writeln!(f, "[{}] {}{}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, part, c.detail)?;
        }
        if let Some(eq) = &self.equilibrium {
            writeln!(f, "h_eq = {:?}", eq.h_eq)?;
            writeln!(f, "v_eq = {:?}", eq.v_eq)?;
            writeln!(f, "gamma_smpl = {}", eq.gamma_smpl)?;
        }
        Ok(())
    }
}

fn check(name: &str, part: Option<char>, passed: bool, detail: impl Into<String>) -> Check {
    Check { name: name.to_string(), part, passed, detail: detail.into() }
}

pub fn validate_model(spec: &ModelSpec) -> ValidationReport {
    validate_model_with(spec, 1e-13, SpectralThresholds::default())
}

pub fn validate_model_with(spec: &ModelSpec, newton_tol: f64, thr: SpectralThresholds) -> ValidationReport {
    let mut checks = Vec::new();
    if let Err(e) = spec.check_structure() {
        checks.push(check("structure", None, false, e.to_string()));
        return ValidationReport { checks, equilibrium: None };
    }
    checks.push(check("structure", None, true, "fields consistent"));

    let grid = spec.grid_points();
    let mut worst: Option<(String, Vec<f64>, f64)> = None;
    let mut note = |name: String, h: &[f64], v: f64| {
        if v < -1e-12 && worst.as_ref().is_none_or(|w| v < w.2) {
            worst = Some((name, h.to_vec(), v));
        }
    };
    for h in &grid {
        for i in 0..spec.q {
            for j in 0..spec.q {
                note(format!("beta[{i}][{j}]"), h, spec.beta[i][j].eval(h));
            }
            note(format!("rho[{i}]"), h, spec.rho[i].eval(h));
            if let Some(im) = &spec.immigration[i] {
                note(format!("kappa[{i}]"), h, im.kappa.eval(h));
            }
        }
    }
    match worst {
        None => checks.push(check("rate nonnegativity", None, true, format!("{} grid points", grid.len()))),
        Some((name, h, v)) => checks.push(check("rate nonnegativity", None, false, format!("{name}({h:?}) = {v}"))),
    }

    let mut growth_ok = true;
    let mut growth_detail = "no immigration".to_string();
    for (i, im) in spec.immigration.iter().enumerate() {
        if let Some(im) = im {
            growth_detail = "kappa within declared linear growth".into();
            for h in &grid {
                let l1: f64 = h.iter().sum();
                if im.kappa.eval(h) > im.growth_bound * (1.0 + l1) * (1.0 + 1e-12) {
                    growth_ok = false;
                    growth_detail = format!("kappa[{i}]({h:?}) exceeds {}*(1+|h|_1)", im.growth_bound);
                    break;
                }
            }
        }
    }
    checks.push(check("immigration growth bound", None, growth_ok, growth_detail));

    let probes = spec.probe_locations();
    let mut sup_ok = true;
    let mut sup_detail = "no position-dependent rates".to_string();
    let named = spec
        .b_s
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, f)| (format!("b_s[{i}][{j}]"), f)))
        .chain(spec.d_s.iter().enumerate().map(|(i, f)| (format!("d_s[{i}]"), f)));
    for (name, f) in named {
        let Some(f) = f else { continue };
        sup_detail = "values within declared bounds".into();
        'outer: for h in grid.iter().step_by((grid.len() / 500).max(1)) {
            for x in &probes {
                let v = f.eval(&spec.domain, x, h);
                if v < -1e-12 || v > f.bound * (1.0 + 1e-12) {
                    sup_ok = false;
                    sup_detail = format!("{name} = {v} at {x:?}, h = {h:?} (bound {})", f.bound);
                    break 'outer;
                }
            }
        }
    }
    checks.push(check("position-dependent sup-norm bounds", None, sup_ok, sup_detail));

    let dd = flow::DensityDynamics::new(spec);
    let h_eq = match flow::locate_equilibrium(spec, &spec.eq_guess, newton_tol) {
        Ok((h, it)) => {
            if h.iter().all(|&x| x > 0.0) && dd.in_box(&h) {
                checks.push(check("equilibrium exists", Some('A'), true, format!("h_eq = {h:?} after {it} Newton steps")));
                Some(h)
            } else {
                checks.push(check("equilibrium exists", Some('A'), false, format!("Newton limit {h:?} not interior")));
                None
            }
        }
        Err(e) => {
            checks.push(check("equilibrium exists", Some('A'), false, e.to_string()));
            None
        }
    };

    let mut equilibrium = None;
    if let Some(h) = h_eq {
        let jac = dd.jacobian(&h);
        let sv = jac.clone().svd(false, false).singular_values;
        let isolated = sv.max() > 0.0 && sv.min() / sv.max() >= 1e-12;
        if !isolated {
            checks.push(check("equilibrium isolated", Some('A'), false, "J theta(h_eq) is singular"));
        }
        let ej = flow::eigenvalues(&jac);
        let max_re = ej.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        checks.push(check("Jacobian stable", Some('B'), max_re < 0.0, format!("eig(J) = {}", fmt_eigs(&ej))));
        let a = dd.a_matrix(&h);
        let irr = flow::is_irreducible(&a);
        checks.push(check(
            "A(h_eq) irreducible",
            Some('C'),
            irr,
            if irr { "off-diagonal pattern strongly connected".to_string() } else { "A(h_eq) is reducible".to_string() },
        ));
        checks.push(check("rates analytic at h_eq", Some('D'), true, "polynomial rates"));
        if isolated && max_re < 0.0 && irr {
            match flow::equilibrium_data(spec, &h, thr) {
                Ok(eq) => {
                    checks.push(check(
                        "Perron structure",
                        Some('C'),
                        true,
                        format!("eig(A) = {}; v_eq = {:?}", fmt_eigs(&eq.spec_a), eq.v_eq),
                    ));
                    checks.push(check(
                        "G_bar(h_eq) stable",
                        Some('B'),
                        true,
                        format!("eig(G_bar) = {}", fmt_eigs(&eq.spec_g_bar)),
                    ));
                    equilibrium = Some(eq);
                }
                Err(e) => {
                    let part = match e {
                        FlowError::Unstable { which: "G_bar(h_eq)", .. } => Some('B'),
                        _ => Some('C'),
                    };
                    checks.push(check("Perron structure", part, false, e.to_string()));
                }
            }
        }
    } else {
        checks.push(check("Jacobian stable", Some('B'), false, "no equilibrium to linearize at"));
    }
    ValidationReport { checks, equilibrium }
}

pub fn fmt_eigs(ev: &[nalgebra::Complex<f64>]) -> String {
    let parts: Vec<String> = ev
        .iter()
        .map(|z| if z.im.abs() < 1e-12 { format!("{:.6}", z.re) } else { format!("{:.6}{:+.6}i", z.re, z.im) })
        .collect();
    format!("{{{}}}", parts.join(", "))
}
