//! The single-config subcommands.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use fvsim_core::config::Config;
use fvsim_core::engine::{farm, replicate_rng, simulate_replicate, NoObserver, TrajectoryRecord};
use fvsim_core::flow::{averaged_coefficients, integrate_flow, AveragedCoefficients, DensityDynamics, EquilibriumData};
use fvsim_core::fvref::{
    moran_absorption, moran_absorption_ratio, wf_final, MoranFv, PdParams, WfParams, MORAN_MAX,
};
use fvsim_core::lambda::{residual_slope, solve_series, LambdaField};
use fvsim_core::model::{Dispersal, Kernel, ModelSpec, PopulationState};
use fvsim_core::space::{BasisFn, Location, SpatialDomain};
use fvsim_core::stats::{density_deviation, inseparability, median, strictly_decreasing, yn_paths};
use fvsim_core::validate::{fmt_eigs, validate_model, ValidationReport};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::output::RunDir;
use crate::Status;

/// Validated model with its equilibrium, or the rejecting report.
pub fn equilibrium(spec: &ModelSpec) -> (ValidationReport, Option<EquilibriumData>) {
    let report = validate_model(spec);
    let eq = if report.accepted() { report.equilibrium.clone() } else { None };
    (report, eq)
}

pub fn validate(cfg: &Config, run: &mut RunDir) -> Result<Status> {
    let spec = cfg.build_spec()?;
    let report = validate_model(&spec);
    let text = report.to_string();
    print!("{text}");
    run.write("report.txt", text)?;
    Ok(if report.accepted() { Status::Ok } else { Status::ValidationFailed })
}

#[derive(Serialize)]
struct EquilibriumReport {
    accepted: bool,
    h_eq: Vec<f64>,
    v_eq: Vec<f64>,
    gamma_smpl: f64,
    spectrum_a: String,
    spectrum_j: String,
    relaxation_time: f64,
    newton_iterations: usize,
    failures: Vec<String>,
}

fn equilibrium_report(report: &ValidationReport) -> Option<EquilibriumReport> {
    let eq = report.equilibrium.as_ref()?;
    Some(EquilibriumReport {
        accepted: report.accepted(),
        h_eq: eq.h_eq.clone(),
        v_eq: eq.v_eq.clone(),
        gamma_smpl: eq.gamma_smpl,
        spectrum_a: fmt_eigs(&eq.spec_a),
        spectrum_j: fmt_eigs(&eq.spec_j),
        relaxation_time: eq.relaxation_time(),
        newton_iterations: eq.newton_iters,
        failures: report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect(),
    })
}

pub fn flow(cfg: &Config, run: &mut RunDir) -> Result<Status> {
    let spec = cfg.build_spec()?;
    let (h0, t_end, tol, dt_out) = match &cfg.flow {
        Some(f) => (f.h0.clone(), f.t_end, f.tol, f.dt_out),
        None => (spec.eq_guess.clone(), 10.0, 1e-10, 0.1),
    };
    if h0.len() != spec.q {
        bail!("flow.h0 must have {} entries", spec.q);
    }
    let traj = integrate_flow(&spec, &h0, t_end, tol)?;
    let mut csv = String::from("t");
    for i in 1..=spec.q {
        let _ = write!(csv, ",h_{i}");
    }
    csv.push('\n');
    let steps = (t_end / dt_out).round() as usize;
    for k in 0..=steps {
        let t = if k == steps { t_end } else { k as f64 * dt_out };
        let h = traj.at(t);
        let _ = write!(csv, "{t}");
        for x in h {
            let _ = write!(csv, ",{x}");
        }
        csv.push('\n');
    }
    run.write("flow.csv", csv)?;
    let report = validate_model(&spec);
    let mut text = report.to_string();
    if let Some(r) = equilibrium_report(&report) {
        text = toml::to_string(&r)?;
    }
    print!("{text}");
    run.write("equilibrium.toml", text)?;
    Ok(if report.accepted() { Status::Ok } else { Status::ValidationFailed })
}

/// Radii of the residual-vs-radius fit.
pub fn residual_radii() -> Vec<f64> {
    (0..6).map(|k| 0.05 * 1.5f64.powi(k)).collect()
}

#[derive(Serialize)]
struct LambdaReport {
    k_max: usize,
    slope: f64,
    target_slope: f64,
    slope_ok: bool,
    fitted_radii: usize,
    trust_radius: f64,
    eps0: f64,
    c_hat: f64,
}

pub fn lambda(cfg: &Config, run: &mut RunDir) -> Result<Status> {
    let spec = cfg.build_spec()?;
    let (report, eq) = equilibrium(&spec);
    let Some(eq) = eq else {
        print!("{report}");
        run.write("report.txt", report.to_string())?;
        return Ok(Status::ValidationFailed);
    };
    let (k_max, points) = match &cfg.lambda {
        Some(l) => (l.k_max, l.points.clone()),
        None => (8, Vec::new()),
    };
    let series = solve_series(&spec, &eq, k_max)?;
    let q = spec.q;
    let mut csv = String::new();
    let cols: Vec<String> =
        (1..=q).map(|i| format!("alpha_{i}")).chain((1..=q).map(|i| format!("gamma_{i}"))).collect();
    let _ = writeln!(csv, "{}", cols.join(","));
    for (alpha, gamma) in &series.coeffs {
        let row: Vec<String> = alpha.iter().map(u32::to_string).chain(gamma.iter().map(|g| format!("{g}"))).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    run.write("coefficients.csv", csv)?;

    let dd = DensityDynamics::new(&spec);
    let radii = residual_radii();
    let (_, all) = residual_slope(&series, &dd, &radii);
    // residuals at the rounding floor carry no slope information
    let kept: Vec<f64> = radii.iter().zip(&all).filter(|(_, e)| **e > 1e-13).map(|(r, _)| *r).collect();
    let (slope, _) = if kept.len() >= 3 { residual_slope(&series, &dd, &kept) } else { (f64::NAN, Vec::new()) };
    let mut res = String::from("radius,residual\n");
    for (r, e) in radii.iter().zip(&all) {
        let _ = writeln!(res, "{r},{e}");
    }
    run.write("residuals.csv", res)?;

    if !points.is_empty() {
        let field = LambdaField::new(&spec, &series);
        let mut ext = String::new();
        let cols: Vec<String> =
            (1..=q).map(|i| format!("h_{i}")).chain((1..=q).map(|i| format!("lambda_{i}"))).collect();
        let _ = writeln!(ext, "{}", cols.join(","));
        for p in &points {
            let vals = field.eval(p).unwrap_or_else(|_| vec![f64::NAN; q]);
            let row: Vec<String> = p.iter().chain(&vals).map(|x| format!("{x}")).collect();
            let _ = writeln!(ext, "{}", row.join(","));
        }
        run.write("extension.csv", ext)?;
    }

    let target = k_max as f64 + 0.5;
    let lr = LambdaReport {
        k_max,
        slope,
        target_slope: target,
        slope_ok: slope >= target,
        fitted_radii: kept.len(),
        trust_radius: series.r_trust,
        eps0: series.eps0,
        c_hat: series.c_hat,
    };
    let text = toml::to_string(&lr)?;
    print!("{text}");
    run.write("lambda_report.toml", text)?;
    // too few radii above the rounding floor means the series is exact there
    Ok(if lr.slope_ok || kept.len() < 3 { Status::Ok } else { Status::DiagnosticFailed })
}

/// Portable final-state text: one particle per line.
pub fn snapshot(pop: &PopulationState) -> String {
    let mut s = format!("# N={} q={} t={}\ntype,location,clan\n", pop.n_scale, pop.q(), pop.t);
    for (i, ps) in pop.types.iter().enumerate() {
        for p in ps {
            let loc = match p.loc {
                Location::Site(k) => format!("site:{k}"),
                Location::Arc(a) => format!("arc:{a}"),
                Location::Point([x, y, z]) => format!("point:{x} {y} {z}"),
                Location::Unit(x) => format!("unit:{x}"),
            };
            let clan = p.clan.map_or("-".to_string(), |c| format!("{c}"));
            let _ = writeln!(s, "{i},{loc},{clan}");
        }
    }
    s
}

fn event_line(rep: usize, rec: &TrajectoryRecord, pop: &PopulationState) -> Result<String> {
    let c = &rec.counters;
    let (end, t_stop) = match rec.end {
        fvsim_core::engine::EndReason::Completed => ("completed", None),
        fvsim_core::engine::EndReason::Absorbed { t } => ("absorbed", Some(t)),
        fvsim_core::engine::EndReason::Stopped { t } => ("stopped", Some(t)),
    };
    Ok(serde_json::to_string(&serde_json::json!({
        "rep": rep,
        "end": end,
        "t_stop": t_stop,
        "local_births": c.local_births,
        "dispersed_births": c.dispersed_births,
        "deaths": c.deaths,
        "immigrations": c.immigrations,
        "migrations": c.migrations,
        "rejected": c.rejected,
        "final_counts": pop.counts(),
    }))?)
}

pub fn simulate(cfg: &Config, run: &mut RunDir) -> Result<Status> {
    let spec = cfg.build_spec()?;
    let setup = cfg.sim_setup()?;
    let outs = farm(setup.replicates, |r| simulate_replicate(&spec, &setup.cfg, &setup.init, r as u64, &mut NoObserver));
    let mut events = String::new();
    for (r, out) in outs.into_iter().enumerate() {
        let out = out.with_context(|| format!("replicate {r}"))?;
        run.write(&format!("trajectories/rep_{r:05}.csv"), out.record.to_csv())?;
        run.write(&format!("states/rep_{r:05}.txt"), snapshot(&out.state))?;
        events.push_str(&event_line(r, &out.record, &out.state)?);
        events.push('\n');
    }
    run.write("events.jsonl", events)?;
    println!("{} replicates written to {}", setup.replicates, run.path.display());
    Ok(Status::Ok)
}

/// Per-lineage rate of founding a fresh clan: infinitely-many-alleles
/// dispersal plus immigration.
pub fn fresh_clan_rate(avg: &AveragedCoefficients) -> f64 {
    let mutation: f64 = avg
        .c_avg
        .iter()
        .filter_map(|(_, _, w, d)| match d {
            Dispersal::Rare { c, kernel: Kernel::FreshClan } => Some(w * c),
            _ => None,
        })
        .sum();
    mutation + avg.i_avg.iter().map(|(_, r, _)| r).sum::<f64>()
}

/// Wright-Fisher parameters matching the averaged coefficients on a finite
/// set: traits are sites.
pub fn wf_params(avg: &AveragedCoefficients) -> Result<WfParams> {
    let SpatialDomain::FiniteSet { sites, .. } = avg.domain else {
        bail!("the Wright-Fisher reference needs a finite_set domain");
    };
    let mut theta = avg.migration_matrix().unwrap_or_else(|| DMatrix::zeros(sites, sites));
    let mut add_kernel = |rate: f64, k: &Kernel| {
        for a in 0..sites {
            for b in 0..sites {
                if a != b {
                    theta[(a, b)] += rate * k.site_prob(sites, a, b);
                }
            }
        }
    };
    for (_, _, w, d) in &avg.c_avg {
        if let Dispersal::Rare { c, kernel } = d {
            add_kernel(w * c, kernel);
        }
    }
    for (_, r, law) in &avg.i_avg {
        add_kernel(*r, law);
    }
    for a in 0..sites {
        theta[(a, a)] = 0.0;
    }
    let alpha = (0..sites)
        .map(|s| {
            let x = Location::Site(s as u32);
            avg.b_s_avg(&x) - avg.d_s_avg(&x)
        })
        .collect();
    Ok(WfParams { theta, alpha, resample: avg.gamma_smpl })
}

fn averaged(spec: &ModelSpec) -> Result<AveragedCoefficients> {
    let (report, eq) = equilibrium(spec);
    let eq = eq.ok_or_else(|| anyhow!("model rejected by validation:\n{report}"))?;
    Ok(averaged_coefficients(spec, &eq))
}

pub fn reference(cfg: &Config, run: &mut RunDir) -> Result<Status> {
    let r = cfg.reference.as_ref().ok_or_else(|| anyhow!("reference section required"))?;
    let spec = cfg.build_spec()?;
    let mut status = Status::Ok;
    let csv = match r.kind.as_str() {
        "moran" => {
            let m = r.m.ok_or_else(|| anyhow!("reference.M required"))?;
            let k = r.k.ok_or_else(|| anyhow!("reference.k required"))?;
            let w = r.fitness.unwrap_or(1.0);
            if m > MORAN_MAX {
                bail!("reference.M exceeds {MORAN_MAX}");
            }
            let a = moran_absorption(m, w, k)?;
            let b = moran_absorption_ratio(m, w, k)?;
            if (a - b).abs() > 1e-12 {
                status = Status::DiagnosticFailed;
            }
            format!("M,fitness,k,fixation_linear,fixation_ratio\n{m},{w},{k},{a},{b}\n")
        }
        "pd" => {
            let alpha = match r.alpha {
                Some(a) => a,
                None => {
                    let avg = averaged(&spec)?;
                    fresh_clan_rate(&avg) / avg.gamma_smpl
                }
            };
            let p = PdParams::new(alpha);
            let draws = farm(r.samples, |k| {
                fvsim_core::fvref::sample_poisson_dirichlet(&p, &mut replicate_rng(r.seed, k as u64))
            });
            let mut s = String::from("sample,w1,w2,w3,w4,w5\n");
            for (k, d) in draws.into_iter().enumerate() {
                let d = d?;
                let row: Vec<String> = (0..5).map(|j| format!("{}", d.get(j).copied().unwrap_or(0.0))).collect();
                let _ = writeln!(s, "{k},{}", row.join(","));
            }
            s
        }
        "wf" => {
            let avg = averaged(&spec)?;
            let p = wf_params(&avg)?;
            let x0 = r.x0.clone().ok_or_else(|| anyhow!("reference.x0 required"))?;
            let (t, dt) = (r.t_end.unwrap_or(1.0), r.dt.unwrap_or(1e-4));
            let finals = farm(r.samples, |k| wf_final(&p, &x0, t, dt, r.seed, k as u64));
            let mut s = String::from("sample");
            for i in 1..=x0.len() {
                let _ = write!(s, ",x_{i}");
            }
            s.push('\n');
            for (k, x) in finals.into_iter().enumerate() {
                let row: Vec<String> = x?.iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(s, "{k},{}", row.join(","));
            }
            s
        }
        "moran_fv" => {
            let avg = averaged(&spec)?;
            let m = r.m.unwrap_or(1000) as usize;
            let fv = MoranFv::new(&avg, m)?;
            let z = fv.calibrate(r.seed, 10_000);
            let calib = match &z {
                Ok(z) => format!("calibration_z = {z}\n"),
                Err(e) => {
                    status = Status::DiagnosticFailed;
                    format!("calibration_error = {:?}\n", e.to_string())
                }
            };
            run.write("calibration.toml", calib)?;
            let t = r.t_end.unwrap_or(1.0);
            let law = match cfg.initial.as_ref().and_then(|i| i.laws.first()) {
                Some(l) => fvsim_core::config::law(l, "initial.laws")?,
                None => Kernel::Uniform,
            };
            let obs: Vec<BasisFn> = match &cfg.sim {
                Some(s) if !s.observables.is_empty() => {
                    s.observables.iter().map(fvsim_core::config::observable_basis).collect::<Result<_, _>>()?
                }
                _ => vec![BasisFn::Constant],
            };
            let paths = farm(r.samples, |k| {
                let mut rng = replicate_rng(r.seed, k as u64);
                let parts = fv.initial(&law, &mut rng);
                fv.run(parts, t, &[t], &obs, &mut rng)
            });
            let mut s = String::from("sample");
            for o in &obs {
                let _ = write!(s, ",{}", o.label());
            }
            s.push('\n');
            for (k, p) in paths.iter().enumerate() {
                let row: Vec<String> = p.obs[0].iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(s, "{k},{}", row.join(","));
            }
            s
        }
        other => bail!("unknown reference.kind '{other}'"),
    };
    run.write("samples.csv", csv)?;
    println!("reference '{}' written to {}", r.kind, run.path.display());
    Ok(status)
}

#[derive(Serialize)]
struct NRow {
    #[serde(rename = "N")]
    n: u64,
    median_deviation: f64,
    median_inseparability: Vec<f64>,
    median_sup_yn: Vec<f64>,
}

#[derive(Serialize)]
pub struct CheckLine {
    pub name: String,
    pub value: String,
    pub pass: bool,
}

#[derive(Serialize)]
struct CompareSummary {
    labels: Vec<String>,
    rows: Vec<NRow>,
    check: Vec<CheckLine>,
}

/// Per-replicate N-scaling diagnostics at one `N`.
pub struct NDiagnostics {
    pub n: u64,
    pub deviations: Vec<f64>,
    /// Observable-major, then replicate.
    pub inseparability: Vec<Vec<f64>>,
    pub sup_yn: Vec<Vec<f64>>,
}

pub fn n_diagnostics(cfg: &Config, spec: &ModelSpec, h_eq: &[f64], n: u64, reps: usize) -> Result<NDiagnostics> {
    let mut c = cfg.clone();
    c.sim.as_mut().ok_or_else(|| anyhow!("sim section required"))?.n = n;
    let setup = c.sim_setup()?;
    let outs = farm(reps, |r| simulate_replicate(spec, &setup.cfg, &setup.init, r as u64, &mut NoObserver));
    let mut d = NDiagnostics { n, deviations: Vec::new(), inseparability: Vec::new(), sup_yn: Vec::new() };
    let labels: Vec<String> = setup.cfg.observables.iter().map(BasisFn::label).collect();
    d.inseparability = vec![Vec::new(); labels.len()];
    d.sup_yn = vec![Vec::new(); labels.len()];
    for out in outs {
        let rec = out?.record;
        d.deviations.push(density_deviation(&rec, h_eq, setup.horizon)?);
        for (k, l) in labels.iter().enumerate() {
            d.inseparability[k].push(inseparability(&rec, l, setup.horizon)?);
            let sup = yn_paths(&rec, l)?
                .iter()
                .zip(&rec.times)
                .filter(|(_, &t)| t >= rec.t_shift - 1e-9)
                .flat_map(|(row, _)| row.iter().map(|x| x.abs()))
                .fold(0.0, f64::max);
            d.sup_yn[k].push(sup);
        }
    }
    Ok(d)
}

pub fn compare(cfg: &Config, run: &mut RunDir) -> Result<Status> {
    let cmp = cfg.compare.as_ref().ok_or_else(|| anyhow!("compare section required"))?;
    let sim = cfg.sim.as_ref().ok_or_else(|| anyhow!("sim section required"))?;
    let spec = cfg.build_spec()?;
    let (report, eq) = equilibrium(&spec);
    let Some(eq) = eq else {
        print!("{report}");
        run.write("report.txt", report.to_string())?;
        return Ok(Status::ValidationFailed);
    };
    let reps = cmp.replicates.unwrap_or(sim.replicates);
    let labels: Vec<String> =
        sim.observables.iter().map(|o| fvsim_core::config::observable_basis(o).map(|b| b.label())).collect::<Result<_, _>>()?;
    let mut all = Vec::new();
    for &n in &cmp.n {
        all.push(n_diagnostics(cfg, &spec, &eq.h_eq, n, reps)?);
    }
    let mut csv = String::from("N,rep,deviation");
    for l in &labels {
        let _ = write!(csv, ",insep_{l},sup_yn_{l}");
    }
    csv.push('\n');
    for d in &all {
        for r in 0..d.deviations.len() {
            let _ = write!(csv, "{},{r},{}", d.n, d.deviations[r]);
            for k in 0..labels.len() {
                let _ = write!(csv, ",{},{}", d.inseparability[k][r], d.sup_yn[k][r]);
            }
            csv.push('\n');
        }
    }
    run.write("diagnostics.csv", csv)?;

    let rows: Vec<NRow> = all
        .iter()
        .map(|d| NRow {
            n: d.n,
            median_deviation: median(&d.deviations),
            median_inseparability: d.inseparability.iter().map(|v| median(v)).collect(),
            median_sup_yn: d.sup_yn.iter().map(|v| median(v)).collect(),
        })
        .collect();
    let mut check = Vec::new();
    let devs: Vec<f64> = rows.iter().map(|r| r.median_deviation).collect();
    check.push(CheckLine { name: "deviation decreasing in N".into(), value: format!("{devs:?}"), pass: strictly_decreasing(&devs) });
    // a single type has nothing to separate
    if spec.q > 1 {
        for (k, l) in labels.iter().enumerate() {
            let v: Vec<f64> = rows.iter().map(|r| r.median_inseparability[k]).collect();
            check.push(CheckLine {
                name: format!("inseparability[{l}] decreasing in N"),
                value: format!("{v:?}"),
                pass: strictly_decreasing(&v),
            });
        }
    }
    if let (Some(max), Some(last)) = (cmp.max_deviation, rows.last()) {
        check.push(CheckLine {
            name: format!("deviation at N={} below {max}", last.n),
            value: format!("{}", last.median_deviation),
            pass: last.median_deviation < max,
        });
    }
    if let (Some(max), Some(last)) = (cmp.max_inseparability, rows.last()) {
        if spec.q > 1 {
            let worst = last.median_inseparability.iter().copied().fold(0.0, f64::max);
            check.push(CheckLine {
                name: format!("inseparability at N={} below {max}", last.n),
                value: format!("{worst}"),
                pass: worst < max,
            });
        }
    }
    let ok = check.iter().all(|c| c.pass);
    let text = toml::to_string(&CompareSummary { labels, rows, check })?;
    print!("{text}");
    run.write("summary.toml", text)?;
    Ok(if ok { Status::Ok } else { Status::DiagnosticFailed })
}
