//! Acceptance run: one pass/fail line per criterion.
//!
//! `FVSIM_ACCEPT=1,3,7` restricts the run to the listed criteria.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{anyhow, Result};
use fvsim_cli::commands::{fresh_clan_rate, n_diagnostics, residual_radii};
use fvsim_cli::demos::{fixation_runs, largest_shares, pd_reference, polarity_samples, sample_clans, sampling_times};
use fvsim_core::config::Config;
use fvsim_core::engine::{
    farm, generator_consistency_test, replicate_rng, simulate_from, EventKind, NoObserver, Observer,
    SimConfig, SimView, TestFunction,
};
use fvsim_core::flow::{averaged_coefficients, find_equilibrium, DensityDynamics};
use fvsim_core::fvref::pd_largest_shares;
use fvsim_core::lambda::{residual_slope, solve_series, transport_matrix, LambdaField};
use fvsim_core::model::ModelSpec;
use fvsim_core::stats::{chi_square_gof, combine_chi_square, compare_samples, fixation_estimate, median, strictly_decreasing};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> Config {
    let text = std::fs::read_to_string(configs().join(format!("{name}.toml"))).unwrap();
    Config::from_toml_str(&text).unwrap()
}

fn spec(name: &str) -> ModelSpec {
    config(name).build_spec().unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() < tol
}

fn sorted_re(v: &[nalgebra::Complex<f64>]) -> Vec<f64> {
    let mut r: Vec<f64> = v.iter().map(|z| z.re).collect();
    r.sort_by(f64::total_cmp);
    r
}

fn c1() -> Result<Outcome> {
    let t0 = Instant::now();
    let log = spec("logistic");
    let a = find_equilibrium(&log, &log.eq_guess, 1e-13)?;
    let sym = spec("symmetric");
    let b = find_equilibrium(&sym, &sym.eq_guess, 1e-13)?;
    let secs = t0.elapsed().as_secs_f64();
    let ea = sorted_re(&b.spec_a);
    let pass = close(a.h_eq[0], 2.0, 1e-10)
        && close(a.v_eq[0], 0.5, 1e-10)
        && close(a.gamma_smpl, 1.0, 1e-10)
        && b.h_eq.iter().all(|&h| close(h, 1.5, 1e-10))
        && b.v_eq.iter().all(|&v| close(v, 1.0 / 3.0, 1e-10))
        && close(ea[0], -2.0, 1e-8)
        && close(ea[1], 0.0, 1e-8)
        && close(b.gamma_smpl, 1.0, 1e-10)
        && secs < 1.0;
    outcome(
        pass,
        format!(
            "logistic h_eq={} v_eq={} gamma={}; symmetric h_eq={:?} v_eq={:?} eig(A)={ea:?} gamma={}; {secs:.3}s",
            a.h_eq[0], a.v_eq[0], a.gamma_smpl, b.h_eq, b.v_eq, b.gamma_smpl
        ),
    )
}

fn c2() -> Result<Outcome> {
    let t0 = Instant::now();
    let log = spec("logistic");
    let eq = find_equilibrium(&log, &log.eq_guess, 1e-13)?;
    let series = solve_series(&log, &eq, 8)?;
    let mut coeff_err: f64 = 0.0;
    for k in 0..=8u32 {
        // 1/h about h = 2
        let want = (-1f64).powi(k as i32) * 0.5f64.powi(k as i32 + 1);
        let got = series.coeff(&[k]).ok_or_else(|| anyhow!("missing coefficient {k}"))?[0];
        coeff_err = coeff_err.max((got - want).abs());
    }

    let sym = spec("symmetric");
    let eq2 = find_equilibrium(&sym, &sym.eq_guess, 1e-13)?;
    let k_max = config("symmetric").lambda.map_or(8, |l| l.k_max);
    let s2 = solve_series(&sym, &eq2, k_max)?;
    let field = LambdaField::new(&sym, &s2);
    let mut grid_err: f64 = 0.0;
    for a in 0..10 {
        for b in 0..10 {
            let h = [0.8 + 1.7 * (a as f64 + 0.5) / 10.0, 0.8 + 1.7 * (b as f64 + 0.5) / 10.0];
            let lam = field.eval(&h)?;
            // normalized so that <Lambda, h> = 1
            let want = 1.0 / (h[0] + h[1]);
            grid_err = grid_err.max((lam[0] - want).abs()).max((lam[1] - want).abs());
        }
    }

    let dd = DensityDynamics::new(&sym);
    let radii = residual_radii();
    let (_, all) = residual_slope(&s2, &dd, &radii);
    let kept: Vec<f64> = radii.iter().zip(&all).filter(|(_, e)| **e > 1e-13).map(|(r, _)| *r).collect();
    let (slope, _) = residual_slope(&s2, &dd, &kept);

    let h = [0.6, 2.4];
    let whole = transport_matrix(&sym, &h, 1.6, 1e-12)?;
    let head = transport_matrix(&sym, &h, 0.7, 1e-12)?;
    let tail = transport_matrix(&sym, &whole.psi(0.7), 0.9, 1e-12)?;
    let ck = (head.at(0.0) * tail.at(0.0) - whole.at(0.0)).amax();
    let positive = whole.at(0.0).iter().all(|&x| x >= -1e-7);
    let secs = t0.elapsed().as_secs_f64();
    let pass = coeff_err < 1e-10 && grid_err < 1e-7 && slope >= k_max as f64 + 0.5 && ck < 1e-7 && positive && secs < 10.0;
    outcome(
        pass,
        format!(
            "coeff err {coeff_err:.2e}; grid err {grid_err:.2e}; slope {slope:.3} (k_max {k_max}, {} radii); CK {ck:.2e}; positive {positive}; {secs:.2}s",
            kept.len()
        ),
    )
}

fn c3() -> Result<Outcome> {
    let t0 = Instant::now();
    let n = 50u64;
    let dt = 1e-4 / n as f64;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut count = 0;
    for name in ["logistic", "symmetric", "immigration"] {
        let cfg = config(name);
        let s = cfg.build_spec()?;
        let setup = cfg.sim_setup()?;
        let pop = setup.init.sample(&s, n, &mut replicate_rng(setup.cfg.seed, 0))?;
        let sites = s.domain.sites().ok_or_else(|| anyhow!("{name} is not a finite set"))?;
        for f in TestFunction::standard_set(s.q, sites) {
            let r = generator_consistency_test(&s, &f, &pop, dt, 100_000, 1000 + count)?;
            count += 1;
            if r.z.abs() >= worst.0 {
                worst = (r.z.abs(), format!("{name}/{}", f.label));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst.0 < 4.0 && secs < 120.0, format!("{count} functions, max |z| = {:.2} at {}; {secs:.1}s", worst.0, worst.1))
}

fn c4() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = config("symmetric");
    let s = cfg.build_spec()?;
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-12)?;
    let mut dev = Vec::new();
    let mut ins = Vec::new();
    for n in [100, 400, 1600] {
        let d = n_diagnostics(&cfg, &s, &eq.h_eq, n, 50)?;
        dev.push(median(&d.deviations));
        // worst observable
        ins.push(d.inseparability.iter().map(|v| median(v)).fold(0.0, f64::max));
        let per: Vec<f64> = d.inseparability.iter().map(|v| median(v)).collect();
        eprintln!("  N={n}: median deviation {:.4}, median inseparability {per:?}", dev.last().unwrap());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = strictly_decreasing(&dev) && strictly_decreasing(&ins) && dev[2] < 0.15 && ins[2] < 0.1 && secs < 1200.0;
    outcome(pass, format!("deviation {dev:.4?}; inseparability {ins:.4?}; {secs:.0}s"))
}

fn c5() -> Result<Outcome> {
    let t0 = Instant::now();
    let f = fixation_runs(&config("genetics"))?;
    let est = fixation_estimate(&f.fixed.iter().map(|s| *s == Some(0)).collect::<Vec<_>>());
    let a_ok = (est.estimate - 0.3).abs() <= 0.04 && (f.oracle - 0.3).abs() < 1e-9;
    let ta = t0.elapsed().as_secs_f64();
    eprintln!(
        "  5a: fixation {:.4} (Wilson [{:.4}, {:.4}]) over {} runs, oracle {:.6}; {ta:.0}s",
        est.estimate,
        est.lower,
        est.upper,
        f.fixed.len(),
        f.oracle
    );

    let cfg = config("genetics_iam");
    let s = cfg.build_spec()?;
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-12)?;
    let avg = averaged_coefficients(&s, &eq);
    let setup = cfg.sim_setup()?;
    let sampling = cfg.sampling.clone().ok_or_else(|| anyhow!("genetics_iam needs [sampling]"))?;
    let (burn, spacing) = sampling_times(&sampling, &eq);
    let samples = sample_clans(&s, &setup, &sampling, burn, spacing)?;
    let shares = largest_shares(&samples);
    let h = &eq.h_eq;
    let stated = s.beta[0][0].eval(h) / (2.0 * s.rho[0].eval(h) / h[0]);
    let derived = fresh_clan_rate(&avg) / avg.gamma_smpl;
    let ks_stated = compare_samples(&shares, &pd_reference(&samples, stated, 500)?)?;
    let ks_derived = compare_samples(&shares, &pd_reference(&samples, derived, 501)?)?;
    let secs = t0.elapsed().as_secs_f64();
    eprintln!(
        "  5b: {} samples; vs PD({stated}) p = {:.3e}; info: vs PD({derived}) p = {:.3e}",
        shares.len(),
        ks_stated.p_value,
        ks_derived.p_value
    );
    let b_ok = ks_stated.p_value > 0.01 && shares.len() >= 500;
    outcome(
        a_ok && b_ok && secs < 3600.0,
        format!(
            "(a) {} fixation {:.4} vs 0.30; (b) {} KS p {:.2e} vs PD({stated}) [PD({derived}) p {:.3}]; {secs:.0}s",
            if a_ok { "pass" } else { "FAIL" },
            est.estimate,
            if b_ok { "pass" } else { "FAIL" },
            ks_stated.p_value,
            ks_derived.p_value
        ),
    )
}

fn c6() -> Result<Outcome> {
    let t0 = Instant::now();
    let p = polarity_samples(&config("polarity"))?;
    let shares = largest_shares(&p.samples);
    let ks = compare_samples(&shares, &pd_reference(&p.samples, 0.25, 600)?)?;
    // the continuous law, for reference; it has mass above (m-1)/m
    let ks_cont = compare_samples(&shares, &pd_largest_shares(0.25, shares.len(), 601)?)?;
    let secs = t0.elapsed().as_secs_f64();
    let a = (p.mean_h - 0.5).abs() <= 0.05;
    let b = ks.p_value > 0.01 && (p.alpha - 0.25).abs() < 1e-12;
    let target = 7.97e-3;
    let c = (p.pair - target).abs() <= 0.25 * target && (p.patch - target).abs() < 5e-5;
    outcome(
        a && b && c && secs < 3600.0,
        format!(
            "(a) h {:.4}; (b) KS p {:.3} vs PD(0.25) over {} samples [continuous law p {:.1e}]; (c) pair dispersion {:.3e} vs {:.3e} [centroid {:.3e}]; {secs:.0}s",
            p.mean_h,
            ks.p_value,
            shares.len(),
            ks_cont.p_value,
            p.pair,
            p.patch,
            p.centroid
        ),
    )
}

/// Site-count deltas of the two-site chain: births, deaths, jumps.
const MOVES: [(i64, i64); 6] = [(1, 0), (0, 1), (-1, 0), (0, -1), (-1, 1), (1, -1)];

fn chain_rates(n: f64, s: (u64, u64)) -> [f64; 6] {
    let (a, b) = (s.0 as f64, s.1 as f64);
    let h = (a + b) / n;
    // beta = 2, rho(h) = h, both N-scaled; migration 1 and 0.5
    [n * 2.0 * a, n * 2.0 * b, n * h * a, n * h * b, a, 0.5 * b]
}

struct JumpLog {
    prev: (u64, u64),
    counts: HashMap<(u64, u64), [u64; 6]>,
    events: u64,
}

impl Observer for JumpLog {
    fn after_event(&mut self, _: &EventKind, view: &SimView<'_>) -> bool {
        let sc = &view.site_counts.expect("finite set")[0];
        let now = (sc[0], sc[1]);
        let d = (now.0 as i64 - self.prev.0 as i64, now.1 as i64 - self.prev.1 as i64);
        let k = MOVES.iter().position(|m| *m == d).expect("single-particle move");
        self.counts.entry(self.prev).or_insert([0; 6])[k] += 1;
        self.prev = now;
        self.events += 1;
        false
    }
}

/// Forward master equation on `a + b <= cap`, RK4 in time.
fn master_equation(n: f64, start: (u64, u64), t: f64, cap: u64) -> BTreeMap<(u64, u64), f64> {
    let states: Vec<(u64, u64)> = (0..=cap).flat_map(|a| (0..=cap - a).map(move |b| (a, b))).collect();
    let index: HashMap<(u64, u64), usize> = states.iter().enumerate().map(|(k, s)| (*s, k)).collect();
    let deriv = |p: &[f64]| {
        let mut d = vec![0.0; p.len()];
        for (k, s) in states.iter().enumerate() {
            for (m, r) in MOVES.iter().zip(chain_rates(n, *s)) {
                let to = ((s.0 as i64 + m.0) as u64, (s.1 as i64 + m.1) as u64);
                if r == 0.0 {
                    continue;
                }
                if let Some(&j) = index.get(&to) {
                    d[k] -= r * p[k];
                    d[j] += r * p[k];
                }
            }
        }
        d
    };
    let mut p = vec![0.0; states.len()];
    p[index[&start]] = 1.0;
    let steps = 4000;
    let h = t / steps as f64;
    for _ in 0..steps {
        let k1 = deriv(&p);
        let y: Vec<f64> = p.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
        let k2 = deriv(&y);
        let y: Vec<f64> = p.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
        let k3 = deriv(&y);
        let y: Vec<f64> = p.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
        let k4 = deriv(&y);
        for i in 0..p.len() {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    states.into_iter().zip(p).collect()
}

fn c7() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = config("chain");
    let s = cfg.build_spec()?;
    let setup = cfg.sim_setup()?;
    let n = setup.cfg.n as f64;
    let mut rng = replicate_rng(setup.cfg.seed, 0);
    let pop = setup.init.sample(&s, setup.cfg.n, &mut rng)?;
    let start = {
        let sc = pop.site_counts(0, 2);
        (sc[0], sc[1])
    };

    // jump chain: next-move frequencies per visited state
    let mut log = JumpLog { prev: start, counts: HashMap::new(), events: 0 };
    let run = SimConfig::bare(setup.cfg.n, 600.0, setup.cfg.seed);
    let mut stream = 0;
    // the chain can die out; restart from the initial state until the budget is met
    while log.events < 100_000 {
        log.prev = start;
        simulate_from(&s, &run, pop.clone(), &mut replicate_rng(run.seed, stream), &mut log)?;
        stream += 1;
    }
    let mut parts = Vec::new();
    let mut visited: Vec<_> = log.counts.iter().collect();
    visited.sort();
    for (state, obs) in visited {
        let r = chain_rates(n, *state);
        let tot: f64 = r.iter().sum();
        let probs: Vec<f64> = r.iter().map(|x| x / tot).collect();
        parts.push(chi_square_gof(obs, &probs));
    }
    let jump = combine_chi_square(&parts);

    // occupation law at time t against the master equation
    let t = 0.25;
    let reps = 2500;
    let law = master_equation(n, start, t, 40);
    let finals = farm(reps, |r| {
        let c = SimConfig::bare(setup.cfg.n, t, setup.cfg.seed + 1);
        let mut rng = replicate_rng(c.seed, r as u64);
        simulate_from(&s, &c, pop.clone(), &mut rng, &mut NoObserver).map(|o| {
            let sc = o.state.site_counts(0, 2);
            ((sc[0], sc[1]), o.record.counters.total())
        })
    });
    let mut hist: HashMap<(u64, u64), u64> = HashMap::new();
    let mut ev = 0;
    for f in finals {
        let (st, e) = f?;
        *hist.entry(st).or_default() += 1;
        ev += e;
    }
    let mut cells: Vec<(f64, u64)> = law.iter().map(|(st, p)| (*p, hist.get(st).copied().unwrap_or(0))).collect();
    let outside: u64 = hist.iter().filter(|(st, _)| !law.contains_key(*st)).map(|(_, c)| c).sum();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mass: f64 = cells.iter().map(|c| c.0).sum();
    let (probs, obs): (Vec<f64>, Vec<u64>) = cells.into_iter().unzip();
    let occ = chi_square_gof(&obs, &probs.iter().map(|p| p / mass).collect::<Vec<_>>());
    let secs = t0.elapsed().as_secs_f64();
    let pass = jump.p_value > 0.01 && occ.p_value > 0.01 && outside == 0 && log.events >= 100_000 && ev >= 100_000 && secs < 300.0;
    outcome(
        pass,
        format!(
            "jump chain: {} events, chi2 {:.1} df {} p {:.3}; master equation at t={t}: {ev} events, chi2 {:.1} df {} p {:.3}; {secs:.1}s",
            log.events, jump.statistic, jump.df, jump.p_value, occ.statistic, occ.df, occ.p_value
        ),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn manifest_files(bytes: &[u8]) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v["files"].clone()
}

fn c8() -> Result<Outcome> {
    let t0 = Instant::now();
    let bin = env!("CARGO_BIN_EXE_fvsim");
    let c = |n: &str| configs().join(format!("{n}.toml")).to_string_lossy().into_owned();
    let runs: Vec<Vec<String>> = vec![
        vec!["validate".into(), c("logistic")],
        vec!["flow".into(), c("logistic")],
        vec!["lambda".into(), c("symmetric")],
        vec!["simulate".into(), c("immigration"), "--sim.replicates".into(), "3".into()],
        vec!["reference".into(), c("genetics"), "--reference.samples".into(), "40".into(), "--reference.dt".into(), "1e-3".into()],
        vec!["compare".into(), c("symmetric"), "--compare.N".into(), "[50, 100]".into(), "--compare.replicates".into(), "4".into()],
        ["demo", "genetics", "--N", "100", "--sim.replicates", "10", "--sampling.chains", "2", "--sampling.per_chain", "5"]
            .map(String::from)
            .to_vec(),
        ["demo", "polarity", "--N", "500", "--seed", "7", "--sampling.chains", "2", "--sampling.per_chain", "4", "--sampling.burn_in", "1"]
            .map(String::from)
            .to_vec(),
    ];
    let mut bad = Vec::new();
    for args in &runs {
        let mut seen = Vec::new();
        for _ in 0..2 {
            let root = tempfile::tempdir()?;
            let st = Command::new(bin).args(args).arg("--runs").arg(root.path()).output()?;
            let code = st.status.code().unwrap_or(-1);
            let dirs: Vec<PathBuf> = std::fs::read_dir(root.path())?.map(|e| e.unwrap().path()).collect();
            if dirs.len() != 1 {
                return Err(anyhow!("{args:?}: expected one run directory, exit {code}"));
            }
            let mut files = tree(&dirs[0]);
            let manifest = files.remove("manifest.json").ok_or_else(|| anyhow!("{args:?}: no manifest"))?;
            seen.push((code, dirs[0].file_name().unwrap().to_owned(), files, manifest_files(&manifest)));
        }
        if seen[0] != seen[1] {
            bad.push(format!("{} {}", args[0], args[1]));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(bad.is_empty(), format!("{} subcommand runs repeated; differing: {bad:?}; {secs:.0}s", runs.len()))
}

/// Criteria whose failure is a documented property of the stated target
/// rather than of the implementation.
const EXPECTED_FAILURES: [&str; 1] = ["5"];

fn main() {
    let only: Option<Vec<String>> = std::env::var("FVSIM_ACCEPT").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let criteria: [(&str, &str, fn() -> Result<Outcome>); 8] = [
        ("1", "equilibrium pipeline", c1),
        ("2", "Lambda solver", c2),
        ("3", "generator consistency", c3),
        ("4", "N-scaling diagnostics", c4),
        ("5", "genetics demo", c5),
        ("6", "polarity demo", c6),
        ("7", "engine exactness (N=5 chain)", c7),
        ("8", "determinism", c8),
    ];
    let mut unexpected = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let expected = EXPECTED_FAILURES.contains(&id);
        let tag = match (pass, expected) {
            (true, _) => "PASS",
            (false, true) => "FAIL (expected)",
            (false, false) => "FAIL",
        };
        if !pass && !expected {
            unexpected += 1;
        }
        println!("criterion {id} [{name}]: {tag}: {detail}");
    }
    if unexpected > 0 {
        std::process::exit(1);
    }
}
