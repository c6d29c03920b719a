//! The genetics and polarity pipelines.

use std::fmt::Write as _;

use anyhow::{anyhow, Result};
use fvsim_core::config::{Config, SamplingSection, SimSetup};
use fvsim_core::engine::{farm, replicate_rng, simulate_replicate, ClanRow, EndReason, FixationObserver, NoObserver};
use fvsim_core::flow::{averaged_coefficients, EquilibriumData};
use fvsim_core::fvref::{ewens_largest_shares, moran_absorption, MORAN_MAX};
use fvsim_core::model::ModelSpec;
use fvsim_core::space::SpatialDomain;
use fvsim_core::stats::{compare_samples, fixation_estimate, KsResult};
use serde::Serialize;

use crate::commands::{equilibrium, fresh_clan_rate};
use crate::output::RunDir;
use crate::Status;

pub const GENETICS: &str = include_str!("../../../configs/genetics.toml");
pub const GENETICS_IAM: &str = include_str!("../../../configs/genetics_iam.toml");
pub const POLARITY: &str = include_str!("../../../configs/polarity.toml");

#[derive(Clone, Debug, Serialize)]
pub struct DemoCheck {
    pub name: String,
    pub value: f64,
    pub target: String,
    pub pass: bool,
    /// Informational lines do not affect the exit status.
    pub required: bool,
}

/// Stationary clan samples of one chain.
#[derive(Clone, Debug)]
pub struct ClanSample {
    pub chain: usize,
    pub t: f64,
    pub h: Vec<f64>,
    /// Particles alive at the sample, the size of the clan partition.
    pub particles: u64,
    pub row: ClanRow,
}

/// Burn-in and spacing actually used.
pub fn sampling_times(s: &SamplingSection, eq: &EquilibriumData) -> (f64, f64) {
    let tau = eq.relaxation_time();
    (s.burn_in.unwrap_or(5.0 * tau), s.spacing.unwrap_or(tau))
}

/// Independent chains, each recorded `per_chain` times after the burn-in.
pub fn sample_clans(spec: &ModelSpec, setup: &SimSetup, s: &SamplingSection, burn: f64, spacing: f64) -> Result<Vec<ClanSample>> {
    let mut cfg = setup.cfg.clone();
    cfg.record_grid = (0..s.per_chain).map(|k| burn + k as f64 * spacing).collect();
    cfg.t_end = cfg.record_grid.last().copied().unwrap_or(burn);
    cfg.clan_stats = true;
    let outs = farm(s.chains, |c| simulate_replicate(spec, &cfg, &setup.init, c as u64, &mut NoObserver));
    let mut samples = Vec::with_capacity(s.chains * s.per_chain);
    for (c, out) in outs.into_iter().enumerate() {
        let rec = out?.record;
        for r in 0..rec.rows() {
            let particles = rec.counts[r].iter().sum();
            samples.push(ClanSample { chain: c, t: rec.times[r], h: rec.h(r), particles, row: rec.clans[r] });
        }
    }
    Ok(samples)
}

pub fn clan_csv(samples: &[ClanSample]) -> String {
    let q = samples.first().map_or(0, |s| s.h.len());
    let mut s = String::from("chain,t");
    for i in 1..=q {
        let _ = write!(s, ",h_{i}");
    }
    s.push_str(",clans,largest_share,pair_chord2,pairs,centroid_disp2\n");
    for c in samples {
        let _ = write!(s, "{},{}", c.chain, c.t);
        for x in &c.h {
            let _ = write!(s, ",{x}");
        }
        let r = c.row;
        let _ = writeln!(s, ",{},{},{},{},{}", r.clans, r.largest_share, r.pair_chord2, r.pairs, r.centroid_disp2);
    }
    s
}

/// Pooled mean squared chord distance between distinct same-clan particles.
pub fn pooled_pair_dispersion(samples: &[ClanSample]) -> f64 {
    let num: f64 = samples.iter().map(|s| s.row.pair_chord2).sum();
    let den: f64 = samples.iter().map(|s| s.row.pairs).sum();
    num / den
}

pub fn largest_shares(samples: &[ClanSample]) -> Vec<f64> {
    samples.iter().map(|s| s.row.largest_share).collect()
}

/// Reference largest shares under PD(alpha), each drawn as a paintbox sample
/// of the same size as the matching simulated population. A population of m
/// particles cannot show shares strictly between (m-1)/m and 1, which the
/// continuous law puts real mass on when alpha is small.
pub fn pd_reference(samples: &[ClanSample], alpha: f64, seed: u64) -> Result<Vec<f64>> {
    let sizes: Vec<u64> = samples.iter().map(|s| s.particles).collect();
    Ok(ewens_largest_shares(alpha, &sizes, seed)?)
}

fn pd_check(name: &str, samples: &[ClanSample], alpha: f64, seed: u64, required: bool) -> Result<(DemoCheck, KsResult, Vec<f64>)> {
    let pd = pd_reference(samples, alpha, seed)?;
    let ks = compare_samples(&largest_shares(samples), &pd)?;
    let check = DemoCheck {
        name: format!("{name}: largest clan share vs Poisson-Dirichlet({alpha})"),
        value: ks.p_value,
        target: "KS p > 0.01".into(),
        pass: ks.p_value > 0.01,
        required,
    };
    Ok((check, ks, pd))
}

fn pd_csv(sim: &[f64], refs: &[(f64, Vec<f64>)]) -> String {
    let mut s = String::from("sample,simulated");
    for (a, _) in refs {
        let _ = write!(s, ",pd_{a}");
    }
    s.push('\n');
    for (k, x) in sim.iter().enumerate() {
        let _ = write!(s, "{k},{x}");
        for (_, v) in refs {
            let _ = write!(s, ",{}", v[k]);
        }
        s.push('\n');
    }
    s
}

fn validated(spec: &ModelSpec) -> Result<EquilibriumData> {
    let (report, eq) = equilibrium(spec);
    eq.ok_or_else(|| anyhow!("model rejected by validation:\n{report}"))
}

pub struct FixationOutcome {
    pub fixed: Vec<Option<u32>>,
    pub times: Vec<f64>,
    pub oracle: f64,
}

/// Runs every replicate until one site holds the whole population.
pub fn fixation_runs(cfg: &Config) -> Result<FixationOutcome> {
    let spec = cfg.build_spec()?;
    let setup = cfg.sim_setup()?;
    let mut run_cfg = setup.cfg.clone();
    run_cfg.record_grid.clear();
    let outs = farm(setup.replicates, |r| {
        let mut obs = FixationObserver { fixed_site: None };
        simulate_replicate(&spec, &run_cfg, &setup.init, r as u64, &mut obs).map(|o| {
            let t = match o.record.end {
                EndReason::Stopped { t } | EndReason::Absorbed { t } => t,
                EndReason::Completed => run_cfg.t_end,
            };
            (obs.fixed_site, t)
        })
    });
    let mut fixed = Vec::new();
    let mut times = Vec::new();
    for o in outs {
        let (f, t) = o?;
        fixed.push(f);
        times.push(t);
    }
    // initial counts of the first replicate: the allocation is deterministic
    let pop = setup.init.sample(&spec, setup.cfg.n, &mut replicate_rng(setup.cfg.seed, 0))?;
    let sites = match spec.domain {
        SpatialDomain::FiniteSet { sites, .. } => sites,
        _ => return Err(anyhow!("fixation needs a finite_set domain")),
    };
    let sc = pop.site_counts(0, sites);
    let (m, k) = (sc.iter().sum::<u64>(), sc[0]);
    let oracle = if m <= MORAN_MAX { moran_absorption(m, 1.0, k)? } else { k as f64 / m as f64 };
    Ok(FixationOutcome { fixed, times, oracle })
}

fn finish(run: &mut RunDir, checks: &[DemoCheck]) -> Result<Status> {
    #[derive(Serialize)]
    struct Summary<'a> {
        check: &'a [DemoCheck],
    }
    let text = toml::to_string(&Summary { check: checks })?;
    for c in checks {
        let tag = match (c.pass, c.required) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "info",
        };
        println!("[{tag}] {}: {} ({})", c.name, c.value, c.target);
    }
    run.write("summary.toml", text)?;
    Ok(if checks.iter().all(|c| c.pass || !c.required) { Status::Ok } else { Status::DiagnosticFailed })
}

pub fn genetics(fix: &Config, iam: &Config, run: &mut RunDir) -> Result<Status> {
    let mut checks = Vec::new();

    let f = fixation_runs(fix)?;
    let mut csv = String::from("rep,fixed_site,t\n");
    for (r, (s, t)) in f.fixed.iter().zip(&f.times).enumerate() {
        let site = s.map_or("-".to_string(), |s| s.to_string());
        let _ = writeln!(csv, "{r},{site},{t}");
    }
    run.write("fixation.csv", csv)?;
    let est = fixation_estimate(&f.fixed.iter().map(|s| *s == Some(0)).collect::<Vec<_>>());
    checks.push(DemoCheck {
        name: "fixation frequency of site-0 type".into(),
        value: est.estimate,
        target: format!("{} +- 0.04 (Wilson 95% [{:.4}, {:.4}])", f.oracle, est.lower, est.upper),
        pass: (est.estimate - f.oracle).abs() <= 0.04,
        required: true,
    });
    let unfixed = f.fixed.iter().filter(|s| s.is_none()).count();
    checks.push(DemoCheck {
        name: "replicates unfixed at the horizon".into(),
        value: unfixed as f64,
        target: "0".into(),
        pass: unfixed == 0,
        required: false,
    });

    let spec = iam.build_spec()?;
    let eq = validated(&spec)?;
    let avg = averaged_coefficients(&spec, &eq);
    let setup = iam.sim_setup()?;
    let s = iam.sampling.clone().unwrap_or(SamplingSection { chains: 1, per_chain: 500, burn_in: None, spacing: None });
    let (burn, spacing) = sampling_times(&s, &eq);
    let samples = sample_clans(&spec, &setup, &s, burn, spacing)?;
    run.write("clan_samples.csv", clan_csv(&samples))?;
    let shares = largest_shares(&samples);

    // beta / (2 rho) with rho the per-capita death slope at equilibrium
    let h = &eq.h_eq;
    let stated_alpha = spec.beta[0][0].eval(h) / (2.0 * spec.rho[0].eval(h) / h[0]);
    let derived_alpha = fresh_clan_rate(&avg) / avg.gamma_smpl;
    let seed = setup.cfg.seed;
    let (c1, _, pd1) = pd_check("stated parameter beta/2rho", &samples, stated_alpha, seed, true)?;
    let (c2, _, pd2) = pd_check("mutation rate over sampling rate", &samples, derived_alpha, seed ^ 1, false)?;
    checks.push(c1);
    checks.push(c2);
    run.write("largest_share.csv", pd_csv(&shares, &[(stated_alpha, pd1), (derived_alpha, pd2)]))?;
    finish(run, &checks)
}

/// The patch-radius formula `2D / ((k_on + k_fb) k_off / (k_fb - k_off) + D/R^2)`
/// with the rates read off a polarity spec at `h = 0`.
pub fn polarity_patch(spec: &ModelSpec, diffusion: f64, radius: f64) -> (f64, f64) {
    let z = [0.0];
    let k_fb = spec.beta[0][0].eval(&z);
    let k_off = spec.rho[0].eval(&z);
    let k_on = spec.immigration[0].as_ref().map_or(0.0, |im| im.kappa.eval(&z));
    let patch = 2.0 * diffusion / ((k_on + k_fb) * k_off / (k_fb - k_off) + diffusion / (radius * radius));
    (patch, k_on / k_fb)
}

pub struct PolarityOutcome {
    pub samples: Vec<ClanSample>,
    pub h_eq: f64,
    pub mean_h: f64,
    pub patch: f64,
    pub alpha: f64,
    pub pair: f64,
    pub centroid: f64,
}

pub fn polarity_samples(cfg: &Config) -> Result<PolarityOutcome> {
    let spec = cfg.build_spec()?;
    let eq = validated(&spec)?;
    let setup = cfg.sim_setup()?;
    let s = cfg.sampling.clone().unwrap_or(SamplingSection { chains: 1, per_chain: 500, burn_in: None, spacing: None });
    let (burn, spacing) = sampling_times(&s, &eq);
    let samples = sample_clans(&spec, &setup, &s, burn, spacing)?;
    let (diffusion, radius) = match &spec.domain {
        SpatialDomain::Sphere { radius, diffusion } => (diffusion[0], *radius),
        _ => return Err(anyhow!("the polarity pipeline needs a sphere domain")),
    };
    let (patch, alpha) = polarity_patch(&spec, diffusion, radius);
    let mean_h = samples.iter().map(|s| s.h[0]).sum::<f64>() / samples.len() as f64;
    let pair = pooled_pair_dispersion(&samples);
    let cent: Vec<f64> = samples.iter().map(|s| s.row.centroid_disp2).filter(|x| x.is_finite()).collect();
    let centroid = cent.iter().sum::<f64>() / cent.len() as f64;
    Ok(PolarityOutcome { samples, h_eq: eq.h_eq[0], mean_h, patch, alpha, pair, centroid })
}

pub fn polarity(cfg: &Config, run: &mut RunDir) -> Result<Status> {
    let p = polarity_samples(cfg)?;
    run.write("clan_samples.csv", clan_csv(&p.samples))?;
    let mut checks = vec![DemoCheck {
        name: "time-averaged membrane density".into(),
        value: p.mean_h,
        target: format!("{} +- 0.05", p.h_eq),
        pass: (p.mean_h - p.h_eq).abs() <= 0.05,
        required: true,
    }];
    let shares = largest_shares(&p.samples);
    let seed = cfg.sim.as_ref().map_or(0, |s| s.seed);
    let (c, _, pd) = pd_check("k_on/k_fb", &p.samples, p.alpha, seed, true)?;
    checks.push(c);
    run.write("largest_share.csv", pd_csv(&shares, &[(p.alpha, pd)]))?;
    checks.push(DemoCheck {
        name: "same-clan pairwise squared chord distance".into(),
        value: p.pair,
        target: format!("{:.4e} within 25%", p.patch),
        pass: (p.pair - p.patch).abs() <= 0.25 * p.patch,
        required: true,
    });
    checks.push(DemoCheck {
        name: "dominant clan squared distance to centroid".into(),
        value: p.centroid,
        target: format!("{:.4e} (centroid variant)", p.patch),
        pass: (p.centroid - p.patch).abs() <= 0.25 * p.patch,
        required: false,
    });
    finish(run, &checks)
}
