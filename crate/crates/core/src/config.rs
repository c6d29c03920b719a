//! TOML model files.
//!
//! A file has a required `[model]` and `[domain]` table, optional arrays of
//! `[[position]]`, `[[dispersal]]` and `[[immigration]]` tables, and optional
//! run sections (`[sim]`, `[initial]`, `[flow]`, `[lambda]`, `[reference]`).
//! Rates are polynomial strings in `h1..hq`; the README lists every key.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::{ClanInit, InitialLaw, SimConfig};
use crate::error::ModelError;
use crate::model::{Dispersal, Immigration, Kernel, ModelSpec, PositionFn};
use crate::poly::RateFn;
use crate::space::{BasisFn, SpatialDomain};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum RateSrc {
    Text(String),
    Num(f64),
}

impl RateSrc {
    pub fn text(&self) -> String {
        match self {
            Self::Text(s) => s.clone(),
            Self::Num(x) => format!("{x}"),
        }
    }

    fn rate(&self, q: usize, field: &str) -> Result<RateFn, ModelError> {
        RateFn::parse(&self.text(), q).map_err(|e| ModelError::field(field, e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub q: usize,
    pub h_max: f64,
    #[serde(default = "default_degree_cap")]
    pub degree_cap: u32,
    #[serde(default)]
    pub track_clans: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equilibrium_guess: Option<Vec<f64>>,
    pub beta: Vec<Vec<RateSrc>>,
    pub rho: Vec<RateSrc>,
}

fn default_degree_cap() -> u32 {
    8
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    /// One rate matrix per type.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub migration: Option<Vec<Vec<Vec<f64>>>>,
    /// Shortcut: every type jumps to each other site at this rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub migration_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circumference: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BasisTerm {
    pub basis: String,
    #[serde(default)]
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 3]>,
    pub coef: RateSrc,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PositionSection {
    /// `birth` (b^s_ij) or `death` (d^s_i).
    pub kind: String,
    pub i: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    pub bound: f64,
    pub terms: Vec<BasisTerm>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DispersalSection {
    pub i: usize,
    pub j: usize,
    /// `rare` or `local`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<LawSection>,
}

/// Location law: `uniform`, `sites`, `fresh_clan` or `vmf`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LawSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concentration: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ImmigrationSection {
    pub i: usize,
    pub kappa: RateSrc,
    pub growth_bound: f64,
    pub law: LawSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObservableSection {
    pub basis: String,
    #[serde(default)]
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_shift: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    #[serde(default)]
    pub observables: Vec<ObservableSection>,
    #[serde(default)]
    pub clan_stats: bool,
}

fn one() -> usize {
    1
}

fn default_grid_step() -> f64 {
    0.05
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub h: Vec<f64>,
    /// One law per type (or a single law for all types).
    #[serde(default)]
    pub laws: Vec<LawSection>,
    /// `distinct`, `single` or `none`.
    #[serde(default = "default_clans")]
    pub clans: String,
}

fn default_clans() -> String {
    "distinct".into()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub h0: Vec<f64>,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_dt_out")]
    pub dt_out: f64,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_dt_out() -> f64 {
    0.1
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LambdaSection {
    #[serde(default = "default_kmax")]
    pub k_max: usize,
    #[serde(default = "default_tmax")]
    pub t_max: f64,
    #[serde(default = "default_lambda_tol")]
    pub tol: f64,
    /// Points at which to evaluate the extended solution.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
}

fn default_kmax() -> usize {
    8
}

fn default_tmax() -> f64 {
    200.0
}

fn default_lambda_tol() -> f64 {
    1e-12
}

impl Default for LambdaSection {
    fn default() -> Self {
        Self { k_max: default_kmax(), t_max: default_tmax(), tol: default_lambda_tol(), points: Vec::new() }
    }
}

/// Parameters for the `reference` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    /// `wf`, `moran`, `pd` or `moran_fv`.
    pub kind: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "T")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "M")]
    pub m: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
}

fn default_samples() -> usize {
    1000
}

/// Whole configuration file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub domain: DomainSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub position: Vec<PositionSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dispersal: Vec<DispersalSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub immigration: Vec<ImmigrationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
}

/// Stationary sampling of clan statistics: independent chains, each burnt
/// in and then recorded at a fixed spacing. Unset times default to multiples
/// of the density relaxation time.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    #[serde(default = "one")]
    pub chains: usize,
    pub per_chain: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
}

/// N-scaling diagnostics run by `compare`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(rename = "N")]
    pub n: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_deviation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_inseparability: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Toml(String),
    #[error("override `{key}`: {msg}")]
    Override { key: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key = value` overrides on dotted paths.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Toml(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        value.try_into::<Config>().map_err(|e| ConfigError::Toml(e.to_string()))
    }

    /// Deterministic re-serialization used for hashing.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn build_spec(&self) -> Result<ModelSpec, ModelError> {
        build_spec(self)
    }
}

fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override {
            key: key.to_string(),
            msg: format!("`{p}` is not a table"),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, ModelError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(ModelError::field(field, "ragged or empty matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn basis(name: &str, index: u32, axis: Option<[f64; 3]>, field: &str) -> Result<BasisFn, ModelError> {
    Ok(match name {
        "one" | "constant" => BasisFn::Constant,
        "site" => BasisFn::Indicator(index as usize),
        "cos" => BasisFn::Cos(index),
        "sin" => BasisFn::Sin(index),
        "zonal" => BasisFn::Zonal { l: index, axis: axis.unwrap_or([0.0, 0.0, 1.0]) },
        "coord" => BasisFn::Coord(index as usize),
        other => return Err(ModelError::field(field, format!("unknown basis '{other}'"))),
    })
}

pub fn observable_basis(o: &ObservableSection) -> Result<BasisFn, ModelError> {
    basis(&o.basis, o.index, o.axis, "sim.observables")
}

pub fn law(l: &LawSection, field: &str) -> Result<Kernel, ModelError> {
    Ok(match l.kind.as_str() {
        "uniform" => Kernel::Uniform,
        "fresh_clan" => Kernel::FreshClan,
        "sites" => {
            let w = l.weights.as_ref().ok_or_else(|| ModelError::field(field, "sites law needs `weights`"))?;
            Kernel::Sites(matrix(w, field)?)
        }
        "vmf" => Kernel::VonMisesFisher {
            mean: l.mean.ok_or_else(|| ModelError::field(field, "vmf law needs `mean`"))?,
            kappa: l.concentration.unwrap_or(0.0),
        },
        other => return Err(ModelError::field(field, format!("unknown law '{other}'"))),
    })
}

/// Everything `simulate` needs besides the model.
#[derive(Clone, Debug)]
pub struct SimSetup {
    pub cfg: SimConfig,
    pub init: InitialLaw,
    pub replicates: usize,
    pub horizon: f64,
}

impl Config {
    pub fn sim_setup(&self) -> Result<SimSetup, ModelError> {
        let sim = self.sim.as_ref().ok_or_else(|| ModelError::field("sim", "section required"))?;
        let ini = self.initial.as_ref().ok_or_else(|| ModelError::field("initial", "section required"))?;
        if sim.n == 0 {
            return Err(ModelError::field("sim.N", "must be positive"));
        }
        if !(sim.grid_step > 0.0) || !(sim.t_end >= 0.0) {
            return Err(ModelError::field("sim", "T must be >= 0 and grid_step > 0"));
        }
        let mut cfg = SimConfig::new(sim.n, sim.t_end, sim.grid_step, sim.seed);
        if let Some(ts) = sim.t_shift {
            if !(ts > 0.0) {
                return Err(ModelError::field("sim.t_shift", "must be positive"));
            }
            cfg.t_shift = ts;
            cfg.set_grid(sim.t_end, sim.grid_step);
        }
        cfg.observables = sim.observables.iter().map(observable_basis).collect::<Result<_, _>>()?;
        cfg.clan_stats = sim.clan_stats;
        let laws = if ini.laws.is_empty() {
            vec![Kernel::Uniform]
        } else {
            ini.laws.iter().map(|l| law(l, "initial.laws")).collect::<Result<_, _>>()?
        };
        let clans = match ini.clans.as_str() {
            "distinct" => ClanInit::Distinct,
            "single" => ClanInit::Single,
            other => return Err(ModelError::field("initial.clans", format!("unknown clan init '{other}'"))),
        };
        Ok(SimSetup {
            cfg,
            init: InitialLaw { h0: ini.h.clone(), laws, clans },
            replicates: sim.replicates,
            horizon: sim.t_end,
        })
    }
}

fn build_spec(cfg: &Config) -> Result<ModelSpec, ModelError> {
    let m = &cfg.model;
    let q = m.q;
    if m.beta.len() != q || m.beta.iter().any(|r| r.len() != q) {
        return Err(ModelError::field("model.beta", format!("must be a {q}x{q} array")));
    }
    if m.rho.len() != q {
        return Err(ModelError::field("model.rho", format!("must have {q} entries")));
    }
    let beta = m
        .beta
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(j, s)| s.rate(q, &format!("model.beta[{i}][{j}]"))).collect())
        .collect::<Result<Vec<Vec<_>>, _>>()?;
    let rho = m.rho.iter().enumerate().map(|(i, s)| s.rate(q, &format!("model.rho[{i}]"))).collect::<Result<Vec<_>, _>>()?;

    let d = &cfg.domain;
    let diffusion = || d.diffusion.clone().ok_or_else(|| ModelError::field("domain.diffusion", "required"));
    let domain = match d.kind.as_str() {
        "finite_set" => {
            let sites = d.sites.ok_or_else(|| ModelError::field("domain.sites", "required"))?;
            let migration = match (&d.migration, d.migration_rate) {
                (Some(ms), _) => ms.iter().map(|x| matrix(x, "domain.migration")).collect::<Result<Vec<_>, _>>()?,
                (None, rate) => {
                    let r = rate.unwrap_or(0.0);
                    let mm = DMatrix::from_fn(sites, sites, |a, b| if a == b { -r * (sites as f64 - 1.0) } else { r });
                    vec![mm; q]
                }
            };
            SpatialDomain::FiniteSet { sites, migration }
        }
        "circle" => SpatialDomain::Circle {
            circumference: d.circumference.ok_or_else(|| ModelError::field("domain.circumference", "required"))?,
            diffusion: diffusion()?,
        },
        "sphere" => SpatialDomain::Sphere {
            radius: d.radius.ok_or_else(|| ModelError::field("domain.radius", "required"))?,
            diffusion: diffusion()?,
        },
        "interval" => SpatialDomain::Interval { diffusion: diffusion()? },
        other => return Err(ModelError::field("domain.kind", format!("unknown domain '{other}'"))),
    };

    let mut spec = ModelSpec::basic(domain, beta, rho, m.h_max);
    spec.degree_cap = m.degree_cap;
    spec.track_clans = m.track_clans;
    if let Some(g) = &m.equilibrium_guess {
        spec.eq_guess = g.clone();
    }
    let idx = |i: usize, field: &str| -> Result<usize, ModelError> {
        if i < q {
            Ok(i)
        } else {
            Err(ModelError::field(field, format!("type index {i} out of range (q = {q})")))
        }
    };
    for (n, p) in cfg.position.iter().enumerate() {
        let field = format!("position[{n}]");
        let terms = p
            .terms
            .iter()
            .map(|t| Ok((basis(&t.basis, t.index, t.axis, &field)?, t.coef.rate(q, &field)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let f = PositionFn { terms, bound: p.bound };
        let i = idx(p.i, &field)?;
        match p.kind.as_str() {
            "birth" => {
                let j = idx(p.j.ok_or_else(|| ModelError::field(&field, "birth needs `j`"))?, &field)?;
                spec.b_s[i][j] = Some(f);
            }
            "death" => spec.d_s[i] = Some(f),
            other => return Err(ModelError::field(field, format!("unknown kind '{other}'"))),
        }
    }
    for (n, dsec) in cfg.dispersal.iter().enumerate() {
        let field = format!("dispersal[{n}]");
        let (i, j) = (idx(dsec.i, &field)?, idx(dsec.j, &field)?);
        let disp = match dsec.kind.as_str() {
            "rare" => Dispersal::Rare {
                c: dsec.c.ok_or_else(|| ModelError::field(&field, "rare dispersal needs `c`"))?,
                kernel: law(dsec.kernel.as_ref().ok_or_else(|| ModelError::field(&field, "needs `kernel`"))?, &field)?,
            },
            "local" => Dispersal::Local { s: dsec.s.ok_or_else(|| ModelError::field(&field, "local dispersal needs `s`"))? },
            other => return Err(ModelError::field(field, format!("unknown kind '{other}'"))),
        };
        spec.dispersal[i][j] = Some(disp);
    }
    for (n, im) in cfg.immigration.iter().enumerate() {
        let field = format!("immigration[{n}]");
        let i = idx(im.i, &field)?;
        spec.immigration[i] = Some(Immigration {
            kappa: im.kappa.rate(q, &field)?,
            growth_bound: im.growth_bound,
            law: law(&im.law, &field)?,
        });
    }
    spec.check_structure()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOGISTIC: &str = r#"
[model]
q = 1
h_max = 6.0
beta = [["2"]]
rho = ["h"]

[domain]
kind = "finite_set"
sites = 2
"#;

    #[test]
    fn parses_minimal_model() {
        let cfg = Config::from_toml_str(LOGISTIC).unwrap();
        let spec = cfg.build_spec().unwrap();
        assert_eq!(spec.q, 1);
        assert_eq!(spec.rho[0].eval(&[1.5]), 1.5);
    }

    #[test]
    fn canonical_form_is_stable() {
        let cfg = Config::from_toml_str(LOGISTIC).unwrap();
        let again = Config::from_toml_str(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.canonical(), again.canonical());
    }

    #[test]
    fn overrides_apply_on_dotted_paths() {
        let o = vec![("model.h_max".to_string(), "9".to_string()), ("sim.N".to_string(), "50".to_string())];
        let with_sim = format!("{LOGISTIC}\n[sim]\nN = 10\nT = 1.0\n");
        let cfg = Config::from_toml_with_overrides(&with_sim, &o).unwrap();
        assert_eq!(cfg.model.h_max, 9.0);
        assert_eq!(cfg.sim.unwrap().n, 50);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let bad = LOGISTIC.replace("h_max", "hmax");
        let err = Config::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("hmax") || err.contains("h_max"), "{err}");
    }
}
