mod common;

use common::config;
use fvsim_core::config::{Config, ConfigError};
use proptest::prelude::*;

const SHIPPED: [&str; 8] =
    ["chain", "decoupled", "genetics", "genetics_iam", "immigration", "logistic", "polarity", "symmetric"];

fn text(name: &str) -> String {
    std::fs::read_to_string(format!("{}/../../configs/{name}.toml", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn shipped_configs_build() {
    for name in SHIPPED {
        let c = config(name);
        c.build_spec().unwrap_or_else(|e| panic!("{name}: {e}"));
        if c.sim.is_some() {
            c.sim_setup().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn canonical_form_is_a_fixed_point() {
    for name in SHIPPED {
        let c = config(name);
        let again = Config::from_toml_str(&c.canonical()).unwrap();
        assert_eq!(again.canonical(), c.canonical(), "{name}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let bad = text("logistic").replace("[model]", "[model]\nbogus = 1");
    assert!(matches!(Config::from_toml_str(&bad), Err(ConfigError::Toml(_))));
    let bad = text("logistic") + "\n[extra]\nx = 1\n";
    assert!(Config::from_toml_str(&bad).is_err());
}

#[test]
fn malformed_rates_fail_at_build() {
    let bad = text("logistic").replace(r#"rho = ["h"]"#, r#"rho = ["h +"]"#);
    let c = Config::from_toml_str(&bad).unwrap();
    assert!(c.build_spec().is_err());
}

#[test]
fn overrides_reach_nested_keys() {
    let o = |k: &str, v: &str| (k.to_string(), v.to_string());
    let c = Config::from_toml_with_overrides(&text("logistic"), &[o("sim.N", "800"), o("sim.seed", "9"), o("domain.migration_rate", "2.5")])
        .unwrap();
    let sim = c.sim.as_ref().unwrap();
    assert_eq!((sim.n, sim.seed), (800, 9));
    assert_eq!(c.domain.migration_rate, Some(2.5));
    let r = Config::from_toml_with_overrides(&text("logistic"), &[o("model.beta.x", "1")]);
    assert!(r.is_err());
}

#[test]
fn overrides_change_the_canonical_form() {
    let base = config("logistic").canonical();
    let c = Config::from_toml_with_overrides(&text("logistic"), &[("sim.seed".into(), "2".into())]).unwrap();
    assert_ne!(c.canonical(), base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn numeric_overrides_round_trip(n in 1u64..100_000, seed in any::<u32>(), rate in 0.0f64..10.0) {
        let o = [
            ("sim.N".to_string(), n.to_string()),
            ("sim.seed".to_string(), seed.to_string()),
            ("domain.migration_rate".to_string(), format!("{rate:?}")),
        ];
        let c = Config::from_toml_with_overrides(&text("logistic"), &o).unwrap();
        let back = Config::from_toml_str(&c.canonical()).unwrap();
        let sim = back.sim.as_ref().unwrap();
        prop_assert_eq!(sim.n, n);
        prop_assert_eq!(sim.seed, u64::from(seed));
        prop_assert_eq!(back.domain.migration_rate, Some(rate));
    }
}
