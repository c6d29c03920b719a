#![allow(dead_code)]

use fvsim_core::config::Config;
use fvsim_core::model::ModelSpec;

pub fn config(name: &str) -> Config {
    let path = format!("{}/../../configs/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    Config::from_toml_str(&text).unwrap()
}

pub fn spec(name: &str) -> ModelSpec {
    config(name).build_spec().unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
