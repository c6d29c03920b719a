mod common;

use common::{close, spec};
use fvsim_core::flow::{find_equilibrium, DensityDynamics};
use fvsim_core::lambda::{
    extend_lambda, extend_lambda_at_time, gamma_map, pde_residual_richardson, solve_series, transport_forward,
    residual_slope, transport_matrix, LambdaField,
};
use fvsim_core::model::{Particle, PopulationState};
use fvsim_core::space::Location;
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn logistic_series_coefficients() {
    let s = spec("logistic");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    let series = solve_series(&s, &eq, 8).unwrap();
    // 1/h = 1/(2 + x) = sum (-1)^k x^k / 2^(k+1)
    for k in 0..=8u32 {
        let c = series.coeff(&[k]).unwrap()[0];
        let want = (-1f64).powi(k as i32) * 0.5f64.powi(k as i32 + 1);
        assert!(close(c, want, 1e-10), "k = {k}: {c} vs {want}");
    }
}

#[test]
fn symmetric_extension_is_inverse_total_density() {
    let s = spec("symmetric");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    let series = solve_series(&s, &eq, 8).unwrap();
    let mut worst: f64 = 0.0;
    for a in 0..10 {
        for b in 0..10 {
            let h = [0.8 + 1.7 * a as f64 / 9.0, 0.8 + 1.7 * b as f64 / 9.0];
            let lam = extend_lambda(&s, &series, &h).unwrap();
            let want = 1.0 / (h[0] + h[1]);
            worst = worst.max((lam[0] - want).abs()).max((lam[1] - want).abs());
        }
    }
    assert!(worst < 1e-7, "max error {worst}");
}

#[test]
fn truncation_residual_slope() {
    let s = spec("symmetric");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    let k_max = 3;
    let series = solve_series(&s, &eq, k_max).unwrap();
    let dd = DensityDynamics::new(&s);
    let radii: Vec<f64> = (0..6).map(|k| 0.05 * 1.5f64.powi(k)).collect();
    let (slope, res) = residual_slope(&series, &dd, &radii);
    // independent fit: endpoints only
    let two = (res[5] / res[0]).ln() / (radii[5] / radii[0]).ln();
    assert!((two - slope).abs() < 0.5, "{two} vs {slope}");
    assert!(slope >= k_max as f64 + 0.5, "slope {slope}, residuals {res:?}");
}

#[test]
fn extension_satisfies_pde() {
    let s = spec("symmetric");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    let series = solve_series(&s, &eq, 8).unwrap();
    let field = LambdaField::new(&s, &series);
    let r = pde_residual_richardson(&s, |h| field.eval(h).unwrap(), &[0.9, 2.2], 1e-3);
    assert!(r.residual.iter().all(|x| x.abs() < 1e-7), "{r:?}");
    assert!(r.normalization.abs() < 1e-10);
}

#[test]
fn transport_routes_agree_and_compose() {
    let s = spec("symmetric");
    let h = [0.6, 2.4];
    let (t1, t2) = (0.7, 1.6);
    let back = transport_matrix(&s, &h, t2, 1e-12).unwrap();
    let fwd = transport_forward(&s, &h, t2, 1e-12, |_| false).unwrap();
    let q = 2;
    let phi_fwd = DMatrix::from_row_slice(q, q, &fwd.y_end[q..]);
    assert!((back.at(0.0) - &phi_fwd).amax() < 1e-7);
    // Chapman-Kolmogorov: Φ(0, t2) = Φ(0, t1) Φ(t1, t2) along the same path
    let back1 = transport_matrix(&s, &h, t1, 1e-12).unwrap();
    let tail = transport_matrix(&s, &back.psi(t1), t2 - t1, 1e-12).unwrap();
    let composed = back1.at(0.0) * tail.at(0.0);
    assert!((composed - back.at(0.0)).amax() < 1e-7);
    // positivity of the transported matrix
    assert!(back.at(0.0).iter().all(|&x| x >= -1e-7));
}

#[test]
fn two_horizons_give_the_same_lambda() {
    let s = spec("symmetric");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    let series = solve_series(&s, &eq, 8).unwrap();
    let h = [0.9, 2.1];
    let a = extend_lambda_at_time(&s, &series, &h, 4.0, 1e-12).unwrap();
    let b = extend_lambda_at_time(&s, &series, &h, 6.0, 1e-12).unwrap();
    assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8);
}

#[test]
fn gamma_map_has_unit_mass() {
    let s = spec("symmetric");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    let series = solve_series(&s, &eq, 8).unwrap();
    let field = LambdaField::new(&s, &series);
    let p = |site| Particle { loc: Location::Site(site), clan: None, last_t: 0.0 };
    let pop = PopulationState { n_scale: 10, types: vec![vec![p(0); 9], vec![p(1); 14]], t: 0.0 };
    let m = gamma_map(|h| field.eval(h), &pop).unwrap();
    assert!((m.total_mass() - 1.0).abs() < 1e-10);
}

#[test]
fn diagnostics_report_every_degree() {
    let s = spec("symmetric");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    let series = solve_series(&s, &eq, 6).unwrap();
    assert_eq!(series.diagnostics.len(), 6);
    assert!(series.diagnostics.iter().all(|d| d.condition.is_finite() && d.within_eps_bound != Some(false)));
    assert!(series.r_trust > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extension_is_positive_and_normalized(h1 in 0.3f64..5.0, h2 in 0.3f64..5.0) {
        let s = spec("symmetric");
        let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
        let series = solve_series(&s, &eq, 8).unwrap();
        let lam = extend_lambda(&s, &series, &[h1, h2]).unwrap();
        prop_assert!(lam.iter().all(|&x| x > 0.0));
        prop_assert!((lam[0] * h1 + lam[1] * h2 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn transport_matrix_is_nonnegative(h1 in 0.2f64..5.0, h2 in 0.2f64..5.0, t in 0.1f64..3.0) {
        let s = spec("symmetric");
        let tm = transport_matrix(&s, &[h1, h2], t, 1e-11).unwrap();
        prop_assert!(tm.at(0.0).iter().all(|&x| x >= -1e-7));
    }
}
