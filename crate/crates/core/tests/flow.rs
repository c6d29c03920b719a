mod common;

use std::time::Instant;

use common::{close, spec};
use fvsim_core::flow::{
    averaged_coefficients, eigenvalues, find_equilibrium, integrate_flow, interaction_matrix, jacobian_fd, theta,
    DensityDynamics,
};
use fvsim_core::validate::validate_model;
use proptest::prelude::*;

#[test]
fn logistic_equilibrium_matches_closed_form() {
    let s = spec("logistic");
    let t0 = Instant::now();
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    // beta / rho for dh/dt = 2h - h^2
    assert!(close(eq.h_eq[0], 2.0, 1e-10), "{:?}", eq.h_eq);
    assert!(close(eq.v_eq[0], 0.5, 1e-12));
    // v^2 h rho(h) = 0.25 * 2 * 2
    assert!(close(eq.gamma_smpl, 1.0, 1e-10));
    assert!(t0.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn symmetric_equilibrium_and_spectra() {
    let s = spec("symmetric");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    for i in 0..2 {
        assert!(close(eq.h_eq[i], 1.5, 1e-10));
        assert!(close(eq.v_eq[i], 1.0 / 3.0, 1e-10));
    }
    // A(h_eq) = [[-1, 1], [1, -1]]
    let mut ea: Vec<f64> = eq.spec_a.iter().map(|z| z.re).collect();
    ea.sort_by(f64::total_cmp);
    assert!(close(ea[0], -2.0, 1e-8) && close(ea[1], 0.0, 1e-8), "{ea:?}");
    // J = A - [[h1, h1], [h2, h2]] = [[-2.5, -0.5], [-0.5, -2.5]]
    let mut ej: Vec<f64> = eq.spec_j.iter().map(|z| z.re).collect();
    ej.sort_by(f64::total_cmp);
    assert!(close(ej[0], -3.0, 1e-8) && close(ej[1], -2.0, 1e-8), "{ej:?}");
    assert!(close(eq.gamma_smpl, 1.0, 1e-10));
}

#[test]
fn polarity_equilibrium() {
    let s = spec("polarity");
    let eq = find_equilibrium(&s, &s.eq_guess, 1e-13).unwrap();
    // k_fb (1 - h) = k_off
    assert!(close(eq.h_eq[0], 0.5, 1e-10));
    assert!(close(eq.gamma_smpl, 2.0, 1e-10));
    let avg = averaged_coefficients(&s, &eq);
    // k_on (1 - h_eq) v_eq
    assert!(close(avg.i_avg[0].1, 0.5, 1e-12));
    assert!(close(avg.diffusion(), 0.01, 1e-15));
}

#[test]
fn validation_reports() {
    let ok = validate_model(&spec("logistic"));
    assert!(ok.accepted(), "{ok}");
    let ok2 = validate_model(&spec("symmetric"));
    assert!(ok2.accepted(), "{ok2}");
    let bad = validate_model(&spec("decoupled"));
    assert!(!bad.accepted());
    let names: Vec<&str> = bad.failures().map(|c| c.name.as_str()).collect();
    assert!(names.contains(&"A(h_eq) irreducible"), "{bad}");
    assert!(validate_model(&spec("polarity")).accepted());
    assert!(validate_model(&spec("immigration")).accepted());
}

#[test]
fn out_of_box_inputs_are_rejected() {
    let s = spec("logistic");
    assert!(theta(&s, &[7.0]).is_err());
    assert!(interaction_matrix(&s, &[-0.1]).is_err());
}

#[test]
fn logistic_flow_matches_closed_form() {
    let s = spec("logistic");
    let h0 = 0.3;
    let traj = integrate_flow(&s, &[h0], 5.0, 1e-11).unwrap();
    for k in 0..=50 {
        let t = 0.1 * k as f64;
        let e = (2.0 * t).exp();
        let exact = 2.0 * h0 * e / (2.0 + h0 * (e - 1.0));
        assert!(close(traj.at(t)[0], exact, 1e-8), "t = {t}");
    }
}

#[test]
fn leaving_the_box_is_reported() {
    // pure birth leaves any box
    let mut s = spec("logistic");
    s.rho[0] = fvsim_core::poly::RateFn::parse("0", 1).unwrap();
    assert!(integrate_flow(&s, &[1.0], 10.0, 1e-10).is_err());
}

#[test]
fn symmetric_spectrum_of_a_at_off_equilibrium_point() {
    let s = spec("symmetric");
    // eig(A(h)) = {3 - s, 1 - s}, s = h1 + h2
    let a = interaction_matrix(&s, &[0.4, 1.1]).unwrap();
    let mut ev: Vec<f64> = eigenvalues(&a).iter().map(|z| z.re).collect();
    ev.sort_by(f64::total_cmp);
    assert!(close(ev[0], -0.5, 1e-12) && close(ev[1], 1.5, 1e-12));
}

proptest! {
    #[test]
    fn analytic_jacobian_matches_differences(h1 in 0.1f64..7.0, h2 in 0.1f64..7.0) {
        let s = spec("symmetric");
        let dd = DensityDynamics::new(&s);
        let ja = dd.jacobian(&[h1, h2]);
        let jf = jacobian_fd(&s, &[h1, h2], 1e-5);
        prop_assert!((ja - jf).amax() < 1e-6);
    }

    #[test]
    fn drift_is_a_times_h(h1 in 0.0f64..8.0, h2 in 0.0f64..8.0) {
        let s = spec("symmetric");
        let a = interaction_matrix(&s, &[h1, h2]).unwrap();
        let th = theta(&s, &[h1, h2]).unwrap();
        prop_assert!((a[(0, 0)] * h1 + a[(0, 1)] * h2 - th[0]).abs() < 1e-12);
        prop_assert!((a[(1, 0)] * h1 + a[(1, 1)] * h2 - th[1]).abs() < 1e-12);
        // Metzler: nonnegative off-diagonal entries
        prop_assert!(a[(0, 1)] >= 0.0 && a[(1, 0)] >= 0.0);
    }

    #[test]
    fn logistic_flow_converges(h0 in 0.05f64..6.0) {
        let s = spec("logistic");
        let traj = integrate_flow(&s, &[h0], 20.0, 1e-10).unwrap();
        prop_assert!((traj.end()[0] - 2.0).abs() < 1e-8);
    }
}
