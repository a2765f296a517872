//! Minimize-then-polish pipeline on real orbits.

use std::sync::OnceLock;

use kh_core::dynamics::Integrator;
use kh_core::minimizer::{minimize, MinimizeConfig, MinimizeResult, MinimizeStatus};
use kh_core::shooting::{
    guess_from_loop, lifted_rotation, polish, polish_loop, segment_residual, verify, OrbitCertificate, PolishOptions,
    VerifyBounds,
};
use kh_core::{PhasePoint, PotentialParams};

struct Fixture {
    result: MinimizeResult,
    cert: OrbitCertificate,
}

fn run(k: usize) -> Fixture {
    let params = PotentialParams::default();
    let result = minimize(&MinimizeConfig { k, ..Default::default() }, &params).unwrap();
    assert_eq!(result.status, MinimizeStatus::Converged);
    let cert = polish_loop(&result.lp, &params, &PolishOptions::default()).unwrap();
    Fixture { result, cert }
}

fn k3() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| run(3))
}

fn k5() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| run(5))
}

fn max_diff(a: &PhasePoint, b: &PhasePoint) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn polished_k3_orbit_closes_at_zero_energy() {
    let c = &k3().cert;
    assert!(c.converged);
    assert!(c.residuals.closure <= 1e-9, "{:?}", c.residuals);
    assert!(c.residuals.full_period <= 1e-9, "{:?}", c.residuals);
    assert!(c.residuals.energy <= 1e-6, "{:?}", c.residuals);
    assert!(c.residuals.j_drift <= 1e-6, "{:?}", c.residuals);
    assert!(c.residuals.p_theta.abs() > 0.1);
}

#[test]
fn converged_state_is_relative_periodic_at_tighter_tolerance() {
    let c = &k3().cert;
    let tight = Integrator::new(c.params().unwrap(), 1e-13).unwrap();
    let r = segment_residual(&c.ic, c.s, 3, &tight).unwrap();
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(n <= 1e-9, "{n:e}");
}

#[test]
fn polishing_a_polished_orbit_is_a_fixed_point() {
    let c = &k5().cert;
    let again = polish(&c.ic, c.s, c.k, &c.params().unwrap(), &PolishOptions::default()).unwrap();
    assert!(again.residuals.closure <= c.residuals.closure * (1.0 + 1e-6) + 1e-15);
    assert!(max_diff(&again.ic, &c.ic) <= 1e-9);
    assert!((again.s - c.s).abs() <= 1e-9);
}

#[test]
fn polishing_a_rotated_guess_gives_the_rotated_orbit() {
    let f = k5();
    let params = PotentialParams::default();
    let (guess, s0) = guess_from_loop(&f.result.lp, &params).unwrap();
    let theta = 0.7;
    let rotated = polish(&lifted_rotation(theta, &guess), s0, 5, &params, &PolishOptions::default()).unwrap();
    assert!(rotated.converged);
    assert!((rotated.s - f.cert.s).abs() <= 1e-8, "{} vs {}", rotated.s, f.cert.s);
    let expected = lifted_rotation(theta, &f.cert.ic);
    assert!(max_diff(&rotated.ic, &expected) <= 1e-8, "{:e}", max_diff(&rotated.ic, &expected));
    assert!((rotated.residuals.max_abs_z - f.cert.residuals.max_abs_z).abs() <= 1e-8);
}

#[test]
fn fresh_k5_certificate_verifies() {
    let report = verify(&k5().cert, 1e-12, &VerifyBounds::default());
    assert!(report.passed(), "{}", report.table());
}

#[test]
fn dilated_certificate_verifies_with_segment_time_scaled() {
    let c = &k5().cert;
    let big = c.dilate(2.0, &PolishOptions::default()).unwrap();
    assert!((big.s - 4.0 * c.s).abs() <= 1e-15 * big.s);
    assert!((big.residuals.p_theta - c.residuals.p_theta).abs() <= 1e-12);
    assert!((big.residuals.max_abs_z / c.residuals.max_abs_z - 4.0).abs() <= 1e-6);
    let report = verify(&big, 1e-12, &VerifyBounds::default());
    assert!(report.passed(), "{}", report.table());
    let base = verify(c, 1e-12, &VerifyBounds::default()).check("closure").unwrap().value;
    let scaled = report.check("closure").unwrap().value;
    assert!(scaled <= 100.0 * base.max(1e-13), "{scaled:e} vs {base:e}");
}

#[test]
fn perturbed_certificate_fails_on_closure() {
    let c = &k5().cert;
    let mut a = c.ic.to_array();
    a[3] += 1e-3;
    let bad = OrbitCertificate { ic: PhasePoint::from_array(a), ..c.clone() };
    let report = verify(&bad, 1e-12, &VerifyBounds::default());
    assert!(!report.passed());
    assert!(!report.check("closure").unwrap().pass);
}

#[test]
fn wrong_alpha_fails_on_energy_or_closure() {
    let c = &k5().cert;
    let bad = OrbitCertificate { alpha: 1.0, ..c.clone() };
    let report = verify(&bad, 1e-12, &VerifyBounds::default());
    assert!(!report.passed());
    assert!(!report.check("H").unwrap().pass || !report.check("closure").unwrap().pass);
}

#[test]
fn certificate_survives_a_json_round_trip_without_residual_inflation() {
    let c = &k5().cert;
    let back = OrbitCertificate::from_json(&c.to_json()).unwrap();
    assert_eq!(back.ic, c.ic);
    let before = verify(c, 1e-12, &VerifyBounds::default());
    let after = verify(&back, 1e-12, &VerifyBounds::default());
    for (a, b) in before.checks.iter().zip(&after.checks) {
        assert!(b.value <= 10.0 * a.value.max(1e-15), "{}: {:e} vs {:e}", a.name, b.value, a.value);
    }
}
