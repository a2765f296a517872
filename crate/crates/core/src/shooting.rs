//! Polishing loop candidates into periodic orbits of Hamilton's equations.
//!
//! A relative periodic orbit with `k`-fold symmetry satisfies
//! `Φ_s(ic) = Rot_{2π/k}(ic)` where `Φ_s` is the flow over one segment
//! `s = T/k` and `Rot` the cotangent lift of the rotation about the z-axis.
//! The unknowns `(ic, s)` are solved by damped Gauss-Newton together with
//! gauge conditions that select one orbit from its symmetry family.

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{vector_field, Integrator, Termination, DEFAULT_COLLISION_MU};
use crate::error::{Error, Result};
use crate::group::{dilate_phase, first_integrals, PhasePoint, PotentialParams};
use crate::loopspace::{rotate, SymmetricLoop};
use crate::numfmt;

/// Cotangent lift of the rotation by `theta` about the z-axis.
pub fn lifted_rotation(theta: f64, s: &PhasePoint) -> PhasePoint {
    let cs = (theta.cos(), theta.sin());
    let [x, y] = rotate(cs, [s.q.x, s.q.y]);
    let [px, py] = rotate(cs, [s.px, s.py]);
    PhasePoint::new(x, y, s.q.z, px, py, s.pz)
}

fn rotation_angle(k: usize) -> f64 {
    std::f64::consts::TAU / k as f64
}

/// `Φ_s(ic) - Rot_{2π/k}(ic)`.
pub fn segment_residual(ic: &PhasePoint, s: f64, k: usize, integrator: &Integrator) -> Result<[f64; 6]> {
    if k < 3 {
        return Err(Error::domain(format!("k must be >= 3, got {k}")));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::domain(format!("segment time must be positive, got {s}")));
    }
    if !integrator.params().is_free() && ic.q.mu() < integrator.params().mu_min() {
        return Err(Error::Collision { mu: ic.q.mu(), threshold: integrator.params().mu_min() });
    }
    let end = integrator.flow(ic, s)?.to_array();
    let target = lifted_rotation(rotation_angle(k), ic).to_array();
    let mut r = [0.0; 6];
    for i in 0..6 {
        r[i] = end[i] - target[i];
    }
    Ok(r)
}

/// Phase-space initial condition and segment time read off a loop.
///
/// Velocities and accelerations at the first sample come from the two
/// adjacent controls; the multiplier `p_z` is the value that makes the
/// sampled acceleration satisfy the second-order equations of motion in the
/// direction normal to the velocity. The result is rotated onto the positive
/// x-axis.
pub fn guess_from_loop(lp: &SymmetricLoop, params: &PotentialParams) -> Result<(PhasePoint, f64)> {
    let un = lp.unroll();
    let n = lp.n();
    let dt = lp.dt();
    let (u_prev, u_next) = (un.velocities[n - 1], un.velocities[0]);
    let q = un.points[0];
    let vel = [0.5 * (u_prev[0] + u_next[0]), 0.5 * (u_prev[1] + u_next[1])];
    let acc = [(u_next[0] - u_prev[0]) / dt, (u_next[1] - u_prev[1]) / dt];
    let speed2 = vel[0] * vel[0] + vel[1] * vel[1];
    if !(speed2 > 0.0) {
        return Err(Error::domain("loop is at rest at its first sample"));
    }
    let m = params.guarded_mu(&q)?;
    let a = params.alpha();
    let r2 = q.x * q.x + q.y * q.y;
    let m32 = if params.is_free() { 0.0 } else { m.powf(-1.5) };
    let fx = (a / 32.0 * q.y * q.z - 2.0 * a * q.x * r2) * m32;
    let fy = -(a / 32.0 * q.x * q.z + 2.0 * a * q.y * r2) * m32;
    let pz = (-vel[1] * (acc[0] - fx) + vel[0] * (acc[1] - fy)) / speed2;
    let ic = PhasePoint::new(q.x, q.y, q.z, vel[0] + 0.5 * q.y * pz, vel[1] - 0.5 * q.x * pz, pz);
    let ic = lifted_rotation(-q.y.atan2(q.x), &ic);
    Ok((ic, lp.period() / lp.k() as f64))
}

/// Settings for [`polish`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolishOptions {
    /// Integration tolerance of the flow map.
    pub tol: f64,
    /// Iterate until the residual norm is below this.
    pub target: f64,
    /// Report convergence when the final residual norm is below this.
    pub accept: f64,
    pub max_iter: usize,
    /// Relative finite-difference step for the Jacobian.
    pub fd_step: f64,
    pub collision_mu: f64,
}

impl Default for PolishOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            target: 1e-11,
            accept: 1e-9,
            max_iter: 40,
            fd_step: 1e-6,
            collision_mu: DEFAULT_COLLISION_MU,
        }
    }
}

impl PolishOptions {
    pub fn integrator(&self, params: &PotentialParams) -> Result<Integrator> {
        Integrator::new(*params, self.tol)?.with_collision_mu(self.collision_mu)
    }
}

type Vec7 = SVector<f64, 7>;
type Vec9 = SVector<f64, 9>;

/// Unit vector of `v`, or zero when `v` vanishes.
fn unit(v: [f64; 6]) -> [f64; 6] {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.map(|a| a / n)
    } else {
        [0.0; 6]
    }
}

/// Residual system for `polish`. Besides the six closure equations it
/// carries three gauge rows: the phase anchor, and orthogonality of the
/// correction to the flow direction and to the dilation generator at the
/// guess. Orbits come in families swept by time shifts, rotations and
/// dilations, and the gauge rows pick one member.
struct Shooter<'a> {
    k: usize,
    integrator: &'a Integrator,
    anchor: (f64, f64),
    origin: [f64; 6],
    along_flow: [f64; 6],
    along_dilation: [f64; 6],
}

impl<'a> Shooter<'a> {
    fn new(k: usize, integrator: &'a Integrator, guess: &PhasePoint) -> Result<Self> {
        let phi = guess.q.y.atan2(guess.q.x);
        let q = guess.q;
        Ok(Self {
            k,
            integrator,
            anchor: (phi.cos(), phi.sin()),
            origin: guess.to_array(),
            along_flow: unit(vector_field(guess, integrator.params())?.to_array()),
            along_dilation: unit([q.x, q.y, 2.0 * q.z, -guess.px, -guess.py, -2.0 * guess.pz]),
        })
    }

    fn residual(&self, w: &Vec7) -> Result<Vec9> {
        let ic = PhasePoint::new(w[0], w[1], w[2], w[3], w[4], w[5]);
        let r = segment_residual(&ic, w[6], self.k, self.integrator)?;
        let anchor = -self.anchor.1 * w[0] + self.anchor.0 * w[1];
        let gauge = |dir: &[f64; 6]| (0..6).map(|i| (w[i] - self.origin[i]) * dir[i]).sum::<f64>();
        Ok(Vec9::from([
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[5],
            anchor,
            gauge(&self.along_flow),
            gauge(&self.along_dilation),
        ]))
    }

    fn jacobian(&self, w: &Vec7, fd_step: f64) -> Result<SMatrix<f64, 9, 7>> {
        let cols: Vec<Result<Vec9>> = (0..7)
            .into_par_iter()
            .map(|j| {
                let h = fd_step * w[j].abs().max(1.0);
                let mut p = *w;
                let mut m = *w;
                p[j] += h;
                m[j] -= h;
                Ok((self.residual(&p)? - self.residual(&m)?) / (2.0 * h))
            })
            .collect();
        let mut jac = SMatrix::<f64, 9, 7>::zeros();
        for (j, c) in cols.into_iter().enumerate() {
            jac.set_column(j, &c?);
        }
        Ok(jac)
    }
}

/// Residuals recorded in a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateResiduals {
    /// `|Φ_s(ic) - Rot(ic)|`
    #[serde(serialize_with = "numfmt::ser_f64", deserialize_with = "numfmt::de_f64_or_nan")]
    pub closure: f64,
    /// `|Φ_{ks}(ic) - ic|`
    #[serde(serialize_with = "numfmt::ser_f64", deserialize_with = "numfmt::de_f64_or_nan")]
    pub full_period: f64,
    /// `|H(ic)|`
    #[serde(rename = "H", serialize_with = "numfmt::ser_f64", deserialize_with = "numfmt::de_f64_or_nan")]
    pub energy: f64,
    /// `max |z(t + T/2) + z(t)|` on the sampling grid.
    #[serde(serialize_with = "numfmt::ser_f64", deserialize_with = "numfmt::de_f64_or_nan")]
    pub s2: f64,
    /// `max |γ(t + T/k) - R γ(t)|` on the sampling grid.
    #[serde(serialize_with = "numfmt::ser_f64", deserialize_with = "numfmt::de_f64_or_nan")]
    pub s1: f64,
    #[serde(serialize_with = "numfmt::ser_f64", deserialize_with = "numfmt::de_f64_or_nan")]
    pub max_abs_z: f64,
    #[serde(serialize_with = "numfmt::ser_f64", deserialize_with = "numfmt::de_f64_or_nan")]
    pub p_theta: f64,
    /// `max |J(t) - J(0)|` over the period.
    #[serde(serialize_with = "numfmt::ser_f64", deserialize_with = "numfmt::de_f64_or_nan")]
    pub j_drift: f64,
}

/// Samples per segment used when measuring symmetry residuals.
const SAMPLES_PER_SEGMENT: usize = 128;

/// Integrates one full period and measures every certificate residual.
pub fn measure(ic: &PhasePoint, s: f64, k: usize, integrator: &Integrator) -> Result<CertificateResiduals> {
    let closure = norm6(&segment_residual(ic, s, k, integrator)?);
    let m = k * SAMPLES_PER_SEGMENT;
    let period = k as f64 * s;
    let times: Vec<f64> = (0..=m).map(|i| if i == m { period } else { period * i as f64 / m as f64 }).collect();
    let traj = integrator.with_exact_stops(true).integrate(ic, period, Some(&times))?;
    if let Termination::Collision { mu, .. } = traj.termination {
        return Err(Error::Collision { mu, threshold: integrator.collision_mu() });
    }
    let st = &traj.states;
    let full_period = st[m].distance(ic);
    let z: Vec<f64> = st.iter().map(|p| p.q.z).collect();
    let half = m / 2;
    let s2 = (0..=half).map(|i| (z[i + half] + z[i]).abs()).fold(0.0, f64::max);
    let cs = (rotation_angle(k).cos(), rotation_angle(k).sin());
    let seg = SAMPLES_PER_SEGMENT;
    let mut s1: f64 = 0.0;
    for i in 0..=m - seg {
        let [x, y] = rotate(cs, [st[i].q.x, st[i].q.y]);
        let b = st[i + seg].q;
        s1 = s1.max((b.x - x).abs()).max((b.y - y).abs()).max((b.z - st[i].q.z).abs());
    }
    let j0 = first_integrals(ic).j;
    let j_drift = st.iter().map(|p| (first_integrals(p).j - j0).abs()).fold(0.0, f64::max);
    Ok(CertificateResiduals {
        closure,
        full_period,
        energy: integrator.params().hamiltonian(ic)?.abs(),
        s2,
        s1,
        max_abs_z: z.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        p_theta: first_integrals(ic).p_theta,
        j_drift,
    })
}

fn norm6(r: &[f64; 6]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A measured periodic orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitCertificate {
    pub k: usize,
    /// Segment time `T/k`.
    pub s: f64,
    pub ic: PhasePoint,
    pub alpha: f64,
    pub residuals: CertificateResiduals,
    /// Whether the shooting iteration met its acceptance threshold.
    pub converged: bool,
    pub iterations: usize,
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CertificateFile {
    k: usize,
    #[serde(serialize_with = "numfmt::ser_f64")]
    s: f64,
    #[serde(rename = "T", serialize_with = "numfmt::ser_f64")]
    period: f64,
    #[serde(serialize_with = "numfmt::ser_f64_slice")]
    ic: [f64; 6],
    residuals: CertificateResiduals,
    #[serde(serialize_with = "numfmt::ser_f64")]
    alpha: f64,
    #[serde(default = "default_true")]
    converged: bool,
    #[serde(default)]
    iterations: usize,
    #[serde(default)]
    provenance: serde_json::Value,
}

fn default_true() -> bool {
    true
}

impl OrbitCertificate {
    pub fn period(&self) -> f64 {
        self.k as f64 * self.s
    }

    pub fn params(&self) -> Result<PotentialParams> {
        PotentialParams::with_alpha(self.alpha)
    }

    pub fn to_json(&self) -> String {
        let file = CertificateFile {
            k: self.k,
            s: self.s,
            period: self.period(),
            ic: self.ic.to_array(),
            residuals: self.residuals,
            alpha: self.alpha,
            converged: self.converged,
            iterations: self.iterations,
            provenance: self.provenance.clone(),
        };
        serde_json::to_string_pretty(&file).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CertificateFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if f.k < 3 {
            return Err(Error::Format(format!("k must be >= 3, got {}", f.k)));
        }
        if !(f.s > 0.0 && f.s.is_finite()) {
            return Err(Error::Format(format!("segment time must be positive, got {}", f.s)));
        }
        if (f.period - f.k as f64 * f.s).abs() > 1e-12 * f.period.abs().max(1.0) {
            return Err(Error::Format("T does not equal k * s".into()));
        }
        let ic = PhasePoint::from_array(f.ic);
        if !ic.is_finite() || !(f.alpha >= 0.0 && f.alpha.is_finite()) {
            return Err(Error::Format("initial condition and alpha must be finite, alpha >= 0".into()));
        }
        Ok(Self {
            k: f.k,
            s: f.s,
            ic,
            alpha: f.alpha,
            residuals: f.residuals,
            converged: f.converged,
            iterations: f.iterations,
            provenance: f.provenance,
        })
    }

    /// Applies the lifted dilation `δ_λ` to the initial condition and scales
    /// the segment time by `λ²`, then re-measures the residuals.
    pub fn dilate(&self, lambda: f64, opts: &PolishOptions) -> Result<Self> {
        let ic = dilate_phase(lambda, &self.ic)?;
        let s = lambda * lambda * self.s;
        let params = self.params()?;
        let residuals = measure(&ic, s, self.k, &opts.integrator(&params)?)?;
        Ok(Self { ic, s, residuals, ..self.clone() })
    }
}

/// Solves for a relative periodic orbit starting from `guess` and segment
/// time `s0`. The phase anchor keeps `ic` on the line through the guess's
/// planar position.
pub fn polish(
    guess: &PhasePoint,
    s0: f64,
    k: usize,
    params: &PotentialParams,
    opts: &PolishOptions,
) -> Result<OrbitCertificate> {
    let integrator = opts.integrator(params)?;
    let shooter = Shooter::new(k, &integrator, guess)?;
    let mut w = Vec7::from([guess.q.x, guess.q.y, guess.q.z, guess.px, guess.py, guess.pz, s0]);
    let mut r = shooter.residual(&w)?;
    let mut nr = r.norm();
    let mut lambda = -1.0;
    let mut iterations = 0;
    log::info!("polish start: |r| = {nr:.3e}, s = {s0}");
    while iterations < opts.max_iter && nr > opts.target {
        iterations += 1;
        let jac = shooter.jacobian(&w, opts.fd_step)?;
        let jtj = jac.transpose() * jac;
        let jtr = jac.transpose() * r;
        if lambda < 0.0 {
            lambda = 1e-3 * jtj.diagonal().max();
        }
        let mut improved = false;
        while lambda < 1e12 * jtj.diagonal().max().max(1.0) {
            let sys = jtj + SMatrix::<f64, 7, 7>::identity() * lambda;
            let Some(step) = sys.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let wn = w + step;
            match shooter.residual(&wn) {
                Ok(rn) if rn.norm() < nr => {
                    w = wn;
                    r = rn;
                    nr = rn.norm();
                    lambda = (lambda / 10.0).max(1e-15);
                    improved = true;
                    break;
                }
                Ok(_) | Err(Error::Collision { .. }) | Err(Error::Domain(_)) => lambda *= 10.0,
                Err(e) => return Err(e),
            }
        }
        log::info!("polish iteration {iterations}: |r| = {nr:.3e}, s = {:.15}, damping {lambda:.1e}", w[6]);
        if !improved {
            break;
        }
    }
    let ic = PhasePoint::new(w[0], w[1], w[2], w[3], w[4], w[5]);
    let residuals = measure(&ic, w[6], k, &integrator)?;
    Ok(OrbitCertificate {
        k,
        s: w[6],
        ic,
        alpha: params.alpha(),
        residuals,
        converged: nr <= opts.accept,
        iterations,
        provenance: serde_json::Value::Null,
    })
}

/// [`guess_from_loop`] followed by [`polish`].
pub fn polish_loop(lp: &SymmetricLoop, params: &PotentialParams, opts: &PolishOptions) -> Result<OrbitCertificate> {
    let (ic, s) = guess_from_loop(lp, params)?;
    polish(&ic, s, lp.k(), params, opts)
}

/// Acceptance bounds for [`verify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyBounds {
    pub closure: f64,
    pub full_period: f64,
    pub energy: f64,
    pub s1: f64,
    /// Relative to `max |z|`.
    pub s2_relative: f64,
    pub j_drift: f64,
}

impl Default for VerifyBounds {
    fn default() -> Self {
        Self { closure: 1e-9, full_period: 1e-9, energy: 1e-6, s1: 1e-9, s2_relative: 1e-6, j_drift: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyCheck {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<VerifyCheck>,
    pub residuals: Option<CertificateResiduals>,
    /// Set when re-integration itself failed.
    pub failure: Option<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&VerifyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Plain-text table, one check per line, ending in `PASS` or `FAIL`.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<12} {:>24} <= {:<10.3e} {}\n",
                c.name,
                numfmt::fmt17(c.value),
                c.bound,
                if c.pass { "PASS" } else { "FAIL" }
            ));
        }
        if let Some(f) = &self.failure {
            out.push_str(&format!("error: {f}\n"));
        }
        out.push_str(if self.passed() { "PASS\n" } else { "FAIL\n" });
        out
    }

    pub fn to_json(&self) -> String {
        let checks: Vec<serde_json::Value> = self
            .checks
            .iter()
            .map(|c| {
                serde_json::json!({
                    "name": c.name,
                    "value": numfmt::json_number(c.value),
                    "bound": numfmt::json_number(c.bound),
                    "pass": c.pass,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "pass": self.passed(),
            "failure": self.failure,
            "checks": checks,
        }))
        .expect("report serializes")
    }
}

/// Re-integrates the certificate at `tol / 10` with its own `alpha` and
/// checks every residual against `bounds`.
pub fn verify(cert: &OrbitCertificate, tol: f64, bounds: &VerifyBounds) -> VerifyReport {
    let run = || -> Result<CertificateResiduals> {
        let params = cert.params()?;
        let integrator = Integrator::new(params, tol / 10.0)?;
        measure(&cert.ic, cert.s, cert.k, &integrator)
    };
    match run() {
        Ok(res) => {
            let check = |name, value: f64, bound: f64| VerifyCheck { name, value, bound, pass: value <= bound };
            VerifyReport {
                checks: vec![
                    check("closure", res.closure, bounds.closure),
                    check("full_period", res.full_period, bounds.full_period),
                    check("H", res.energy, bounds.energy),
                    check("s1", res.s1, bounds.s1),
                    check("s2", res.s2, bounds.s2_relative * res.max_abs_z),
                    check("j_drift", res.j_drift, bounds.j_drift),
                ],
                residuals: Some(res),
                failure: None,
            }
        }
        Err(e) => VerifyReport { checks: Vec::new(), residuals: None, failure: Some(e.to_string()) },
    }
}
