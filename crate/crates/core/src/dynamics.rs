//! Hamilton's equations of the Kepler-Heisenberg problem, an adaptive
//! Dormand-Prince 5(4) integrator with dense output and collision events,
//! and invariant diagnostics along trajectories.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::group::{first_integrals, GroupPoint, PhasePoint, PotentialParams};
use crate::numfmt::fmt17;

/// Default threshold on `mu` that triggers a collision event.
pub const DEFAULT_COLLISION_MU: f64 = 1e-12;

/// Time derivative of a phase point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseVelocity {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl PhaseVelocity {
    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.px, self.py, self.pz]
    }
}

/// Hamilton's equations for `H = ½(P_X² + P_Y²) - α μ^{-1/2}`.
pub fn vector_field(s: &PhasePoint, params: &PotentialParams) -> Result<PhaseVelocity> {
    let (frame_x, frame_y) = s.frame_momenta();
    let [gx, gy, gz] = params.potential_gradient(&s.q)?;
    let q = s.q;
    Ok(PhaseVelocity {
        x: frame_x,
        y: frame_y,
        z: 0.5 * q.x * frame_y - 0.5 * q.y * frame_x,
        px: -0.5 * frame_y * s.pz - gx,
        py: 0.5 * frame_x * s.pz - gy,
        pz: -gz,
    })
}

/// Why an integration stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    Completed,
    /// `mu` dropped below the collision threshold at time `t`.
    Collision {
        t: f64,
        mu: f64,
    },
}

/// Time-stamped phase points produced by [`Integrator::integrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub termination: Termination,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn is_collision(&self) -> bool {
        matches!(self.termination, Termination::Collision { .. })
    }

    pub fn final_state(&self) -> Option<&PhasePoint> {
        self.states.last()
    }

    pub fn final_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Writes `t,x,y,z,px,py,pz` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,x,y,z,px,py,pz")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let row: Vec<String> = std::iter::once(*t).chain(s.to_array()).map(fmt17).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ASCII")
    }
}

type State = [f64; 6];

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
/// Relative error below which a component cannot be resolved in `f64`.
const ROUNDING_FLOOR: f64 = 64.0 * f64::EPSILON;

fn combo(y: &State, h: f64, terms: &[(f64, &State)]) -> State {
    let mut out = *y;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        *o += h * acc;
    }
    out
}

fn hermite(t0: f64, h: f64, y0: &State, f0: &State, y1: &State, f1: &State, t: f64) -> State {
    let th = (t - t0) / h;
    let th2 = th * th;
    let th3 = th2 * th;
    let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
    let h10 = th3 - 2.0 * th2 + th;
    let h01 = -2.0 * th3 + 3.0 * th2;
    let h11 = th3 - th2;
    let mut out = [0.0; 6];
    for i in 0..6 {
        out[i] = h00 * y0[i] + h * h10 * f0[i] + h01 * y1[i] + h * h11 * f1[i];
    }
    out
}

fn state_mu(y: &State) -> f64 {
    GroupPoint::new(y[0], y[1], y[2]).mu()
}

/// Adaptive Dormand-Prince 5(4) integrator with PI step control.
#[derive(Debug, Clone, Copy)]
pub struct Integrator {
    params: PotentialParams,
    tol: f64,
    collision_mu: f64,
    exact_stops: bool,
    max_steps: usize,
}

impl Integrator {
    /// Relative and absolute tolerance are both set to `tol`.
    pub fn new(params: PotentialParams, tol: f64) -> Result<Self> {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Error::domain(format!("tolerance must be positive, got {tol}")));
        }
        Ok(Self { params, tol, collision_mu: DEFAULT_COLLISION_MU, exact_stops: false, max_steps: 5_000_000 })
    }

    pub fn with_collision_mu(mut self, collision_mu: f64) -> Result<Self> {
        if !(collision_mu >= 0.0 && collision_mu.is_finite()) {
            return Err(Error::domain(format!("collision threshold must be >= 0, got {collision_mu}")));
        }
        self.collision_mu = collision_mu;
        Ok(self)
    }

    /// Land steps exactly on requested sample times instead of
    /// interpolating between them.
    pub fn with_exact_stops(mut self, exact: bool) -> Self {
        self.exact_stops = exact;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn params(&self) -> &PotentialParams {
        &self.params
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn collision_mu(&self) -> f64 {
        self.collision_mu
    }

    fn collides(&self, y: &State) -> bool {
        !self.params.is_free() && state_mu(y) < self.collision_mu
    }

    fn rhs(&self, y: &State) -> Result<State> {
        Ok(vector_field(&PhasePoint::from_array(*y), &self.params)?.to_array())
    }

    /// Absolute local error bound `tol`, raised to the rounding floor of
    /// components too large for `tol` to be resolvable.
    fn error_scale(&self, v: f64) -> f64 {
        self.tol.max(ROUNDING_FLOOR * v.abs())
    }

    fn err_norm(&self, y0: &State, y1: &State, e: &State) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..6 {
            let sc = self.error_scale(y0[i].abs().max(y1[i].abs()));
            m = m.max((e[i] / sc).abs());
        }
        if m.is_nan() {
            f64::INFINITY
        } else {
            m
        }
    }

    fn initial_step(&self, y0: &State, f0: &State, span: f64) -> f64 {
        let scale = |i: usize| self.error_scale(y0[i]);
        let d0 = (0..6).map(|i| (y0[i] / scale(i)).abs()).fold(0.0, f64::max);
        let d1 = (0..6).map(|i| (f0[i] / scale(i)).abs()).fold(0.0, f64::max);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let y1 = combo(y0, h0, &[(1.0, f0)]);
        let h1 = match self.rhs(&y1) {
            Ok(f1) => {
                let d2 = (0..6).map(|i| ((f1[i] - f0[i]) / scale(i)).abs()).fold(0.0, f64::max) / h0;
                let dm = d1.max(d2);
                if dm <= 1e-15 {
                    (h0 * 1e-3).max(1e-6)
                } else {
                    (0.01 / dm).powf(0.2)
                }
            }
            Err(_) => h0,
        };
        (100.0 * h0).min(h1).min(span).max(f64::MIN_POSITIVE)
    }

    /// Flow map: the state at time `t`, or a collision error if the
    /// trajectory meets the collision threshold first.
    pub fn flow(&self, ic: &PhasePoint, t: f64) -> Result<PhasePoint> {
        let traj = self.run(ic, t, Some(&[t]), false)?;
        match traj.termination {
            Termination::Completed => Ok(*traj.final_state().expect("final sample recorded")),
            Termination::Collision { mu, .. } => Err(Error::Collision { mu, threshold: self.collision_mu }),
        }
    }

    /// Integrates from `t = 0` to `t_final`. Without `sample_times` every
    /// accepted step is recorded; otherwise only the requested times, which
    /// must be strictly increasing within `[0, t_final]`. A collision ends
    /// the run early with the event point as the last sample.
    pub fn integrate(&self, ic: &PhasePoint, t_final: f64, sample_times: Option<&[f64]>) -> Result<Trajectory> {
        self.run(ic, t_final, sample_times, true)
    }

    fn run(
        &self,
        ic: &PhasePoint,
        t_final: f64,
        sample_times: Option<&[f64]>,
        record_event: bool,
    ) -> Result<Trajectory> {
        if !(t_final >= 0.0 && t_final.is_finite()) {
            return Err(Error::domain(format!("t_final must be finite and >= 0, got {t_final}")));
        }
        if !ic.is_finite() {
            return Err(Error::domain("initial condition must be finite"));
        }
        if let Some(ts) = sample_times {
            let ordered = ts.windows(2).all(|w| w[0] < w[1]);
            let inside = ts.iter().all(|&t| (0.0..=t_final).contains(&t));
            if !ordered || !inside {
                return Err(Error::domain("sample times must be strictly increasing within [0, t_final]"));
            }
        }

        let mut y = ic.to_array();
        let mut f = self.rhs(&y)?;
        let mut t = 0.0;
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut next = 0usize;
        let push = |times: &mut Vec<f64>, states: &mut Vec<PhasePoint>, t: f64, y: &State| {
            times.push(t);
            states.push(PhasePoint::from_array(*y));
        };

        match sample_times {
            None => push(&mut times, &mut states, 0.0, &y),
            Some(ts) => {
                if ts.first() == Some(&0.0) {
                    push(&mut times, &mut states, 0.0, &y);
                    next = 1;
                }
            }
        }
        let mut traj = Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            accepted_steps: 0,
            rejected_steps: 0,
            termination: Termination::Completed,
        };
        if self.collides(&y) {
            if times.is_empty() {
                push(&mut times, &mut states, 0.0, &y);
            }
            traj.termination = Termination::Collision { t: 0.0, mu: state_mu(&y) };
            traj.times = times;
            traj.states = states;
            return Ok(traj);
        }
        if t_final == 0.0 {
            traj.times = times;
            traj.states = states;
            return Ok(traj);
        }

        let mut h = self.initial_step(&y, &f, t_final);
        let mut err_old: f64 = 1e-4;
        let mut steps = 0usize;
        loop {
            if t >= t_final {
                break;
            }
            steps += 1;
            if steps > self.max_steps {
                return Err(Error::TooManySteps { t, max_steps: self.max_steps });
            }
            let mut target = t_final;
            if self.exact_stops {
                if let Some(ts) = sample_times {
                    if next < ts.len() {
                        target = ts[next];
                    }
                }
            }
            let mut lands = false;
            if t + h >= target {
                h = target - t;
                lands = true;
            } else if t + 1.01 * h >= target {
                h = 0.5 * (target - t);
            }
            let h_min = 16.0 * f64::EPSILON * t.abs().max(1.0);
            if h < h_min && !lands {
                return Err(Error::StepSizeUnderflow { t, h });
            }

            let attempt = self.step(&y, &f, h);
            let (y_new, f_new, err) = match attempt {
                Ok((y_new, f_new, e)) => {
                    let err = self.err_norm(&y, &y_new, &e);
                    (y_new, f_new, err)
                }
                Err(_) => {
                    traj.rejected_steps += 1;
                    h *= 0.25;
                    if h < h_min {
                        return Err(Error::StepSizeUnderflow { t, h });
                    }
                    continue;
                }
            };

            if err > 1.0 {
                traj.rejected_steps += 1;
                let fac = err.powf(0.2 - 0.75 * BETA) / SAFETY;
                h /= fac.min(1.0 / FAC_MIN);
                continue;
            }

            traj.accepted_steps += 1;
            let t_new = if lands { target } else { t + h };

            if self.collides(&y_new) {
                let (t_hit, y_hit) = self.locate_collision(t, h, &y, &f, &y_new, &f_new);
                if let Some(ts) = sample_times {
                    while next < ts.len() && ts[next] < t_hit {
                        let ys = hermite(t, h, &y, &f, &y_new, &f_new, ts[next]);
                        push(&mut times, &mut states, ts[next], &ys);
                        next += 1;
                    }
                }
                if (record_event || sample_times.is_none()) && times.last().is_none_or(|&last| t_hit > last) {
                    push(&mut times, &mut states, t_hit, &y_hit);
                }
                traj.termination = Termination::Collision { t: t_hit, mu: state_mu(&y_hit) };
                break;
            }

            match sample_times {
                None => push(&mut times, &mut states, t_new, &y_new),
                Some(ts) => {
                    while next < ts.len() && ts[next] <= t_new {
                        let ys =
                            if ts[next] == t_new { y_new } else { hermite(t, h, &y, &f, &y_new, &f_new, ts[next]) };
                        push(&mut times, &mut states, ts[next], &ys);
                        next += 1;
                    }
                }
            }

            let err_c = err.max(1e-10);
            let fac = err_c.powf(0.2 - 0.75 * BETA) / err_old.powf(BETA) / SAFETY;
            let fac = fac.clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            err_old = err.max(1e-4);
            let h_next = h / fac;
            t = t_new;
            y = y_new;
            f = f_new;
            h = h_next;
        }

        traj.times = times;
        traj.states = states;
        Ok(traj)
    }

    fn step(&self, y: &State, k1: &State, h: f64) -> Result<(State, State, State)> {
        let k2 = self.rhs(&combo(y, h, &[(A21, k1)]))?;
        let k3 = self.rhs(&combo(y, h, &[(A31, k1), (A32, &k2)]))?;
        let k4 = self.rhs(&combo(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]))?;
        let k5 = self.rhs(&combo(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]))?;
        let k6 = self.rhs(&combo(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]))?;
        let y_new = combo(y, h, &[(A71, k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        if !y_new.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite stage"));
        }
        let k7 = self.rhs(&y_new)?;
        let mut e = [0.0; 6];
        for i in 0..6 {
            e[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        Ok((y_new, k7, e))
    }

    fn locate_collision(&self, t0: f64, h: f64, y0: &State, f0: &State, y1: &State, f1: &State) -> (f64, State) {
        let (mut lo, mut hi) = (t0, t0 + h);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let ym = hermite(t0, h, y0, f0, y1, f1, mid);
            if state_mu(&ym) < self.collision_mu {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let y = if hi == t0 + h { *y1 } else { hermite(t0, h, y0, f0, y1, f1, hi) };
        (hi, y)
    }
}

/// Integrates with default collision threshold and interpolated samples.
pub fn integrate(
    ic: &PhasePoint,
    t_final: f64,
    tol: f64,
    sample_times: Option<&[f64]>,
    params: &PotentialParams,
) -> Result<Trajectory> {
    Integrator::new(*params, tol)?.integrate(ic, t_final, sample_times)
}

/// Drift of the conserved and near-conserved quantities along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantReport {
    /// `max |H(t) - H(0)|`
    pub energy_drift: f64,
    /// `max |p_θ(t) - p_θ(0)|`
    pub angular_momentum_drift: f64,
    /// `max |J(t) - J(0) - 2 H(0) t|`
    pub dilation_drift: f64,
    pub min_mu: f64,
}

pub fn invariant_report(traj: &Trajectory, params: &PotentialParams) -> Result<InvariantReport> {
    let (Some(&t0), Some(s0)) = (traj.times.first(), traj.states.first()) else {
        return Err(Error::domain("trajectory is empty"));
    };
    let h0 = params.hamiltonian(s0)?;
    let fi0 = first_integrals(s0);
    let mut report =
        InvariantReport { energy_drift: 0.0, angular_momentum_drift: 0.0, dilation_drift: 0.0, min_mu: f64::INFINITY };
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let fi = first_integrals(s);
        report.energy_drift = report.energy_drift.max((params.hamiltonian(s)? - h0).abs());
        report.angular_momentum_drift = report.angular_momentum_drift.max((fi.p_theta - fi0.p_theta).abs());
        report.dilation_drift = report.dilation_drift.max((fi.j - fi0.j - 2.0 * h0 * (t - t0)).abs());
        report.min_mu = report.min_mu.min(s.q.mu());
    }
    Ok(report)
}

/// `max |½xẏ - ½yẋ - ż|` with velocities taken from the vector field.
pub fn horizontality_residual(traj: &Trajectory) -> f64 {
    traj.states
        .iter()
        .map(|s| {
            let (xd, yd) = s.frame_momenta();
            let zd = 0.5 * s.q.x * yd - 0.5 * s.q.y * xd;
            (0.5 * s.q.x * yd - 0.5 * s.q.y * xd - zd).abs()
        })
        .fold(0.0, f64::max)
}

/// Horizontality defect of a sampled path, using midpoint differences:
/// `max_i |½ x̄ Δy/Δt - ½ ȳ Δx/Δt - Δz/Δt|`.
pub fn horizontality_defect(times: &[f64], path: &[GroupPoint]) -> f64 {
    times
        .windows(2)
        .zip(path.windows(2))
        .map(|(t, q)| {
            let dt = t[1] - t[0];
            let xm = 0.5 * (q[0].x + q[1].x);
            let ym = 0.5 * (q[0].y + q[1].y);
            let g = 0.5 * xm * (q[1].y - q[0].y) - 0.5 * ym * (q[1].x - q[0].x) - (q[1].z - q[0].z);
            (g / dt).abs()
        })
        .fold(0.0, f64::max)
}
