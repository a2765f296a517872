//! Direct-method search for symmetric periodic orbits: minimize the discrete
//! action over symmetric loops with a quadratic penalty on the half-period
//! antisymmetry of `z`, raising the penalty weight geometrically.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::DEFAULT_COLLISION_MU;
use crate::error::{Error, Result};
use crate::group::{GroupPoint, PotentialParams};
use crate::lbfgs::{self, LbfgsOptions, StopReason};
use crate::loopspace::{
    action_parts, rotate_transpose, s2_residual, start_map, symmetric_z_projection, symmetry_residuals, LoopFile,
    SymmetricLoop, SymmetryClass, SymmetryResiduals,
};
use crate::numfmt::{self, fmt17};

/// Shape of the initial loop: a circle of radius `r0` whose radius is
/// modulated by `1 + eps cos(k ω t + phase)`, plus a small mean-free random
/// perturbation of the controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub r0: f64,
    pub eps: f64,
    pub phase: f64,
    /// Relative amplitude of the random control perturbation.
    pub jitter: f64,
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self { r0: 1.0, eps: 0.1, phase: 0.0, jitter: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeConfig {
    pub k: usize,
    pub n_f: usize,
    pub period: f64,
    pub w0: f64,
    pub growth: f64,
    pub stages: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub seed: SeedSpec,
    pub rng_seed: u64,
    /// Line-search trial loops whose midpoints come closer to the origin
    /// than this `mu` are refused.
    pub collision_mu: f64,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        Self {
            k: 3,
            n_f: 256,
            period: std::f64::consts::TAU,
            w0: 1.0,
            growth: 10.0,
            stages: 8,
            grad_tol: 1e-9,
            max_iter: 20_000,
            seed: SeedSpec::default(),
            rng_seed: 0,
            collision_mu: DEFAULT_COLLISION_MU,
        }
    }
}

impl MinimizeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.k < 3 {
            return Err(Error::domain(format!("k must be >= 3, got {}", self.k)));
        }
        if self.n_f < 2 || !self.n_f.is_multiple_of(2) {
            return Err(Error::domain(format!("N_f must be even and >= 2, got {}", self.n_f)));
        }
        if !positive(self.period) {
            return Err(Error::domain("period must be positive"));
        }
        if !positive(self.w0) {
            return Err(Error::domain("initial penalty weight must be positive"));
        }
        if !(self.growth > 1.0 && self.growth.is_finite()) {
            return Err(Error::domain("penalty growth factor must exceed 1"));
        }
        if self.stages == 0 || self.max_iter == 0 {
            return Err(Error::domain("stages and max_iter must be positive"));
        }
        if !positive(self.grad_tol) || !positive(self.collision_mu) {
            return Err(Error::domain("tolerances must be positive"));
        }
        if !positive(self.seed.r0) || !self.seed.eps.is_finite() || self.seed.eps.abs() >= 1.0 {
            return Err(Error::domain("seed needs r0 > 0 and |eps| < 1"));
        }
        if !(self.seed.jitter >= 0.0 && self.seed.jitter.is_finite()) || !self.seed.phase.is_finite() {
            return Err(Error::domain("seed jitter must be >= 0 and phase finite"));
        }
        Ok(())
    }
}

/// Action and penalty values of a loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub action: f64,
    /// Unweighted penalty.
    pub penalty: f64,
}

impl ObjectiveParts {
    pub fn total(&self, weight: f64) -> f64 {
        self.action + weight * self.penalty
    }
}

/// Gradient with respect to the loop variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopGradient {
    pub controls: Vec<[f64; 2]>,
    pub z0: f64,
}

impl LoopGradient {
    pub fn norm(&self) -> f64 {
        (self.controls.iter().flatten().map(|v| v * v).sum::<f64>() + self.z0 * self.z0).sqrt()
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.controls.iter().flatten().copied().collect();
        v.push(self.z0);
        v
    }
}

/// Penalty `Σ_i (z_{i+N/2} + z_i)² Δt + (z_{N_f} - z_0)²`, with heights past
/// the end of the loop continued by the net height gain `z_N - z_0`.
fn penalty(z: &[f64], n_f: usize, dt: f64) -> f64 {
    let n = z.len() - 1;
    let half = n / 2;
    let gain = z[n] - z[0];
    let mut sum = 0.0;
    for i in 0..n {
        let m = i + half;
        let zm = if m <= n { z[m] } else { z[m - n] + gain };
        sum += (zm + z[i]).powi(2);
    }
    sum * dt + (z[n_f] - z[0]).powi(2)
}

pub fn objective_parts(lp: &SymmetricLoop, params: &PotentialParams) -> Result<ObjectiveParts> {
    let action = action_parts(lp, params)?.total();
    Ok(ObjectiveParts { action, penalty: penalty(&lp.heights(), lp.n_f(), lp.dt()) })
}

/// `A_d + weight · penalty`.
pub fn objective(lp: &SymmetricLoop, weight: f64, params: &PotentialParams) -> Result<f64> {
    Ok(objective_parts(lp, params)?.total(weight))
}

/// Objective value and its exact gradient, accumulated in reverse through
/// the position and height recurrences.
pub fn value_and_gradient(lp: &SymmetricLoop, weight: f64, params: &PotentialParams) -> Result<(f64, LoopGradient)> {
    let class = lp.class();
    let (n, n_f, dt) = (lp.n(), lp.n_f(), lp.dt());
    let un = lp.unroll();
    let (u, pts) = (&un.velocities, &un.points);

    let mut bx = vec![0.0; n + 1];
    let mut by = vec![0.0; n + 1];
    let mut bz = vec![0.0; n + 1];
    let mut bu = vec![[0.0; 2]; n];

    let mut kinetic = 0.0;
    let mut potential = 0.0;
    for i in 0..n {
        let (a, b) = (pts[i], pts[i + 1]);
        let mid = GroupPoint::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y), 0.5 * (a.z + b.z));
        potential -= params.potential(&mid)? * dt;
        let [gx, gy, gz] = params.potential_gradient(&mid)?;
        let (mx, my, mz) = (-0.5 * gx * dt, -0.5 * gy * dt, -0.5 * gz * dt);
        bx[i] += mx;
        bx[i + 1] += mx;
        by[i] += my;
        by[i + 1] += my;
        bz[i] += mz;
        bz[i + 1] += mz;
        kinetic += 0.5 * (u[i][0] * u[i][0] + u[i][1] * u[i][1]) * dt;
        bu[i] = [u[i][0] * dt, u[i][1] * dt];
    }

    let z: Vec<f64> = pts.iter().map(|p| p.z).collect();
    let half = n / 2;
    let gain = z[n] - z[0];
    let mut pen = 0.0;
    for i in 0..n {
        let m = i + half;
        let zm = if m <= n { z[m] } else { z[m - n] + gain };
        let e = zm + z[i];
        pen += e * e * dt;
        let de = 2.0 * weight * e * dt;
        bz[i] += de;
        if m <= n {
            bz[m] += de;
        } else {
            bz[m - n] += de;
            bz[n] += de;
            bz[0] -= de;
        }
    }
    let per = z[n_f] - z[0];
    pen += per * per;
    bz[n_f] += 2.0 * weight * per;
    bz[0] -= 2.0 * weight * per;

    // z_{i+1} = z_i + ½(x_i y_{i+1} - x_{i+1} y_i)
    for i in (0..n).rev() {
        let ba = bz[i + 1];
        bz[i] += ba;
        bx[i] += 0.5 * pts[i + 1].y * ba;
        by[i + 1] += 0.5 * pts[i].x * ba;
        bx[i + 1] -= 0.5 * pts[i].y * ba;
        by[i] -= 0.5 * pts[i + 1].x * ba;
    }
    // p_{i+1} = p_i + u_i Δt
    for i in (0..n).rev() {
        bu[i][0] += bx[i + 1] * dt;
        bu[i][1] += by[i + 1] * dt;
        bx[i] += bx[i + 1];
        by[i] += by[i + 1];
    }

    let m = start_map(&class);
    let bd = [m[0][0] * bx[0] + m[1][0] * by[0], m[0][1] * bx[0] + m[1][1] * by[0]];
    let mut controls = vec![[bd[0] * dt, bd[1] * dt]; n_f];
    for j in 0..class.k() {
        let cs = class.rotation(j);
        for (i, c) in controls.iter_mut().enumerate() {
            let r = rotate_transpose(cs, bu[j * n_f + i]);
            c[0] += r[0];
            c[1] += r[1];
        }
    }

    let value = kinetic + potential + weight * pen;
    Ok((value, LoopGradient { controls, z0: bz[0] }))
}

pub fn gradient(lp: &SymmetricLoop, weight: f64, params: &PotentialParams) -> Result<LoopGradient> {
    Ok(value_and_gradient(lp, weight, params)?.1)
}

/// Deterministic initial loop for `config`.
pub fn seed_guess(config: &MinimizeConfig) -> Result<SymmetricLoop> {
    config.validate()?;
    let class = SymmetryClass::new(config.k)?;
    let SeedSpec { r0, eps, phase, jitter } = config.seed;
    let n_f = config.n_f;
    let dt = config.period / (config.k * n_f) as f64;
    let omega = std::f64::consts::TAU / config.period;
    let kf = config.k as f64;
    let point = |t: f64| {
        let r = r0 * (1.0 + eps * (kf * omega * t + phase).cos());
        [r * (omega * t).cos(), r * (omega * t).sin()]
    };
    let mut controls: Vec<[f64; 2]> = (0..n_f)
        .map(|i| {
            let a = point(i as f64 * dt);
            let b = point((i + 1) as f64 * dt);
            [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt]
        })
        .collect();
    if jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let amp = jitter * r0 * omega;
        let noise: Vec<[f64; 2]> =
            (0..n_f).map(|_| [amp * rng.gen_range(-1.0..1.0), amp * rng.gen_range(-1.0..1.0)]).collect();
        let mean = noise.iter().fold([0.0, 0.0], |m, v| [m[0] + v[0] / n_f as f64, m[1] + v[1] / n_f as f64]);
        for (c, v) in controls.iter_mut().zip(&noise) {
            c[0] += v[0] - mean[0];
            c[1] += v[1] - mean[1];
        }
    }
    SymmetricLoop::new(class, config.period, controls, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimizeStatus {
    Converged,
    Stalled,
    Collision,
    /// Even `k`: the symmetric part of `z` vanishes identically.
    Degenerate,
}

impl MinimizeStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            MinimizeStatus::Converged => "converged",
            MinimizeStatus::Stalled => "stalled",
            MinimizeStatus::Collision => "collision",
            MinimizeStatus::Degenerate => "degenerate",
        }
    }
}

/// One row of the objective history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub stage: usize,
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub s2_residual: f64,
}

/// Summary of one penalty stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSummary {
    pub weight: f64,
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub s2_residual: f64,
    pub max_abs_z: f64,
    pub reason: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub config: MinimizeConfig,
    pub alpha: f64,
    pub status: MinimizeStatus,
    pub lp: SymmetricLoop,
    pub history: Vec<HistoryRow>,
    pub stages: Vec<StageSummary>,
    pub action: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub residuals: SymmetryResiduals,
    pub max_abs_z: f64,
    /// `max |z|` after projecting the heights onto the loops that satisfy both
    /// symmetry conditions exactly; identically zero for even `k`.
    pub symmetric_max_abs_z: f64,
    pub min_mu: f64,
    /// Free-form record of how the run was produced; `null` by default.
    pub provenance: serde_json::Value,
}

impl MinimizeResult {
    /// Writes `stage,iter,objective,grad_norm,s2_residual`.
    pub fn write_history_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "stage,iter,objective,grad_norm,s2_residual")?;
        for r in &self.history {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.stage,
                r.iter,
                fmt17(r.objective),
                fmt17(r.grad_norm),
                fmt17(r.s2_residual)
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let stages: Vec<StageFile> = self
            .stages
            .iter()
            .map(|s| StageFile {
                weight: s.weight,
                iterations: s.iterations,
                objective: s.objective,
                grad_norm: s.grad_norm,
                s2_residual: s.s2_residual,
                max_abs_z: s.max_abs_z,
                stop: stop_label(s.reason),
            })
            .collect();
        let file = ResultFile {
            status: self.status,
            alpha: self.alpha,
            action: self.action,
            objective: self.objective,
            grad_norm: self.grad_norm,
            residuals: ResidualFile {
                s1: self.residuals.s1,
                s2: self.residuals.s2,
                z_periodicity: self.residuals.z_periodicity,
            },
            max_abs_z: self.max_abs_z,
            symmetric_max_abs_z: self.symmetric_max_abs_z,
            min_mu: self.min_mu,
            stages,
            config: self.config,
            provenance: self.provenance.clone(),
            loop_data: LoopFile::from(&self.lp),
        };
        serde_json::to_string_pretty(&file).expect("result serializes")
    }
}

fn stop_label(r: StopReason) -> &'static str {
    match r {
        StopReason::GradientTolerance => "gradient_tolerance",
        StopReason::FunctionTolerance => "function_tolerance",
        StopReason::MaxIterations => "max_iterations",
        StopReason::LineSearchFailed { collision: true } => "collision_barrier",
        StopReason::LineSearchFailed { collision: false } => "line_search_failed",
    }
}

#[derive(Serialize)]
struct ResidualFile {
    #[serde(serialize_with = "numfmt::ser_f64")]
    s1: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    s2: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    z_periodicity: f64,
}

#[derive(Serialize)]
struct StageFile {
    #[serde(serialize_with = "numfmt::ser_f64")]
    weight: f64,
    iterations: usize,
    #[serde(serialize_with = "numfmt::ser_f64")]
    objective: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    grad_norm: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    s2_residual: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    max_abs_z: f64,
    stop: &'static str,
}

#[derive(Serialize)]
struct ResultFile {
    status: MinimizeStatus,
    #[serde(serialize_with = "numfmt::ser_f64")]
    alpha: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    action: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    objective: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    grad_norm: f64,
    residuals: ResidualFile,
    #[serde(serialize_with = "numfmt::ser_f64")]
    max_abs_z: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    symmetric_max_abs_z: f64,
    #[serde(serialize_with = "numfmt::ser_f64")]
    min_mu: f64,
    stages: Vec<StageFile>,
    config: MinimizeConfig,
    provenance: serde_json::Value,
    #[serde(rename = "loop")]
    loop_data: LoopFile,
}

fn pack(lp: &SymmetricLoop) -> Vec<f64> {
    let mut v: Vec<f64> = lp.controls().iter().flatten().copied().collect();
    v.push(lp.z0());
    v
}

fn unpack(template: &SymmetricLoop, v: &[f64]) -> Result<SymmetricLoop> {
    let n_f = template.n_f();
    let controls = (0..n_f).map(|i| [v[2 * i], v[2 * i + 1]]).collect();
    template.with_controls(controls, v[2 * n_f])
}

/// Outcome of a single fixed-weight descent.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub lp: SymmetricLoop,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub reason: StopReason,
}

/// Runs L-BFGS on `A_d + weight · penalty` from `start`. Trial loops that
/// trip the collision guard of `params` are rejected by the line search.
pub fn minimize_stage<O>(
    start: &SymmetricLoop,
    weight: f64,
    params: &PotentialParams,
    opts: &LbfgsOptions,
    mut observe: O,
) -> Result<StageOutcome>
where
    O: FnMut(usize, &SymmetricLoop, f64, f64),
{
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::domain(format!("penalty weight must be >= 0, got {weight}")));
    }
    let template = start.clone();
    let eval = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let lp = unpack(&template, v)?;
        let (f, g) = value_and_gradient(&lp, weight, params)?;
        Ok((f, g.to_vec()))
    };
    let out = lbfgs::minimize(pack(start), eval, opts, |it, v, f, g| {
        if let Ok(lp) = unpack(&template, v) {
            observe(it, &lp, f, g);
        }
    })?;
    Ok(StageOutcome {
        lp: unpack(&template, &out.x)?,
        objective: out.f,
        grad_norm: out.grad_norm,
        iterations: out.iterations,
        reason: out.reason,
    })
}

fn min_mid_mu(lp: &SymmetricLoop) -> f64 {
    lp.unroll()
        .points
        .windows(2)
        .map(|w| GroupPoint::new(0.5 * (w[0].x + w[1].x), 0.5 * (w[0].y + w[1].y), 0.5 * (w[0].z + w[1].z)).mu())
        .fold(f64::INFINITY, f64::min)
}

/// Staged penalty minimization from [`seed_guess`].
pub fn minimize(config: &MinimizeConfig, params: &PotentialParams) -> Result<MinimizeResult> {
    let seed = seed_guess(config)?;
    minimize_from(config, params, seed)
}

/// Staged penalty minimization from a given loop.
pub fn minimize_from(
    config: &MinimizeConfig,
    params: &PotentialParams,
    start: SymmetricLoop,
) -> Result<MinimizeResult> {
    config.validate()?;
    if start.k() != config.k || start.n_f() != config.n_f {
        return Err(Error::domain("starting loop does not match the configured k and N_f"));
    }
    let guarded = if params.is_free() { *params } else { params.with_mu_min(config.collision_mu)? };
    let opts = LbfgsOptions { grad_tol: config.grad_tol, max_iter: config.max_iter, ..Default::default() };

    let mut lp = start;
    let mut history = Vec::new();
    let mut stages = Vec::new();
    let mut weight = config.w0;
    let mut last = None;
    for stage in 0..config.stages {
        let out = minimize_stage(&lp, weight, &guarded, &opts, |iter, l, f, g| {
            history.push(HistoryRow {
                stage,
                iter,
                objective: f,
                grad_norm: g,
                s2_residual: s2_residual(&l.heights()),
            });
        })?;
        let z = out.lp.heights();
        let summary = StageSummary {
            weight,
            iterations: out.iterations,
            objective: out.objective,
            grad_norm: out.grad_norm,
            s2_residual: s2_residual(&z),
            max_abs_z: z.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            reason: out.reason,
        };
        log::info!(
            "stage {stage}: weight {weight:e}, {} iterations, objective {:.12e}, |grad| {:.3e}, s2 {:.3e}, max|z| {:.3e}",
            summary.iterations,
            summary.objective,
            summary.grad_norm,
            summary.s2_residual,
            summary.max_abs_z
        );
        stages.push(summary);
        lp = out.lp;
        last = Some(out.reason);
        if matches!(out.reason, StopReason::LineSearchFailed { collision: true }) && out.iterations == 0 {
            break;
        }
        weight *= config.growth;
    }

    let final_weight = stages.last().map(|s| s.weight).unwrap_or(config.w0);
    let parts = objective_parts(&lp, params)?;
    let (_, grad) = value_and_gradient(&lp, final_weight, params)?;
    let z = lp.heights();
    let max_abs_z = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let symmetric_max_abs_z =
        symmetric_z_projection(&z[..lp.n()], lp.k(), lp.n_f()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let status = if lp.class().is_even() {
        MinimizeStatus::Degenerate
    } else {
        match last {
            Some(StopReason::GradientTolerance) | Some(StopReason::FunctionTolerance) => MinimizeStatus::Converged,
            Some(StopReason::LineSearchFailed { collision: true }) => MinimizeStatus::Collision,
            _ => MinimizeStatus::Stalled,
        }
    };
    Ok(MinimizeResult {
        config: *config,
        alpha: params.alpha(),
        status,
        residuals: symmetry_residuals(&lp),
        min_mu: min_mid_mu(&lp),
        action: parts.action,
        objective: parts.total(final_weight),
        grad_norm: grad.norm(),
        max_abs_z,
        symmetric_max_abs_z,
        lp,
        history,
        stages,
        provenance: serde_json::Value::Null,
    })
}
