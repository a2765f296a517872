//! Discretized horizontal loops with k-fold rotational symmetry.
//!
//! A loop is stored as `N_f` velocity controls on the fundamental time
//! domain `[0, T/k)`, plus the height `z0` of its first sample. The full
//! loop of `N = k N_f` intervals is obtained by rotating the controls by
//! successive multiples of `2π/k`. The planar start point is not free: it
//! is the unique point that makes the unrolled path equivariant, namely
//! `(R - I)⁻¹ d` where `d` is the displacement over one fundamental domain.
//! Heights are reconstructed from the midpoint horizontality constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{GroupPoint, PotentialParams};
use crate::numfmt;

/// Rotation order of a symmetric loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SymmetryClass {
    k: usize,
}

impl SymmetryClass {
    /// Requires `k >= 3`. Even `k` is accepted with a warning: combined with
    /// the half-period antisymmetry of `z` it forces `z ≡ 0`.
    pub fn new(k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::domain(format!("rotation order k must be >= 3, got {k}")));
        }
        if k.is_multiple_of(2) {
            log::warn!("k = {k} is even: the two symmetry conditions force z to be identically zero");
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_even(&self) -> bool {
        self.k.is_multiple_of(2)
    }

    pub fn angle(&self) -> f64 {
        std::f64::consts::TAU / self.k as f64
    }

    /// Rotation by `j · 2π/k` as `(cos, sin)`.
    pub fn rotation(&self, j: usize) -> (f64, f64) {
        let a = std::f64::consts::TAU * (j % self.k) as f64 / self.k as f64;
        (a.cos(), a.sin())
    }
}

pub(crate) fn rotate(cs: (f64, f64), v: [f64; 2]) -> [f64; 2] {
    [cs.0 * v[0] - cs.1 * v[1], cs.1 * v[0] + cs.0 * v[1]]
}

pub(crate) fn rotate_transpose(cs: (f64, f64), v: [f64; 2]) -> [f64; 2] {
    [cs.0 * v[0] + cs.1 * v[1], -cs.1 * v[0] + cs.0 * v[1]]
}

/// `(R - I)⁻¹` for the generating rotation, row-major.
pub(crate) fn start_map(class: &SymmetryClass) -> [[f64; 2]; 2] {
    let (c, s) = class.rotation(1);
    let det = 2.0 - 2.0 * c;
    [[(c - 1.0) / det, s / det], [-s / det, (c - 1.0) / det]]
}

/// Symmetric horizontal loop on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricLoop {
    class: SymmetryClass,
    period: f64,
    controls: Vec<[f64; 2]>,
    z0: f64,
}

/// Unrolled samples and controls of a loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Unrolled {
    /// `N` horizontal velocities, one per interval.
    pub velocities: Vec<[f64; 2]>,
    /// `N + 1` samples, the last one closing the loop in `xy`.
    pub points: Vec<GroupPoint>,
}

impl SymmetricLoop {
    pub fn new(class: SymmetryClass, period: f64, controls: Vec<[f64; 2]>, z0: f64) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::domain(format!("period must be positive, got {period}")));
        }
        let n_f = controls.len();
        if n_f < 2 || !n_f.is_multiple_of(2) {
            return Err(Error::domain(format!("N_f must be even and >= 2, got {n_f}")));
        }
        if !controls.iter().flatten().all(|v| v.is_finite()) || !z0.is_finite() {
            return Err(Error::domain("controls and z0 must be finite"));
        }
        Ok(Self { class, period, controls, z0 })
    }

    /// Builds a loop from a stored start point, checking that its planar
    /// part agrees with the one implied by the controls.
    pub fn from_parts(class: SymmetryClass, period: f64, controls: Vec<[f64; 2]>, start: GroupPoint) -> Result<Self> {
        let lp = Self::new(class, period, controls, start.z)?;
        let derived = lp.start();
        let scale = 1.0 + derived.x.abs().max(derived.y.abs());
        let gap = (derived.x - start.x).abs().max((derived.y - start.y).abs());
        if !(gap <= 1e-9 * scale) {
            return Err(Error::Format(format!(
                "start ({}, {}) is inconsistent with the controls, which imply ({}, {})",
                start.x, start.y, derived.x, derived.y
            )));
        }
        Ok(lp)
    }

    pub fn class(&self) -> SymmetryClass {
        self.class
    }

    pub fn k(&self) -> usize {
        self.class.k
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn n_f(&self) -> usize {
        self.controls.len()
    }

    /// Total number of intervals, `k N_f`.
    pub fn n(&self) -> usize {
        self.class.k * self.controls.len()
    }

    pub fn dt(&self) -> f64 {
        self.period / self.n() as f64
    }

    pub fn controls(&self) -> &[[f64; 2]] {
        &self.controls
    }

    pub fn z0(&self) -> f64 {
        self.z0
    }

    pub fn with_controls(&self, controls: Vec<[f64; 2]>, z0: f64) -> Result<Self> {
        Self::new(self.class, self.period, controls, z0)
    }

    /// First sample of the loop.
    pub fn start(&self) -> GroupPoint {
        let dt = self.dt();
        let d = self.controls.iter().fold([0.0, 0.0], |acc, c| [acc[0] + c[0] * dt, acc[1] + c[1] * dt]);
        let m = start_map(&self.class);
        GroupPoint::new(m[0][0] * d[0] + m[0][1] * d[1], m[1][0] * d[0] + m[1][1] * d[1], self.z0)
    }

    pub fn unrolled_velocities(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.n());
        for j in 0..self.class.k {
            let cs = self.class.rotation(j);
            out.extend(self.controls.iter().map(|&c| rotate(cs, c)));
        }
        out
    }

    /// All `N + 1` samples with midpoint-reconstructed heights.
    pub fn unroll(&self) -> Unrolled {
        let velocities = self.unrolled_velocities();
        let dt = self.dt();
        let mut points = Vec::with_capacity(velocities.len() + 1);
        let mut p = self.start();
        points.push(p);
        for u in &velocities {
            let next_x = p.x + u[0] * dt;
            let next_y = p.y + u[1] * dt;
            // ½(x̄ Δy - ȳ Δx) with midpoint averages x̄, ȳ
            let z = p.z + 0.5 * (p.x * next_y - next_x * p.y);
            p = GroupPoint::new(next_x, next_y, z);
            points.push(p);
        }
        Unrolled { velocities, points }
    }

    /// Heights of the `N + 1` samples.
    pub fn heights(&self) -> Vec<f64> {
        self.unroll().points.iter().map(|p| p.z).collect()
    }

    /// `δ_λ` applied to every sample with the period held fixed.
    pub fn dilate(&self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::domain(format!("dilation factor must be positive and finite, got {lambda}")));
        }
        let controls = self.controls.iter().map(|c| [lambda * c[0], lambda * c[1]]).collect();
        Self::new(self.class, self.period, controls, lambda * lambda * self.z0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LoopFile::from(self)).expect("loop serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LoopFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        file.into_loop()
    }
}

/// On-disk loop layout: `{k, T, N_f, controls, start}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopFile {
    pub k: usize,
    #[serde(rename = "T", serialize_with = "numfmt::ser_f64")]
    pub period: f64,
    #[serde(rename = "N_f")]
    pub n_f: usize,
    #[serde(serialize_with = "numfmt::ser_pairs")]
    pub controls: Vec<[f64; 2]>,
    #[serde(serialize_with = "numfmt::ser_f64_slice")]
    pub start: [f64; 3],
}

impl From<&SymmetricLoop> for LoopFile {
    fn from(lp: &SymmetricLoop) -> Self {
        let s = lp.start();
        LoopFile { k: lp.k(), period: lp.period, n_f: lp.n_f(), controls: lp.controls.clone(), start: [s.x, s.y, s.z] }
    }
}

impl LoopFile {
    pub fn into_loop(self) -> Result<SymmetricLoop> {
        if self.controls.len() != self.n_f {
            return Err(Error::Format(format!(
                "N_f = {} but {} control pairs were given",
                self.n_f,
                self.controls.len()
            )));
        }
        let class = SymmetryClass::new(self.k).map_err(|e| Error::Format(e.to_string()))?;
        let start = GroupPoint::new(self.start[0], self.start[1], self.start[2]);
        SymmetricLoop::from_parts(class, self.period, self.controls, start).map_err(|e| match e {
            Error::Domain(m) => Error::Format(m),
            other => other,
        })
    }
}

/// Free-function form of [`SymmetricLoop::unroll`].
pub fn unroll(lp: &SymmetricLoop) -> Unrolled {
    lp.unroll()
}

/// Per-interval area rate `a_i = ½(x̄_i Δy_i - ȳ_i Δx_i)/Δt`.
pub fn area_integrand(points: &[GroupPoint], dt: f64) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::domain("area integrand needs at least two samples"));
    }
    Ok(points
        .windows(2)
        .map(|w| {
            let xm = 0.5 * (w[0].x + w[1].x);
            let ym = 0.5 * (w[0].y + w[1].y);
            0.5 * (xm * (w[1].y - w[0].y) - ym * (w[1].x - w[0].x)) / dt
        })
        .collect())
}

/// Deviations of a loop from its symmetry conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetryResiduals {
    /// `max_n |p_{n+N_f} - R p_n|` over planar samples.
    pub s1: f64,
    /// `max_{i <= N/2} |z_{i+N/2} + z_i|`.
    pub s2: f64,
    /// `|z_{N_f} - z_0|`.
    pub z_periodicity: f64,
}

pub fn symmetry_residuals(lp: &SymmetricLoop) -> SymmetryResiduals {
    let pts = lp.unroll().points;
    let (n, n_f) = (lp.n(), lp.n_f());
    let cs = lp.class.rotation(1);
    let mut s1: f64 = 0.0;
    for i in 0..=n - n_f {
        let r = rotate(cs, [pts[i].x, pts[i].y]);
        s1 = s1.max((pts[i + n_f].x - r[0]).abs()).max((pts[i + n_f].y - r[1]).abs());
    }
    SymmetryResiduals {
        s1,
        s2: s2_residual(&pts.iter().map(|p| p.z).collect::<Vec<_>>()),
        z_periodicity: (pts[n_f].z - pts[0].z).abs(),
    }
}

/// `max_{i <= N/2} |z_{i+N/2} + z_i|` for `N + 1` heights.
pub fn s2_residual(z: &[f64]) -> f64 {
    let half = (z.len() - 1) / 2;
    (0..=half).map(|i| (z[i + half] + z[i]).abs()).fold(0.0, f64::max)
}

/// Projection of periodic heights `z_0 .. z_{N-1}` onto the loops that are
/// invariant under the shift by `N_f` and antisymmetric under the shift by
/// `N/2`. For even `k` both shifts coincide on the grid and the result is
/// identically zero.
pub fn symmetric_z_projection(z: &[f64], k: usize, n_f: usize) -> Vec<f64> {
    let n = z.len();
    debug_assert_eq!(n, k * n_f);
    let half = n / 2;
    (0..n)
        .map(|i| {
            let mut plus = 0.0;
            let mut minus = 0.0;
            for m in 0..k {
                plus += z[(i + m * n_f) % n];
                minus += z[(i + half + m * n_f) % n];
            }
            (plus - minus) / (2 * k) as f64
        })
        .collect()
}

/// Kinetic and potential parts of the discrete action, both nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionParts {
    /// `Σ ½|u_i|² Δt`
    pub kinetic: f64,
    /// `Σ α μ(midpoint_i)^{-1/2} Δt`
    pub potential: f64,
}

impl ActionParts {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential
    }
}

pub fn action_parts(lp: &SymmetricLoop, params: &PotentialParams) -> Result<ActionParts> {
    let un = lp.unroll();
    let dt = lp.dt();
    let mut kinetic = 0.0;
    let mut potential = 0.0;
    for (u, w) in un.velocities.iter().zip(un.points.windows(2)) {
        kinetic += 0.5 * (u[0] * u[0] + u[1] * u[1]) * dt;
        let mid = GroupPoint::new(0.5 * (w[0].x + w[1].x), 0.5 * (w[0].y + w[1].y), 0.5 * (w[0].z + w[1].z));
        potential -= params.potential(&mid)? * dt;
    }
    Ok(ActionParts { kinetic, potential })
}

/// `A_d = Σ [½|u_i|² + α μ(midpoint_i)^{-1/2}] Δt`.
pub fn discrete_action(lp: &SymmetricLoop, params: &PotentialParams) -> Result<f64> {
    Ok(action_parts(lp, params)?.total())
}
