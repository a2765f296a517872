//! Heisenberg group structure, dilations, the Folland potential and the
//! energies and first integrals of the Kepler-Heisenberg Hamiltonian.
//!
//! Coordinates are the exponential coordinates `(x, y, z)` in which the group
//! law is `(x1, y1, z1)·(x2, y2, z2) = (x1 + x2, y1 + y2, z1 + z2 + (x1 y2 - x2 y1)/2)`
//! and the horizontal frame is `X = ∂x - y/2 ∂z`, `Y = ∂y + x/2 ∂z`.

use std::ops::Mul;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default gravitational coupling, `2/π`.
pub const DEFAULT_ALPHA: f64 = std::f64::consts::FRAC_2_PI;

/// Default threshold on `mu` below which potential evaluations are refused.
pub const DEFAULT_MU_MIN: f64 = 1e-30;

/// A point of the Heisenberg group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GroupPoint {
    pub const ORIGIN: GroupPoint = GroupPoint { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Group product `self · other`.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: GroupPoint) -> GroupPoint {
        GroupPoint {
            x: self.x + other.x,
            y: self.y + other.y,
            z: self.z + other.z + 0.5 * (self.x * other.y - other.x * self.y),
        }
    }

    pub fn inverse(self) -> GroupPoint {
        GroupPoint::new(-self.x, -self.y, -self.z)
    }

    /// Anisotropic dilation `(λx, λy, λ²z)`.
    pub fn dilate(self, lambda: f64) -> Result<GroupPoint> {
        check_lambda(lambda)?;
        Ok(GroupPoint::new(lambda * self.x, lambda * self.y, lambda * lambda * self.z))
    }

    /// `μ = (x² + y²)² + z²/16`.
    pub fn mu(&self) -> f64 {
        let r2 = self.x * self.x + self.y * self.y;
        r2 * r2 + self.z * self.z / 16.0
    }

    /// Homogeneous norm `ρ = μ^{1/4}`.
    pub fn rho(&self) -> f64 {
        self.mu().powf(0.25)
    }
}

impl Mul for GroupPoint {
    type Output = GroupPoint;

    fn mul(self, rhs: GroupPoint) -> GroupPoint {
        GroupPoint::mul(self, rhs)
    }
}

/// A point `(x, y, z, p_x, p_y, p_z)` of the cotangent bundle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhasePoint {
    pub q: GroupPoint,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl PhasePoint {
    pub const fn new(x: f64, y: f64, z: f64, px: f64, py: f64, pz: f64) -> Self {
        Self { q: GroupPoint::new(x, y, z), px, py, pz }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.q.x, self.q.y, self.q.z, self.px, self.py, self.pz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Momenta dual to the horizontal frame: `(P_X, P_Y)`.
    pub fn frame_momenta(&self) -> (f64, f64) {
        (self.px - 0.5 * self.q.y * self.pz, self.py + 0.5 * self.q.x * self.pz)
    }

    /// Cotangent lift of the dilation:
    /// `(λx, λy, λ²z, λ⁻¹p_x, λ⁻¹p_y, λ⁻²p_z)`.
    pub fn dilate(&self, lambda: f64) -> Result<PhasePoint> {
        dilate_phase(lambda, self)
    }

    /// Euclidean distance in the six phase coordinates.
    pub fn distance(&self, other: &PhasePoint) -> f64 {
        self.to_array().iter().zip(other.to_array()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("dilation factor must be positive and finite, got {lambda}")))
    }
}

/// Group product; see [`GroupPoint::mul`].
pub fn group_mul(a: GroupPoint, b: GroupPoint) -> GroupPoint {
    a.mul(b)
}

pub fn group_inv(a: GroupPoint) -> GroupPoint {
    a.inverse()
}

/// Lifted dilation of a phase point.
pub fn dilate_phase(lambda: f64, s: &PhasePoint) -> Result<PhasePoint> {
    check_lambda(lambda)?;
    let inv = 1.0 / lambda;
    Ok(PhasePoint { q: s.q.dilate(lambda)?, px: s.px * inv, py: s.py * inv, pz: s.pz * inv * inv })
}

pub fn mu(q: &GroupPoint) -> f64 {
    q.mu()
}

pub fn rho(q: &GroupPoint) -> f64 {
    q.rho()
}

/// Coupling and singularity guard for the potential `U = -α μ^{-1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialParams {
    alpha: f64,
    mu_min: f64,
}

impl Default for PotentialParams {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, mu_min: DEFAULT_MU_MIN }
    }
}

impl PotentialParams {
    /// Gravitational model with coupling `alpha > 0`.
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::domain(format!(
                "alpha must be positive (use free_particle() for alpha = 0), got {alpha}"
            )));
        }
        Ok(Self { alpha, mu_min: DEFAULT_MU_MIN })
    }

    /// `alpha = 0`: pure sub-Riemannian geodesic flow.
    pub fn free_particle() -> Self {
        Self { alpha: 0.0, mu_min: DEFAULT_MU_MIN }
    }

    /// Accepts `alpha >= 0`, dispatching to the free-particle mode for zero.
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        if alpha == 0.0 {
            Ok(Self::free_particle())
        } else {
            Self::new(alpha)
        }
    }

    pub fn with_mu_min(mut self, mu_min: f64) -> Result<Self> {
        if !(mu_min > 0.0 && mu_min.is_finite()) {
            return Err(Error::domain(format!("mu_min must be positive, got {mu_min}")));
        }
        self.mu_min = mu_min;
        Ok(self)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mu_min(&self) -> f64 {
        self.mu_min
    }

    pub fn is_free(&self) -> bool {
        self.alpha == 0.0
    }

    /// Returns `μ(q)` after checking it against the collision threshold.
    /// The check is skipped in free-particle mode.
    pub(crate) fn guarded_mu(&self, q: &GroupPoint) -> Result<f64> {
        let m = q.mu();
        if !self.is_free() && !(m >= self.mu_min) {
            return Err(Error::Collision { mu: m, threshold: self.mu_min });
        }
        Ok(m)
    }

    /// `U(q) = -α μ^{-1/2}`.
    pub fn potential(&self, q: &GroupPoint) -> Result<f64> {
        let m = self.guarded_mu(q)?;
        if self.is_free() {
            return Ok(0.0);
        }
        Ok(-self.alpha / m.sqrt())
    }

    /// Euclidean gradient `(∂U/∂x, ∂U/∂y, ∂U/∂z)`.
    pub fn potential_gradient(&self, q: &GroupPoint) -> Result<[f64; 3]> {
        let m = self.guarded_mu(q)?;
        if self.is_free() {
            return Ok([0.0; 3]);
        }
        let r2 = q.x * q.x + q.y * q.y;
        let m32 = m.powf(-1.5);
        let radial = 2.0 * self.alpha * r2 * m32;
        Ok([radial * q.x, radial * q.y, self.alpha / 16.0 * q.z * m32])
    }

    pub fn energies(&self, s: &PhasePoint) -> Result<Energies> {
        let (frame_x, frame_y) = s.frame_momenta();
        let kinetic = 0.5 * (frame_x * frame_x + frame_y * frame_y);
        let potential = self.potential(&s.q)?;
        Ok(Energies { kinetic, potential, total: kinetic + potential, frame_x, frame_y })
    }

    /// Total energy `H = K + U`.
    pub fn hamiltonian(&self, s: &PhasePoint) -> Result<f64> {
        Ok(self.energies(s)?.total)
    }

    /// `L = ½ẋ² + ½ẏ² + α μ^{-1/2}` on horizontal velocities.
    pub fn lagrangian(&self, q: &GroupPoint, xdot: f64, ydot: f64) -> Result<f64> {
        Ok(0.5 * (xdot * xdot + ydot * ydot) - self.potential(q)?)
    }
}

/// Energy decomposition of a phase point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energies {
    pub kinetic: f64,
    pub potential: f64,
    pub total: f64,
    /// `P_X = p_x - y p_z / 2`
    pub frame_x: f64,
    /// `P_Y = p_y + x p_z / 2`
    pub frame_y: f64,
}

pub fn potential(q: &GroupPoint, params: &PotentialParams) -> Result<f64> {
    params.potential(q)
}

pub fn potential_gradient(q: &GroupPoint, params: &PotentialParams) -> Result<[f64; 3]> {
    params.potential_gradient(q)
}

pub fn energies(s: &PhasePoint, params: &PotentialParams) -> Result<Energies> {
    params.energies(s)
}

pub fn lagrangian(q: &GroupPoint, xdot: f64, ydot: f64, params: &PotentialParams) -> Result<f64> {
    params.lagrangian(q, xdot, ydot)
}

/// Angular momentum and the dilation generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstIntegrals {
    /// `p_θ = x p_y - y p_x`, conserved.
    pub p_theta: f64,
    /// `J = x p_x + y p_y + 2 z p_z`, with `dJ/dt = 2H`.
    pub j: f64,
}

pub fn first_integrals(s: &PhasePoint) -> FirstIntegrals {
    let q = s.q;
    FirstIntegrals { p_theta: q.x * s.py - q.y * s.px, j: q.x * s.px + q.y * s.py + 2.0 * q.z * s.pz }
}
