//! The two benchmark systems: the damped magnetic pendulum with three
//! magnets, and a ring of identical nearest-neighbor Kuramoto oscillators.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::ContinuousSystem;
use crate::StateVector;

pub type Point2 = [f64; 2];

/// The three default magnets on the unit-radius-1/√3 circle.
pub fn default_magnets() -> [Point2; 3] {
    let s3 = 3f64.sqrt();
    [
        [1.0 / s3, 0.0],
        [-1.0 / (2.0 * s3), -0.5],
        [-1.0 / (2.0 * s3), 0.5],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagneticPendulumParams {
    pub omega0: f64,
    pub alpha: f64,
    pub height: f64,
    pub magnets: [Point2; 3],
}

impl Default for MagneticPendulumParams {
    fn default() -> Self {
        Self {
            omega0: 0.5,
            alpha: 0.2,
            height: 0.2,
            magnets: default_magnets(),
        }
    }
}

impl MagneticPendulumParams {
    pub fn with_height(height: f64) -> Self {
        Self {
            height,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.magnets.iter().flatten().all(|v| v.is_finite());
        if self.omega0 > 0.0 && self.alpha >= 0.0 && self.height > 0.0 && finite {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "pendulum needs omega0 > 0, alpha >= 0, height > 0: {self:?}"
            )))
        }
    }

    /// Total mechanical energy: kinetic + harmonic + magnetic potential.
    pub fn energy(&self, state: &[f64]) -> f64 {
        let (x, y, vx, vy) = (state[0], state[1], state[2], state[3]);
        let w2 = self.omega0 * self.omega0;
        let magnetic: f64 = self
            .magnets
            .iter()
            .map(|m| 1.0 / magnet_distance([x, y], *m, self.height))
            .sum();
        0.5 * (vx * vx + vy * vy) + 0.5 * w2 * (x * x + y * y) - magnetic
    }

    /// Planar force (acceleration without damping) at rest position `r`.
    fn static_force(&self, r: Point2) -> Point2 {
        let w2 = self.omega0 * self.omega0;
        let h2 = self.height * self.height;
        let mut f = [-w2 * r[0], -w2 * r[1]];
        for m in &self.magnets {
            let dx = m[0] - r[0];
            let dy = m[1] - r[1];
            let d2 = dx * dx + dy * dy + h2;
            let inv_d3 = 1.0 / (d2 * d2.sqrt());
            f[0] += dx * inv_d3;
            f[1] += dy * inv_d3;
        }
        f
    }

    fn static_force_jacobian(&self, r: Point2) -> [[f64; 2]; 2] {
        let w2 = self.omega0 * self.omega0;
        let h2 = self.height * self.height;
        let mut j = [[-w2, 0.0], [0.0, -w2]];
        for m in &self.magnets {
            let d = [m[0] - r[0], m[1] - r[1]];
            let d2 = d[0] * d[0] + d[1] * d[1] + h2;
            let dist = d2.sqrt();
            let inv_d3 = 1.0 / (d2 * dist);
            let inv_d5 = inv_d3 / d2;
            for a in 0..2 {
                j[a][a] -= inv_d3;
                for b in 0..2 {
                    j[a][b] += 3.0 * d[a] * d[b] * inv_d5;
                }
            }
        }
        j
    }
}

/// Distance between the bob at planar position `pos` and the point `magnet`
/// on a plane `h` below it.
pub fn magnet_distance(pos: Point2, magnet: Point2, h: f64) -> f64 {
    let dx = magnet[0] - pos[0];
    let dy = magnet[1] - pos[1];
    (dx * dx + dy * dy + h * h).sqrt()
}

/// Right-hand side for the state `(x, y, ẋ, ẏ)`, written into `out`.
pub fn pendulum_rhs_into(state: &[f64], p: &MagneticPendulumParams, out: &mut [f64]) {
    let (x, y, vx, vy) = (state[0], state[1], state[2], state[3]);
    let w2 = p.omega0 * p.omega0;
    let h2 = p.height * p.height;
    let mut fx = 0.0;
    let mut fy = 0.0;
    for m in &p.magnets {
        let dx = m[0] - x;
        let dy = m[1] - y;
        let d2 = dx * dx + dy * dy + h2;
        let inv_d3 = 1.0 / (d2 * d2.sqrt());
        fx += dx * inv_d3;
        fy += dy * inv_d3;
    }
    out[0] = vx;
    out[1] = vy;
    out[2] = -w2 * x - p.alpha * vx + fx;
    out[3] = -w2 * y - p.alpha * vy + fy;
}

pub fn pendulum_rhs(state: &[f64], p: &MagneticPendulumParams) -> StateVector {
    let mut out = vec![0.0; 4];
    pendulum_rhs_into(state, p, &mut out);
    out
}

/// The three stable rest points, one per magnet, refined by Newton's method
/// on the planar force balance starting from each magnet's position.
pub fn pendulum_attractors(p: &MagneticPendulumParams) -> Result<[StateVector; 3]> {
    let mut out: [StateVector; 3] = Default::default();
    for (idx, m) in p.magnets.iter().enumerate() {
        let mut r = *m;
        let mut converged = false;
        for _ in 0..100 {
            let f = p.static_force(r);
            let j = p.static_force_jacobian(r);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if !det.is_finite() || det == 0.0 {
                break;
            }
            let dx = (f[0] * j[1][1] - f[1] * j[0][1]) / det;
            let dy = (j[0][0] * f[1] - j[1][0] * f[0]) / det;
            r[0] -= dx;
            r[1] -= dy;
            if dx.abs().max(dy.abs()) < 1e-15 {
                converged = true;
                break;
            }
        }
        let f = p.static_force(r);
        let near = magnet_distance(r, *m, 0.0) < 0.2;
        if !(converged || f[0].abs().max(f[1].abs()) < 1e-12) || !near {
            return Err(Error::RootFindFailure { magnet: idx });
        }
        out[idx] = vec![r[0], r[1], 0.0, 0.0];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagneticPendulum {
    pub params: MagneticPendulumParams,
}

impl MagneticPendulum {
    pub fn new(params: MagneticPendulumParams) -> Self {
        Self { params }
    }
}

impl Default for MagneticPendulum {
    fn default() -> Self {
        Self::new(MagneticPendulumParams::default())
    }
}

impl ContinuousSystem for MagneticPendulum {
    fn dimension(&self) -> usize {
        4
    }

    fn rhs(&self, x: &[f64], dxdt: &mut [f64]) {
        pendulum_rhs_into(x, &self.params, dxdt);
    }
}

/// Ring of `n` identical oscillators coupled to their two neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KuramotoParams {
    pub n: usize,
}

impl KuramotoParams {
    pub fn new(n: usize) -> Result<Self> {
        let p = Self { n };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n >= 5 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "Kuramoto ring needs at least 5 oscillators, got {}",
                self.n
            )))
        }
    }

    /// Largest stable twist: stable twisted states satisfy |q| < n/4.
    pub fn max_stable_twist(&self) -> usize {
        (self.n - 1) / 4
    }
}

pub fn kuramoto_rhs_into(theta: &[f64], out: &mut [f64]) {
    let n = theta.len();
    for i in 0..n {
        let next = theta[(i + 1) % n];
        let prev = theta[(i + n - 1) % n];
        out[i] = (next - theta[i]).sin() + (prev - theta[i]).sin();
    }
}

pub fn kuramoto_rhs(theta: &[f64]) -> StateVector {
    let mut out = vec![0.0; theta.len()];
    kuramoto_rhs_into(theta, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KuramotoRing {
    pub params: KuramotoParams,
}

impl KuramotoRing {
    pub fn new(n: usize) -> Result<Self> {
        Ok(Self {
            params: KuramotoParams::new(n)?,
        })
    }
}

impl ContinuousSystem for KuramotoRing {
    fn dimension(&self) -> usize {
        self.params.n
    }

    fn rhs(&self, x: &[f64], dxdt: &mut [f64]) {
        kuramoto_rhs_into(x, dxdt);
    }
}

/// Maps an angle to `[0, 2π)`.
pub fn wrap_2pi(theta: f64) -> f64 {
    let r = theta.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        0.0
    } else {
        r
    }
}

/// Maps an angle to `(-π, π]`.
pub fn wrap_pi(theta: f64) -> f64 {
    let r = PI - (PI - theta).rem_euclid(2.0 * PI);
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// `θ_i = 2πiq/n + c`, reduced to `[0, 2π)`.
pub fn twisted_state(n: usize, q: i64, c: f64) -> StateVector {
    (0..n)
        .map(|i| wrap_2pi(2.0 * PI * (i as f64) * (q as f64) / n as f64 + c))
        .collect()
}

/// Net number of 2π wraps around the ring, before rounding.
pub fn winding_sum(theta: &[f64]) -> f64 {
    let n = theta.len();
    let total: f64 = (0..n)
        .map(|i| wrap_pi(theta[(i + 1) % n] - theta[i]))
        .sum();
    total / (2.0 * PI)
}

pub fn winding_number(theta: &[f64]) -> Result<i64> {
    let sum = winding_sum(theta);
    if !sum.is_finite() {
        return Err(Error::Unresolved { sum });
    }
    let q = sum.round();
    if (sum - q).abs() > 0.25 {
        return Err(Error::Unresolved { sum });
    }
    Ok(q as i64)
}
