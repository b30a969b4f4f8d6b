//! Adaptive Dormand–Prince 5(4) integration of autonomous ODEs with dense
//! output, used to generate ground-truth trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::StateVector;

/// An autonomous system `dx/dt = f(x)` of fixed dimension.
pub trait ContinuousSystem: Sync {
    fn dimension(&self) -> usize;

    /// Writes `f(x)` into `dxdt`. Both slices have length `dimension()`.
    fn rhs(&self, x: &[f64], dxdt: &mut [f64]);

    fn derivative(&self, x: &[f64]) -> StateVector {
        let mut out = vec![0.0; self.dimension()];
        self.rhs(x, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    pub initial_step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_step: 0.5,
            initial_step: 1e-3,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerance(tol: f64) -> Self {
        Self {
            abs_tol: tol,
            rel_tol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.abs_tol > 0.0
            && self.rel_tol > 0.0
            && self.initial_step > 0.0
            && self.max_step >= self.initial_step;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "integrator tolerances and steps must be positive with max_step >= initial_step: {self:?}"
            )))
        }
    }
}

/// States sampled at a uniform interval `dt`, starting at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t0: f64,
    pub states: Vec<StateVector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

// Dormand–Prince 5(4) tableau.
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
// Shampine's continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// Stepper state. `k[0]` always holds `f(y)` at the current time (FSAL).
struct Dopri5<'a, S: ContinuousSystem + ?Sized> {
    sys: &'a S,
    cfg: IntegratorConfig,
    t: f64,
    h: f64,
    y: Vec<f64>,
    y_new: Vec<f64>,
    y_stage: Vec<f64>,
    k: [Vec<f64>; 7],
}

/// Data describing one accepted step, enough to build its interpolant.
struct Accepted<'s> {
    t_old: f64,
    h: f64,
    y_old: &'s [f64],
    y_new: &'s [f64],
    k: &'s [Vec<f64>; 7],
}

impl<'a, S: ContinuousSystem + ?Sized> Dopri5<'a, S> {
    fn new(sys: &'a S, x0: &[f64], cfg: IntegratorConfig) -> Result<Self> {
        cfg.validate()?;
        let n = sys.dimension();
        if x0.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: x0.len(),
            });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDerivative { t: 0.0 });
        }
        let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
        sys.rhs(x0, &mut k[0]);
        if k[0].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDerivative { t: 0.0 });
        }
        Ok(Self {
            sys,
            cfg,
            t: 0.0,
            h: cfg.initial_step.min(cfg.max_step),
            y: x0.to_vec(),
            y_new: vec![0.0; n],
            y_stage: vec![0.0; n],
            k,
        })
    }

    /// Attempts one step of size `h`; fills `y_new` and `k[1..7]` and
    /// returns the scaled error norm.
    fn attempt(&mut self, h: f64) -> f64 {
        let n = self.y.len();
        let y = &self.y;
        let ys = &mut self.y_stage;
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;

        for i in 0..n {
            ys[i] = y[i] + h * A21 * k1[i];
        }
        self.sys.rhs(ys, k2);
        for i in 0..n {
            ys[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        self.sys.rhs(ys, k3);
        for i in 0..n {
            ys[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        self.sys.rhs(ys, k4);
        for i in 0..n {
            ys[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        self.sys.rhs(ys, k5);
        for i in 0..n {
            ys[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        self.sys.rhs(ys, k6);
        let yn = &mut self.y_new;
        for i in 0..n {
            yn[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        self.sys.rhs(yn, k7);

        let mut sum = 0.0;
        for i in 0..n {
            let err = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = self.cfg.abs_tol + self.cfg.rel_tol * y[i].abs().max(yn[i].abs());
            let r = err / scale;
            sum += r * r;
        }
        (sum / n as f64).sqrt()
    }

    /// Advances exactly to `t_end`, calling `on_accept` after every accepted step.
    fn advance_to<F>(&mut self, t_end: f64, mut on_accept: F) -> Result<()>
    where
        F: FnMut(&Accepted<'_>),
    {
        while self.t < t_end {
            let remaining = t_end - self.t;
            let mut h = self.h.min(self.cfg.max_step);
            // Land exactly on t_end, and avoid leaving a sliver behind.
            let last = h >= remaining * (1.0 - 1e-12);
            if last {
                h = remaining;
            }
            loop {
                if h.abs() < 1e-14 * self.t.abs().max(1.0) {
                    return Err(Error::StepSizeUnderflow { t: self.t, h });
                }
                let err = self.attempt(h);
                if !err.is_finite() {
                    if self.y_new.iter().any(|v| !v.is_finite())
                        && h < 1e-12 * self.t.abs().max(1.0)
                    {
                        return Err(Error::NonFiniteDerivative { t: self.t });
                    }
                    h *= FAC_MIN;
                    continue;
                }
                if err <= 1.0 {
                    let fac = if err == 0.0 {
                        FAC_MAX
                    } else {
                        (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
                    };
                    let t_old = self.t;
                    on_accept(&Accepted {
                        t_old,
                        h,
                        y_old: &self.y,
                        y_new: &self.y_new,
                        k: &self.k,
                    });
                    self.t = if last { t_end } else { t_old + h };
                    std::mem::swap(&mut self.y, &mut self.y_new);
                    self.k.swap(0, 6);
                    // Keep the controller's proposal when the step was clipped.
                    self.h = if last { self.h.max(h * fac) } else { h * fac };
                    break;
                }
                let fac = (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0);
                h *= fac;
            }
        }
        Ok(())
    }
}

/// Dense solution assembled from accepted Dormand–Prince steps.
#[derive(Debug, Clone)]
pub struct ContinuousSolution {
    dim: usize,
    t_start: f64,
    t_end: f64,
    /// Step start times.
    times: Vec<f64>,
    steps: Vec<f64>,
    /// Five interpolation coefficient vectors per step, flattened.
    coeffs: Vec<f64>,
    final_state: StateVector,
}

impl ContinuousSolution {
    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    pub fn final_state(&self) -> &[f64] {
        &self.final_state
    }

    pub fn eval(&self, t: f64) -> Result<StateVector> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !(t >= self.t_start && t <= self.t_end) {
            return Err(Error::OutOfRange {
                requested: t,
                start: self.t_start,
                end: self.t_end,
            });
        }
        if t == self.t_end {
            out.copy_from_slice(&self.final_state);
            return Ok(());
        }
        if self.times.is_empty() {
            out.copy_from_slice(&self.final_state);
            return Ok(());
        }
        let idx = match self.times.partition_point(|&s| s <= t) {
            0 => 0,
            i => i - 1,
        };
        self.eval_step(idx, t, out);
        Ok(())
    }

    fn eval_step(&self, idx: usize, t: f64, out: &mut [f64]) {
        let n = self.dim;
        let theta = (t - self.times[idx]) / self.steps[idx];
        let theta1 = 1.0 - theta;
        let c = &self.coeffs[5 * n * idx..5 * n * (idx + 1)];
        for i in 0..n {
            out[i] = c[i]
                + theta
                    * (c[n + i]
                        + theta1 * (c[2 * n + i] + theta * (c[3 * n + i] + theta1 * c[4 * n + i])));
        }
    }

    /// Samples `n_samples` states at `t_start + j * dt`.
    pub fn sample(&self, dt: f64, n_samples: usize) -> Result<Trajectory> {
        if !(dt > 0.0) || n_samples == 0 {
            return Err(Error::InvalidConfig(format!(
                "sampling needs dt > 0 and n_samples >= 1 (dt = {dt}, n = {n_samples})"
            )));
        }
        let horizon = self.t_start + (n_samples - 1) as f64 * dt;
        // Absorb rounding in t_end = n * dt.
        if horizon > self.t_end * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::OutOfRange {
                requested: horizon,
                start: self.t_start,
                end: self.t_end,
            });
        }
        let mut states = Vec::with_capacity(n_samples);
        for j in 0..n_samples {
            let t = (self.t_start + j as f64 * dt).min(self.t_end);
            states.push(self.eval(t)?);
        }
        Ok(Trajectory {
            dt,
            t0: self.t_start,
            states,
        })
    }
}

fn check_horizon(t_final: f64) -> Result<()> {
    if t_final > 0.0 && t_final.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "integration horizon must be positive and finite, got {t_final}"
        )))
    }
}

/// Integrates over `[0, t_final]` and keeps a dense interpolant of every step.
pub fn integrate<S: ContinuousSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    t_final: f64,
    cfg: &IntegratorConfig,
) -> Result<ContinuousSolution> {
    check_horizon(t_final)?;
    let mut stepper = Dopri5::new(system, x0, *cfg)?;
    let n = system.dimension();
    let mut times = Vec::new();
    let mut steps = Vec::new();
    let mut coeffs = Vec::new();
    stepper.advance_to(t_final, |acc| {
        times.push(acc.t_old);
        steps.push(acc.h);
        let h = acc.h;
        let k = acc.k;
        let base = coeffs.len();
        coeffs.resize(base + 5 * n, 0.0);
        let c = &mut coeffs[base..];
        for i in 0..n {
            let dy = acc.y_new[i] - acc.y_old[i];
            let bspl = h * k[0][i] - dy;
            c[i] = acc.y_old[i];
            c[n + i] = dy;
            c[2 * n + i] = bspl;
            c[3 * n + i] = dy - h * k[6][i] - bspl;
            c[4 * n + i] = h
                * (D1 * k[0][i]
                    + D3 * k[2][i]
                    + D4 * k[3][i]
                    + D5 * k[4][i]
                    + D6 * k[5][i]
                    + D7 * k[6][i]);
        }
    })?;
    Ok(ContinuousSolution {
        dim: n,
        t_start: 0.0,
        t_end: t_final,
        times,
        steps,
        coeffs,
        final_state: stepper.y,
    })
}

/// Integrates over `[0, t_final]` and returns only the final state.
pub fn integrate_final<S: ContinuousSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    t_final: f64,
    cfg: &IntegratorConfig,
) -> Result<StateVector> {
    check_horizon(t_final)?;
    let mut stepper = Dopri5::new(system, x0, *cfg)?;
    stepper.advance_to(t_final, |_| {})?;
    Ok(stepper.y)
}

/// Integrates while forcing the stepper to land on every sample time
/// `j * dt`, so samples carry no interpolation error.
pub fn integrate_sampled<S: ContinuousSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    dt: f64,
    n_samples: usize,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    if !(dt > 0.0) || n_samples == 0 {
        return Err(Error::InvalidConfig(format!(
            "sampling needs dt > 0 and n_samples >= 1 (dt = {dt}, n = {n_samples})"
        )));
    }
    let mut stepper = Dopri5::new(system, x0, *cfg)?;
    let mut states = Vec::with_capacity(n_samples);
    states.push(x0.to_vec());
    for j in 1..n_samples {
        stepper.advance_to(j as f64 * dt, |_| {})?;
        states.push(stepper.y.clone());
    }
    Ok(Trajectory {
        dt,
        t0: 0.0,
        states,
    })
}

/// Integrates then samples the dense output: one solve per trajectory.
pub fn sample_trajectory<S: ContinuousSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    dt: f64,
    n_samples: usize,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    if n_samples == 1 {
        return Ok(Trajectory {
            dt,
            t0: 0.0,
            states: vec![x0.to_vec()],
        });
    }
    let solution = integrate(system, x0, (n_samples - 1) as f64 * dt, cfg)?;
    solution.sample(dt, n_samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Harmonic;
    impl ContinuousSystem for Harmonic {
        fn dimension(&self) -> usize {
            2
        }
        fn rhs(&self, x: &[f64], d: &mut [f64]) {
            d[0] = x[1];
            d[1] = -x[0];
        }
    }

    struct Drift;
    impl ContinuousSystem for Drift {
        fn dimension(&self) -> usize {
            1
        }
        fn rhs(&self, _x: &[f64], d: &mut [f64]) {
            d[0] = 1.0;
        }
    }

    struct Constant;
    impl ContinuousSystem for Constant {
        fn dimension(&self) -> usize {
            3
        }
        fn rhs(&self, _x: &[f64], d: &mut [f64]) {
            d.fill(0.0);
        }
    }

    struct BlowUp;
    impl ContinuousSystem for BlowUp {
        fn dimension(&self) -> usize {
            1
        }
        fn rhs(&self, x: &[f64], d: &mut [f64]) {
            d[0] = x[0] * x[0];
        }
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let cfg = IntegratorConfig::default();
        let end = integrate_final(&Harmonic, &[1.0, 0.0], 2.0 * std::f64::consts::PI, &cfg).unwrap();
        assert!((end[0] - 1.0).abs() < 1e-8, "{end:?}");
        assert!(end[1].abs() < 1e-8, "{end:?}");
    }

    #[test]
    fn dense_output_matches_exact_solution() {
        let cfg = IntegratorConfig::default();
        let sol = integrate(&Harmonic, &[1.0, 0.0], 10.0, &cfg).unwrap();
        for j in 0..=1000 {
            let t = j as f64 * 0.01;
            let y = sol.eval(t).unwrap();
            assert!((y[0] - t.cos()).abs() < 1e-8);
            assert!((y[1] + t.sin()).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_solution_samples() {
        let c = [0.3, -1.0, 2.5];
        let traj = sample_trajectory(&Constant, &c, 0.01, 5, &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.len(), 5);
        assert!(traj.states.iter().all(|s| s == &c));
    }

    #[test]
    fn linear_solution_samples() {
        let traj = sample_trajectory(&Drift, &[0.0], 0.5, 3, &IntegratorConfig::default()).unwrap();
        let xs: Vec<f64> = traj.states.iter().map(|s| s[0]).collect();
        for (x, e) in xs.iter().zip([0.0, 0.5, 1.0]) {
            assert!((x - e).abs() < 1e-12, "{xs:?}");
        }
    }

    #[test]
    fn sample_beyond_span_is_rejected() {
        let sol = integrate(&Drift, &[0.0], 1.0, &IntegratorConfig::default()).unwrap();
        assert!(matches!(sol.sample(0.5, 4), Err(Error::OutOfRange { .. })));
        assert!(matches!(sol.eval(1.5), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn finite_time_blow_up_is_an_error() {
        let res = integrate_final(&BlowUp, &[1.0], 2.0, &IntegratorConfig::default());
        assert!(
            matches!(
                res,
                Err(Error::StepSizeUnderflow { .. }) | Err(Error::NonFiniteDerivative { .. })
            ),
            "{res:?}"
        );
    }

    #[test]
    fn rejects_bad_config_and_inputs() {
        let mut cfg = IntegratorConfig::default();
        cfg.abs_tol = 0.0;
        assert!(integrate_final(&Harmonic, &[1.0, 0.0], 1.0, &cfg).is_err());
        let cfg = IntegratorConfig::default();
        assert!(integrate_final(&Harmonic, &[1.0], 1.0, &cfg).is_err());
        assert!(integrate_final(&Harmonic, &[f64::NAN, 0.0], 1.0, &cfg).is_err());
        assert!(integrate_final(&Harmonic, &[1.0, 0.0], 0.0, &cfg).is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = IntegratorConfig::default();
        let a = sample_trajectory(&Harmonic, &[0.2, 0.7], 0.01, 500, &cfg).unwrap();
        let b = sample_trajectory(&Harmonic, &[0.2, 0.7], 0.01, 500, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
