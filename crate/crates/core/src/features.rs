//! Feature embeddings `g(x_t, x_{t-1}, …, x_{t-k+1})` for every readout
//! nonlinearity family.
//!
//! Layout of a feature vector of length `m = 1 + n·k + m_nonlin`:
//!
//! * `g[0] = 1` (bias);
//! * `g[1..1 + n·k]`: the delayed states, newest first;
//! * the nonlinear block. Polynomials are monomials over the linear block in
//!   graded-lexicographic order. Every other family is a concatenation of
//!   per-state blocks, newest state first, each block depending on a single
//!   delayed state only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::Point2;
use crate::StateVector;

/// Half-width of the square from which RBF centers are drawn.
pub const RBF_CENTER_EXTENT: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    /// All unique monomials of total degree `2..=d_max`.
    Polynomial { d_max: usize },
    /// `1 / (|r - c|² + h²)^{3/2}` on the planar position of each state.
    RadialBasis { centers: Vec<Point2>, h: f64 },
    /// Magnetic force components `(x̃ᵢ - x)/D³`, `(ỹᵢ - y)/D³` per magnet.
    PendulumExact { magnets: [Point2; 3], h: f64 },
    /// `sin(ℓθᵢ)`, `cos(ℓθᵢ)` for `1 ≤ ℓ ≤ ell_max`.
    Trig { ell_max: usize },
    /// `sin(θ_{i+1} - θᵢ)` and `sin(θ_{i-1} - θᵢ)` on a ring.
    KuramotoExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub k: usize,
    pub state_dim: usize,
    pub family: Nonlinearity,
}

/// Number of multisets of size `d` drawn from `n` items.
pub fn multichoose(n: usize, d: usize) -> usize {
    if n == 0 {
        return usize::from(d == 0);
    }
    // C(n + d - 1, d), computed incrementally and exactly.
    let mut acc: u128 = 1;
    for i in 1..=d as u128 {
        acc = acc * (n as u128 + i - 1) / i;
    }
    usize::try_from(acc).expect("feature count overflows usize")
}

impl FeatureSpec {
    pub fn new(k: usize, state_dim: usize, family: Nonlinearity) -> Result<Self> {
        let spec = Self {
            k,
            state_dim,
            family,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k == 0 {
            return bad("feature delay depth k must be at least 1".into());
        }
        if self.state_dim == 0 {
            return bad("state dimension must be positive".into());
        }
        match &self.family {
            Nonlinearity::Polynomial { d_max } if *d_max < 2 => {
                bad(format!("polynomial d_max must be >= 2, got {d_max}"))
            }
            Nonlinearity::RadialBasis { centers, h } => {
                if centers.is_empty() || !(*h > 0.0) {
                    bad("radial basis features need >= 1 center and h > 0".into())
                } else if self.state_dim < 2 {
                    bad("radial basis features need a planar position".into())
                } else {
                    Ok(())
                }
            }
            Nonlinearity::PendulumExact { h, .. } => {
                if self.state_dim != 4 || !(*h > 0.0) {
                    bad("pendulum force features need a 4D state and h > 0".into())
                } else {
                    Ok(())
                }
            }
            Nonlinearity::Trig { ell_max } if *ell_max == 0 => {
                bad("trig features need ell_max >= 1".into())
            }
            Nonlinearity::KuramotoExact if self.state_dim < 3 => {
                bad("Kuramoto features need a ring of at least 3 oscillators".into())
            }
            _ => Ok(()),
        }
    }

    pub fn linear_count(&self) -> usize {
        self.state_dim * self.k
    }

    /// Nonlinear features contributed by a single delayed state, for the
    /// families whose nonlinear block factorizes per state.
    pub fn per_state_block(&self) -> Option<usize> {
        let n = self.state_dim;
        match &self.family {
            Nonlinearity::Polynomial { .. } => None,
            Nonlinearity::RadialBasis { centers, .. } => Some(centers.len()),
            Nonlinearity::PendulumExact { .. } => Some(6),
            Nonlinearity::Trig { ell_max } => Some(2 * ell_max * n),
            Nonlinearity::KuramotoExact => Some(2 * n),
        }
    }

    pub fn nonlinear_count(&self) -> usize {
        match (&self.family, self.per_state_block()) {
            (Nonlinearity::Polynomial { d_max }, _) => (2..=*d_max)
                .map(|d| multichoose(self.linear_count(), d))
                .sum(),
            (_, Some(block)) => block * self.k,
            (_, None) => unreachable!(),
        }
    }
}

/// Total feature count `m = 1 + n·k + m_nonlin`.
pub fn feature_count(spec: &FeatureSpec) -> usize {
    1 + spec.linear_count() + spec.nonlinear_count()
}

/// A monomial as a sorted multiset of variable indices, e.g. `[0, 0, 3]`
/// for `v0² v3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Monomial(pub Vec<usize>);

impl Monomial {
    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.0.iter().map(|&i| vars[i]).product()
    }
}

/// All monomials of degree `2..=d_max` in `n_vars` variables, by degree and
/// then lexicographically by sorted index tuple.
pub fn enumerate_monomials(n_vars: usize, d_max: usize) -> Vec<Monomial> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for d in 2..=d_max {
        push_combinations(n_vars, d, 0, &mut current, &mut out);
    }
    out
}

fn push_combinations(
    n_vars: usize,
    remaining: usize,
    start: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<Monomial>,
) {
    if remaining == 0 {
        out.push(Monomial(current.clone()));
        return;
    }
    for v in start..n_vars {
        current.push(v);
        push_combinations(n_vars, remaining - 1, v, current, out);
        current.pop();
    }
}

/// Radial kernel `1 / (|r - c|² + h²)^{3/2}`.
pub fn rbf_value(r: Point2, center: Point2, h: f64) -> f64 {
    let dx = r[0] - center[0];
    let dy = r[1] - center[1];
    let s = dx * dx + dy * dy + h * h;
    1.0 / (s * s.sqrt())
}

/// `n_centers` points uniform over `[-1.5, 1.5]²`.
pub fn make_rbf_centers(n_centers: usize, seed: u64) -> Vec<Point2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_centers)
        .map(|_| {
            [
                rng.random_range(-RBF_CENTER_EXTENT..=RBF_CENTER_EXTENT),
                rng.random_range(-RBF_CENTER_EXTENT..=RBF_CENTER_EXTENT),
            ]
        })
        .collect()
}

/// Shifts every magnet coordinate by an independent draw from `[-δ, δ]`.
pub fn perturb_magnets(magnets: &[Point2; 3], delta: f64, seed: u64) -> [Point2; 3] {
    if delta == 0.0 {
        return *magnets;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = *magnets;
    for m in out.iter_mut() {
        for c in m.iter_mut() {
            *c += rng.random_range(-delta..=delta);
        }
    }
    out
}

/// `k` delayed states, oldest first: `x_{t-k+1}, …, x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    states: Vec<StateVector>,
}

impl History {
    pub fn new(states: Vec<StateVector>) -> Result<Self> {
        let Some(first) = states.first() else {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        };
        let n = first.len();
        if let Some(bad) = states.iter().find(|s| s.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: bad.len(),
            });
        }
        Ok(Self { states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.states[0].len()
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    /// `lag = 0` is the newest state.
    pub fn lagged(&self, lag: usize) -> &[f64] {
        &self.states[self.states.len() - 1 - lag]
    }

    pub fn newest(&self) -> &[f64] {
        self.lagged(0)
    }
}

/// Precomputed evaluation plan for a [`FeatureSpec`].
#[derive(Debug, Clone)]
pub struct FeatureMap {
    spec: FeatureSpec,
    m: usize,
    /// For each monomial: index of its parent (degree one lower) within the
    /// combined `[linear, monomials]` array, and the variable it multiplies.
    monomial_plan: Vec<(usize, usize)>,
}

impl FeatureMap {
    pub fn new(spec: FeatureSpec) -> Result<Self> {
        spec.validate()?;
        let m = feature_count(&spec);
        let monomial_plan = match spec.family {
            Nonlinearity::Polynomial { d_max } => {
                let n_vars = spec.linear_count();
                let monomials = enumerate_monomials(n_vars, d_max);
                let mut index = std::collections::HashMap::with_capacity(monomials.len());
                monomials
                    .iter()
                    .enumerate()
                    .map(|(i, mono)| {
                        let (last, parent) = mono.0.split_last().expect("degree >= 2");
                        let parent_idx = if parent.len() == 1 {
                            parent[0]
                        } else {
                            n_vars + index[parent]
                        };
                        index.insert(mono.0.as_slice(), i);
                        (parent_idx, *last)
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        Ok(Self {
            spec,
            m,
            monomial_plan,
        })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn nonlinear_offset(&self) -> usize {
        1 + self.spec.linear_count()
    }

    /// Evaluates the per-state nonlinear block for one state.
    pub fn state_block(&self, x: &[f64], out: &mut [f64]) {
        match &self.spec.family {
            Nonlinearity::RadialBasis { centers, h } => {
                let h2 = h * h;
                let (px, py) = (x[0], x[1]);
                for (o, c) in out.iter_mut().zip(centers) {
                    let dx = px - c[0];
                    let dy = py - c[1];
                    let s = dx * dx + dy * dy + h2;
                    *o = 1.0 / (s * s.sqrt());
                }
            }
            Nonlinearity::PendulumExact { magnets, h } => {
                let h2 = h * h;
                for (i, m) in magnets.iter().enumerate() {
                    let dx = m[0] - x[0];
                    let dy = m[1] - x[1];
                    let d2 = dx * dx + dy * dy + h2;
                    let inv_d3 = 1.0 / (d2 * d2.sqrt());
                    out[2 * i] = dx * inv_d3;
                    out[2 * i + 1] = dy * inv_d3;
                }
            }
            Nonlinearity::Trig { ell_max } => {
                let mut o = 0;
                for &theta in x {
                    for ell in 1..=*ell_max {
                        let (s, c) = (ell as f64 * theta).sin_cos();
                        out[o] = s;
                        out[o + 1] = c;
                        o += 2;
                    }
                }
            }
            Nonlinearity::KuramotoExact => {
                let n = x.len();
                for i in 0..n {
                    out[2 * i] = (x[(i + 1) % n] - x[i]).sin();
                    out[2 * i + 1] = (x[(i + n - 1) % n] - x[i]).sin();
                }
            }
            Nonlinearity::Polynomial { .. } => {
                unreachable!("polynomial features do not factorize per state")
            }
        }
    }

    /// Writes the full feature vector; `lagged(l)` returns `x_{t-l}`.
    pub fn embed_with<'a, F>(&self, lagged: F, out: &mut [f64])
    where
        F: Fn(usize) -> &'a [f64],
    {
        let n = self.spec.state_dim;
        let k = self.spec.k;
        out[0] = 1.0;
        for lag in 0..k {
            out[1 + lag * n..1 + (lag + 1) * n].copy_from_slice(lagged(lag));
        }
        let off = self.nonlinear_offset();
        match self.spec.per_state_block() {
            None => self.fill_monomials(out),
            Some(block) => {
                for lag in 0..k {
                    let start = off + lag * block;
                    self.state_block(lagged(lag), &mut out[start..start + block]);
                }
            }
        }
    }

    /// Fills the monomial block from the linear block already in `out`.
    fn fill_monomials(&self, out: &mut [f64]) {
        let n_vars = self.spec.linear_count();
        let (head, mono) = out[1..].split_at_mut(n_vars);
        for (i, &(parent, var)) in self.monomial_plan.iter().enumerate() {
            let p = if parent < n_vars {
                head[parent]
            } else {
                mono[parent - n_vars]
            };
            mono[i] = p * head[var];
        }
    }

    pub fn embed_into(&self, history: &History, out: &mut [f64]) -> Result<()> {
        self.check_history(history)?;
        if out.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                found: out.len(),
            });
        }
        self.embed_with(|lag| history.lagged(lag), out);
        Ok(())
    }

    pub fn embed(&self, history: &History) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m];
        self.embed_into(history, &mut out)?;
        Ok(out)
    }

    pub fn check_history(&self, history: &History) -> Result<()> {
        if history.len() != self.spec.k {
            return Err(Error::DimensionMismatch {
                expected: self.spec.k,
                found: history.len(),
            });
        }
        if history.dimension() != self.spec.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.state_dim,
                found: history.dimension(),
            });
        }
        Ok(())
    }
}

/// Builds the feature vector for `history` under `spec`.
pub fn embed(history: &History, spec: &FeatureSpec) -> Result<Vec<f64>> {
    FeatureMap::new(spec.clone())?.embed(history)
}
