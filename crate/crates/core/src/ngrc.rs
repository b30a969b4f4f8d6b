//! Ridge-regression training of the NGRC readout and autonomous rollout of
//! the trained map `x_{t+1} = x_t + W g_t`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec, History};
use crate::integrator::{sample_trajectory, ContinuousSystem, IntegratorConfig, Trajectory};
use crate::StateVector;

pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e6;

const MODEL_MAGIC: &str = "NGRC-MODEL";
const MODEL_VERSION: u32 = 1;

/// Feature columns `G` (m × N) and one-step differences `Y` (n × N).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub g: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl DesignMatrices {
    pub fn n_samples(&self) -> usize {
        self.g.ncols()
    }
}

fn check_trajectory(traj: &Trajectory, spec: &FeatureSpec) -> Result<()> {
    if traj.len() < spec.k + 1 {
        return Err(Error::TrajectoryTooShort {
            len: traj.len(),
            required: spec.k + 1,
        });
    }
    if traj.dimension() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.state_dim,
            found: traj.dimension(),
        });
    }
    Ok(())
}

/// One column pair per window `t = k-1 … len-2` of every trajectory.
pub fn build_design(trajectories: &[Trajectory], spec: &FeatureSpec) -> Result<DesignMatrices> {
    let map = FeatureMap::new(spec.clone())?;
    let n = spec.state_dim;
    let k = spec.k;
    for traj in trajectories {
        check_trajectory(traj, spec)?;
    }
    let total: usize = trajectories.iter().map(|t| t.len() - k).sum();
    let mut g = DMatrix::zeros(map.len(), total);
    let mut y = DMatrix::zeros(n, total);
    let mut col = 0;
    for traj in trajectories {
        for t in k - 1..traj.len() - 1 {
            map.embed_with(|lag| &traj.states[t - lag], g.column_mut(col).as_mut_slice());
            for i in 0..n {
                y[(i, col)] = traj.states[t + 1][i] - traj.states[t][i];
            }
            col += 1;
        }
    }
    Ok(DesignMatrices { g, y })
}

/// Solves `W (G Gᵀ + λI) = Y Gᵀ` for the n × m readout.
pub fn ridge_solve(d: &DesignMatrices, lambda: f64) -> Result<DMatrix<f64>> {
    let gram = &d.g * d.g.transpose();
    let cross = &d.y * d.g.transpose();
    solve_normal_equations(&gram, &cross, lambda)
}

fn solve_normal_equations(
    gram: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "ridge coefficient must be positive, got {lambda}"
        )));
    }
    let mut a = gram.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned);
    }
    let chol = a.cholesky().ok_or(Error::IllConditioned)?;
    let w_t = chol.solve(&cross.transpose());
    if w_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned);
    }
    Ok(w_t.transpose())
}

/// Streaming accumulator of `G Gᵀ`, `Y Gᵀ` and `Σ y²`, for training sets
/// too large to hold `G` in memory.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    map: FeatureMap,
    gram: Vec<f64>,
    cross: Vec<f64>,
    y_sq: f64,
    count: usize,
}

impl NormalEquations {
    pub fn new(spec: FeatureSpec) -> Result<Self> {
        let map = FeatureMap::new(spec)?;
        let m = map.len();
        let n = map.spec().state_dim;
        Ok(Self {
            map,
            gram: vec![0.0; m * m],
            cross: vec![0.0; n * m],
            y_sq: 0.0,
            count: 0,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.count
    }

    pub fn add_trajectory(&mut self, traj: &Trajectory) -> Result<()> {
        let spec = self.map.spec();
        check_trajectory(traj, spec)?;
        let m = self.map.len();
        let n = spec.state_dim;
        let k = spec.k;
        let block_rows = ((1usize << 20) / m).clamp(256, 4096);
        let windows: Vec<usize> = (k - 1..traj.len() - 1).collect();
        let mut g_block = vec![0.0; block_rows * m];
        let mut y_block = vec![0.0; block_rows * n];
        for chunk in windows.chunks(block_rows) {
            let rows = chunk.len();
            for (r, &t) in chunk.iter().enumerate() {
                self.map
                    .embed_with(|lag| &traj.states[t - lag], &mut g_block[r * m..(r + 1) * m]);
                for i in 0..n {
                    let dy = traj.states[t + 1][i] - traj.states[t][i];
                    y_block[r * n + i] = dy;
                    self.y_sq += dy * dy;
                }
            }
            // gram (m×m) += G_bᵀ G_b, with G_b stored row-major (rows × m).
            // SAFETY: every pointer/stride pair addresses memory inside the
            // live buffers above with the stated dimensions.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    rows,
                    m,
                    1.0,
                    g_block.as_ptr(),
                    1,
                    m as isize,
                    g_block.as_ptr(),
                    m as isize,
                    1,
                    1.0,
                    self.gram.as_mut_ptr(),
                    m as isize,
                    1,
                );
                matrixmultiply::dgemm(
                    n,
                    rows,
                    m,
                    1.0,
                    y_block.as_ptr(),
                    1,
                    n as isize,
                    g_block.as_ptr(),
                    m as isize,
                    1,
                    1.0,
                    self.cross.as_mut_ptr(),
                    m as isize,
                    1,
                );
            }
            self.count += rows;
        }
        Ok(())
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.map.len();
        DMatrix::from_row_slice(m, m, &self.gram)
    }

    pub fn cross(&self) -> DMatrix<f64> {
        let m = self.map.len();
        let n = self.map.spec().state_dim;
        DMatrix::from_row_slice(n, m, &self.cross)
    }

    pub fn solve(&self, lambda: f64) -> Result<DMatrix<f64>> {
        solve_normal_equations(&self.gram(), &self.cross(), lambda)
    }

    /// RMS of `Y - W G` over all entries, from the accumulated moments.
    pub fn fit_rmse(&self, w: &DMatrix<f64>) -> f64 {
        let m = self.map.len();
        let n = self.map.spec().state_dim;
        if self.count == 0 {
            return 0.0;
        }
        let mut cross_term = 0.0;
        let mut quad_term = 0.0;
        let mut tmp = vec![0.0; m];
        for i in 0..n {
            let wi: Vec<f64> = (0..m).map(|j| w[(i, j)]).collect();
            for (j, c) in self.cross[i * m..(i + 1) * m].iter().enumerate() {
                cross_term += wi[j] * c;
            }
            for (a, t) in tmp.iter_mut().enumerate() {
                *t = self.gram[a * m..(a + 1) * m]
                    .iter()
                    .zip(&wi)
                    .map(|(g, w)| g * w)
                    .sum();
            }
            quad_term += wi.iter().zip(&tmp).map(|(w, t)| w * t).sum::<f64>();
        }
        let sse = (self.y_sq - 2.0 * cross_term + quad_term).max(0.0);
        (sse / (n * self.count) as f64).sqrt()
    }
}

/// Dot product with eight independent partial sums, so the loop vectorizes
/// while the summation order stays fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

/// Outcome of an autonomous rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutStatus {
    Completed,
    /// The state became non-finite or exceeded the blow-up threshold at this
    /// model step (1-based).
    Diverged(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Warmup states followed by every finite predicted state.
    pub trajectory: Trajectory,
    pub status: RolloutStatus,
}

/// A trained NGRC readout together with everything needed to run it.
#[derive(Debug, Clone)]
pub struct NgrcModel {
    spec: FeatureSpec,
    dt: f64,
    lambda: f64,
    /// Row-major n × m.
    weights: Vec<f64>,
    seeds: BTreeMap<String, u64>,
    map: FeatureMap,
}

impl PartialEq for NgrcModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.dt.to_bits() == other.dt.to_bits()
            && self.lambda.to_bits() == other.lambda.to_bits()
            && self.seeds == other.seeds
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    dt: f64,
    lambda: f64,
    rows: usize,
    cols: usize,
    spec: FeatureSpec,
    seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

impl NgrcModel {
    pub fn new(spec: FeatureSpec, dt: f64, lambda: f64, weights: &DMatrix<f64>) -> Result<Self> {
        let map = FeatureMap::new(spec.clone())?;
        let n = spec.state_dim;
        let m = map.len();
        if weights.nrows() != n || weights.ncols() != m {
            return Err(Error::ShapeMismatch(format!(
                "weights are {}×{}, model needs {n}×{m}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::IllConditioned);
        }
        let mut row_major = Vec::with_capacity(n * m);
        for i in 0..n {
            row_major.extend((0..m).map(|j| weights[(i, j)]));
        }
        Ok(Self::from_parts(spec, dt, lambda, row_major, BTreeMap::new(), map))
    }

    fn from_parts(
        spec: FeatureSpec,
        dt: f64,
        lambda: f64,
        weights: Vec<f64>,
        seeds: BTreeMap<String, u64>,
        map: FeatureMap,
    ) -> Self {
        Self {
            spec,
            dt,
            lambda,
            weights,
            seeds,
            map,
        }
    }

    pub fn with_seeds(mut self, seeds: BTreeMap<String, u64>) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn seeds(&self) -> &BTreeMap<String, u64> {
        &self.seeds
    }

    pub fn weights(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.spec.state_dim, self.map.len(), &self.weights)
    }

    /// `W g` for a full feature vector `g`.
    pub fn apply(&self, g: &[f64], out: &mut [f64]) {
        let m = self.map.len();
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(m)) {
            *o = dot(row, g);
        }
    }

    /// Teacher-forced prediction of `x_{t+1}` from a true history.
    pub fn predict_next(&self, history: &History) -> Result<StateVector> {
        let g = self.map.embed(history)?;
        let mut delta = vec![0.0; self.spec.state_dim];
        self.apply(&g, &mut delta);
        Ok(history
            .newest()
            .iter()
            .zip(&delta)
            .map(|(x, d)| x + d)
            .collect())
    }

    /// Iterates the model `n_steps` times from `warmup`, calling `on_state`
    /// for each new finite state. Returns the last finite state.
    pub fn run<F>(
        &self,
        warmup: &History,
        n_steps: usize,
        blowup_threshold: f64,
        mut on_state: F,
    ) -> Result<(StateVector, RolloutStatus)>
    where
        F: FnMut(&[f64]),
    {
        self.map.check_history(warmup)?;
        let n = self.spec.state_dim;
        let k = self.spec.k;
        let m = self.map.len();
        let block = self.spec.per_state_block();
        let off = self.map.nonlinear_offset();

        // Ring buffers, slot `(head + lag) % k` holds x_{t-lag}.
        let mut states: Vec<StateVector> = (0..k).map(|lag| warmup.lagged(lag).to_vec()).collect();
        let mut blocks: Vec<Vec<f64>> = match block {
            Some(b) => states
                .iter()
                .map(|s| {
                    let mut v = vec![0.0; b];
                    self.map.state_block(s, &mut v);
                    v
                })
                .collect(),
            None => Vec::new(),
        };
        let mut head = 0usize;
        let mut g = vec![0.0; m];
        let mut delta = vec![0.0; n];

        for step in 1..=n_steps {
            g[0] = 1.0;
            for lag in 0..k {
                let slot = (head + lag) % k;
                g[1 + lag * n..1 + (lag + 1) * n].copy_from_slice(&states[slot]);
                if let Some(b) = block {
                    g[off + lag * b..off + (lag + 1) * b].copy_from_slice(&blocks[slot]);
                }
            }
            if block.is_none() {
                self.map.embed_with(|lag| &states[(head + lag) % k], &mut g);
            }
            self.apply(&g, &mut delta);

            // Oldest slot becomes the newest state.
            let new_slot = (head + k - 1) % k;
            let current = head;
            let mut bad = false;
            for i in 0..n {
                let v = states[current][i] + delta[i];
                if !v.is_finite() || v.abs() > blowup_threshold {
                    bad = true;
                }
                delta[i] = v;
            }
            if bad {
                return Ok((states[current].clone(), RolloutStatus::Diverged(step)));
            }
            states[new_slot].copy_from_slice(&delta);
            if let Some(b) = block {
                let mut fresh = std::mem::take(&mut blocks[new_slot]);
                fresh.resize(b, 0.0);
                self.map.state_block(&states[new_slot], &mut fresh);
                blocks[new_slot] = fresh;
            }
            head = new_slot;
            on_state(&states[head]);
        }
        Ok((states[head].clone(), RolloutStatus::Completed))
    }

    pub fn rollout(
        &self,
        warmup: &History,
        n_steps: usize,
        blowup_threshold: f64,
    ) -> Result<RolloutResult> {
        let mut states: Vec<StateVector> = warmup.states().to_vec();
        states.reserve(n_steps);
        let (_, status) = self.run(warmup, n_steps, blowup_threshold, |s| states.push(s.to_vec()))?;
        Ok(RolloutResult {
            trajectory: Trajectory {
                dt: self.dt,
                t0: 0.0,
                states,
            },
            status,
        })
    }

    /// Final state only; avoids storing the trajectory.
    pub fn rollout_final(
        &self,
        warmup: &History,
        n_steps: usize,
        blowup_threshold: f64,
    ) -> Result<(StateVector, RolloutStatus)> {
        self.run(warmup, n_steps, blowup_threshold, |_| {})
    }

    pub fn write_to<W: Write>(&self, mut w: W, provenance: Option<serde_json::Value>) -> Result<()> {
        let header = ModelHeader {
            version: MODEL_VERSION,
            dt: self.dt,
            lambda: self.lambda,
            rows: self.spec.state_dim,
            cols: self.map.len(),
            spec: self.spec.clone(),
            seeds: self.seeds.clone(),
            provenance,
        };
        let json = serde_json::to_string(&header)?;
        writeln!(w, "{MODEL_MAGIC} {MODEL_VERSION}")?;
        writeln!(w, "{}", json.len())?;
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |msg: &str| Error::ModelFormat(msg.to_string());
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().ok_or_else(|| bad("empty file"))?;
        let magic = std::str::from_utf8(magic).map_err(|_| bad("bad magic"))?;
        let version: u32 = magic
            .strip_prefix(MODEL_MAGIC)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("missing magic line"))?;
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let len_line = lines.next().ok_or_else(|| bad("missing header length"))?;
        let len: usize = std::str::from_utf8(len_line)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("bad header length"))?;
        let rest = lines.next().ok_or_else(|| bad("missing header"))?;
        if rest.len() < len + 1 || rest[len] != b'\n' {
            return Err(bad("truncated header"));
        }
        let header: ModelHeader = serde_json::from_slice(&rest[..len])?;
        let payload = &rest[len + 1..];
        let count = header.rows * header.cols;
        if payload.len() != count * 8 {
            return Err(Error::ModelFormat(format!(
                "expected {} weight bytes, found {}",
                count * 8,
                payload.len()
            )));
        }
        let weights: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let map = FeatureMap::new(header.spec.clone())?;
        if map.len() != header.cols || header.spec.state_dim != header.rows {
            return Err(bad("weight shape does not match the feature spec"));
        }
        Ok(Self::from_parts(
            header.spec,
            header.dt,
            header.lambda,
            weights,
            header.seeds,
            map,
        ))
    }

    pub fn save(&self, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file), provenance)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// RMS of the one-step residuals `Y - W G`.
pub fn training_fit_rmse(model: &NgrcModel, d: &DesignMatrices) -> Result<f64> {
    let w = model.weights();
    if w.ncols() != d.g.nrows() || w.nrows() != d.y.nrows() || d.g.ncols() != d.y.ncols() {
        return Err(Error::ShapeMismatch(
            "model and design matrices disagree".to_string(),
        ));
    }
    if d.y.is_empty() {
        return Ok(0.0);
    }
    let resid = &d.y - &w * &d.g;
    Ok((resid.norm_squared() / resid.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingStats {
    pub n_samples: usize,
    pub rmse: f64,
}

/// Samples `n_train + k` states from each initial condition.
pub fn training_trajectories<S: ContinuousSystem + ?Sized>(
    system: &S,
    ics: &[StateVector],
    n_train: usize,
    k: usize,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<Trajectory>> {
    ics.par_iter()
        .map(|ic| sample_trajectory(system, ic, dt, n_train + k, cfg))
        .collect()
}

fn validate_training(ics: &[StateVector], n_train: usize, lambda: f64, dt: f64) -> Result<()> {
    if ics.is_empty() {
        return Err(Error::InvalidConfig("no training initial conditions".into()));
    }
    if n_train == 0 {
        return Err(Error::InvalidConfig("n_train must be at least 1".into()));
    }
    if !(lambda > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda and dt must be positive (lambda = {lambda}, dt = {dt})"
        )));
    }
    Ok(())
}

/// Integrates every initial condition, accumulates the normal equations and
/// solves for the readout. Trajectories are processed in fixed-size chunks
/// so memory stays bounded; the accumulation order is deterministic.
pub fn train_with_stats<S: ContinuousSystem + ?Sized>(
    system: &S,
    ics: &[StateVector],
    n_train: usize,
    spec: &FeatureSpec,
    lambda: f64,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<(NgrcModel, TrainingStats)> {
    validate_training(ics, n_train, lambda, dt)?;
    let mut normal = NormalEquations::new(spec.clone())?;
    let chunk = 4 * rayon::current_num_threads().max(1);
    for group in ics.chunks(chunk) {
        for traj in training_trajectories(system, group, n_train, spec.k, dt, cfg)? {
            normal.add_trajectory(&traj)?;
        }
    }
    let w = normal.solve(lambda)?;
    let rmse = normal.fit_rmse(&w);
    let model = NgrcModel::new(spec.clone(), dt, lambda, &w)?;
    Ok((
        model,
        TrainingStats {
            n_samples: normal.n_samples(),
            rmse,
        },
    ))
}

pub fn train<S: ContinuousSystem + ?Sized>(
    system: &S,
    ics: &[StateVector],
    n_train: usize,
    spec: &FeatureSpec,
    lambda: f64,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<NgrcModel> {
    train_with_stats(system, ics, n_train, spec, lambda, dt, cfg).map(|(m, _)| m)
}
