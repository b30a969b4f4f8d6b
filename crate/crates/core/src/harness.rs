//! Experiment configuration, seed derivation, single runs, parameter sweeps,
//! training-IC diagnostics and artifact output.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basins::{
    error_rate, make_slice_vectors, ngrc_basin_grid, render_basin_map, rollout_steps,
    true_basin_grid, BasinGrid, BasinLabel, BasinSystem, GridRegion, RegionKind, RenderMode,
    SliceMode,
};
use crate::error::{Error, Result};
use crate::features::{make_rbf_centers, perturb_magnets, FeatureMap, FeatureSpec, History, Nonlinearity};
use crate::integrator::{sample_trajectory, IntegratorConfig, Trajectory};
use crate::ngrc::{train_with_stats, NgrcModel, RolloutStatus, DEFAULT_BLOWUP_THRESHOLD};
use crate::systems::{twisted_state, MagneticPendulumParams};
use crate::StateVector;

pub const SCHEMA_VERSION: u32 = 1;

/// Names of the derived sub-seeds.
pub mod seed_names {
    pub const TRAINING_ICS: &str = "training_ics";
    pub const RBF_CENTERS: &str = "rbf_centers";
    pub const MAGNET_PERTURBATION: &str = "magnet_perturbation";
    pub const SLICE_VECTORS: &str = "slice_vectors";
    pub const SLICE_BASE: &str = "slice_base";
    pub const REPLICATE: &str = "replicate";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// `splitmix64(splitmix64(master ^ fnv1a64(name)) + index)`.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a64(name)).wrapping_add(index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemConfig {
    Pendulum {
        #[serde(default)]
        params: MagneticPendulumParams,
    },
    Kuramoto { n: usize },
}

/// Feature family as written in a config; resolved into a [`FeatureSpec`]
/// once seeds and system parameters are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureDescriptor {
    Polynomial {
        d_max: usize,
    },
    RadialBasis {
        n_centers: usize,
        /// Defaults to the pendulum height.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        h: Option<f64>,
    },
    PendulumExact {
        #[serde(default)]
        delta: f64,
    },
    Trig {
        ell_max: usize,
    },
    KuramotoExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionConfig {
    PendulumRect {
        x_range: [f64; 2],
        y_range: [f64; 2],
    },
    /// Through the `q`-twisted state with alternating orientation vectors.
    TwistedSlice { q: i64 },
    /// Random base point and random half-populated orientation vectors.
    RandomSlice,
    ExplicitSlice {
        theta0: StateVector,
        p1: Vec<u8>,
        p2: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub param: String,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub replicates: usize,
}

fn one() -> usize {
    1
}

fn default_horizon() -> f64 {
    100.0
}

pub const SWEEP_PARAMS: [&str; 11] = [
    "dt",
    "lambda",
    "k",
    "n_traj",
    "n_train",
    "delta",
    "height",
    "n_centers",
    "d_max",
    "ell_max",
    "resolution",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub system: SystemConfig,
    pub features: FeatureDescriptor,
    pub k: usize,
    pub dt: f64,
    pub lambda: f64,
    pub n_traj: usize,
    pub n_train: usize,
    pub region: RegionConfig,
    pub resolution: usize,
    /// Basin horizon `T`.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub seed: u64,
    /// Explicit values for named sub-seeds; anything absent is derived from
    /// `seed`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    /// Pendulum defaults: `dt = 0.01`, `λ = 1`, `k = 2`, 100 trajectories of
    /// 5000 samples, 100×100 grid over `[-1.5, 1.5]²`.
    pub fn pendulum(features: FeatureDescriptor) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            system: SystemConfig::Pendulum {
                params: MagneticPendulumParams::default(),
            },
            features,
            k: 2,
            dt: 0.01,
            lambda: 1.0,
            n_traj: 100,
            n_train: 5000,
            region: RegionConfig::PendulumRect {
                x_range: [-1.5, 1.5],
                y_range: [-1.5, 1.5],
            },
            resolution: 100,
            horizon: 100.0,
            seed: 0,
            seeds: BTreeMap::new(),
            integrator: IntegratorConfig::default(),
            sweep: None,
        }
    }

    /// Kuramoto ring defaults: `dt = 0.01`, `λ = 1e-5`, `k = 2`, 300
    /// trajectories of 3000 samples, slice through the 2-twisted state.
    pub fn kuramoto(n: usize, features: FeatureDescriptor) -> Self {
        Self {
            system: SystemConfig::Kuramoto { n },
            lambda: 1e-5,
            n_traj: 300,
            n_train: 3000,
            region: RegionConfig::TwistedSlice { q: 2 },
            ..Self::pendulum(features)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        for (name, v) in [("dt", self.dt), ("lambda", self.lambda), ("horizon", self.horizon)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [
            ("k", self.k),
            ("n_traj", self.n_traj),
            ("n_train", self.n_train),
            ("resolution", self.resolution),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.horizon < (self.k - 1) as f64 * self.dt {
            return bad("horizon is shorter than the warmup".into());
        }
        self.integrator.validate()?;
        let pendulum = match &self.system {
            SystemConfig::Pendulum { params } => {
                params.validate()?;
                true
            }
            SystemConfig::Kuramoto { n } => {
                crate::systems::KuramotoParams::new(*n)?;
                false
            }
        };
        match (&self.features, pendulum) {
            (FeatureDescriptor::Polynomial { d_max }, _) if *d_max < 2 => {
                return bad(format!("d_max must be at least 2, got {d_max}"))
            }
            (FeatureDescriptor::RadialBasis { .. } | FeatureDescriptor::PendulumExact { .. }, false) => {
                return bad("radial basis and pendulum force features need the pendulum".into())
            }
            (FeatureDescriptor::KuramotoExact, true) => {
                return bad("Kuramoto features need the Kuramoto ring".into())
            }
            (FeatureDescriptor::RadialBasis { n_centers, h }, _) => {
                if *n_centers == 0 || h.is_some_and(|h| !(h > 0.0)) {
                    return bad("radial basis features need n_centers >= 1 and h > 0".into());
                }
            }
            (FeatureDescriptor::PendulumExact { delta }, _) => {
                if !(*delta >= 0.0 && delta.is_finite()) {
                    return bad(format!("delta must be non-negative, got {delta}"));
                }
            }
            (FeatureDescriptor::Trig { ell_max }, _) if *ell_max == 0 => {
                return bad("ell_max must be at least 1".into())
            }
            _ => {}
        }
        match (&self.region, pendulum) {
            (RegionConfig::PendulumRect { .. }, false) => {
                return bad("a rectangular region needs the pendulum".into())
            }
            (RegionConfig::PendulumRect { .. }, true) => {}
            (_, true) => return bad("slice regions need the Kuramoto ring".into()),
            _ => {}
        }
        if let Some(sweep) = &self.sweep {
            if !SWEEP_PARAMS.contains(&sweep.param.as_str()) {
                return bad(format!(
                    "unknown sweep parameter {:?}; expected one of {SWEEP_PARAMS:?}",
                    sweep.param
                ));
            }
            if sweep.values.is_empty() || sweep.replicates == 0 {
                return bad("a sweep needs at least one value and one replicate".into());
            }
            for &v in &sweep.values {
                let mut probe = self.clone();
                probe.sweep = None;
                probe.set_param(&sweep.param, v)?;
                probe.validate()?;
            }
        }
        Ok(())
    }

    /// Sets a sweepable parameter. Integer parameters must be whole.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let whole = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidConfig(format!("{name} must be a whole number, got {value}")))
            }
        };
        let mismatch = || Error::InvalidConfig(format!("{name} does not apply to this configuration"));
        match name {
            "dt" => self.dt = value,
            "lambda" => self.lambda = value,
            "k" => self.k = whole()?,
            "n_traj" => self.n_traj = whole()?,
            "n_train" => self.n_train = whole()?,
            "resolution" => self.resolution = whole()?,
            "horizon" => self.horizon = value,
            "delta" => match &mut self.features {
                FeatureDescriptor::PendulumExact { delta } => *delta = value,
                _ => return Err(mismatch()),
            },
            "height" => match &mut self.system {
                SystemConfig::Pendulum { params } => params.height = value,
                _ => return Err(mismatch()),
            },
            "n_centers" => match &mut self.features {
                FeatureDescriptor::RadialBasis { n_centers, .. } => *n_centers = whole()?,
                _ => return Err(mismatch()),
            },
            "d_max" => match &mut self.features {
                FeatureDescriptor::Polynomial { d_max } => *d_max = whole()?,
                _ => return Err(mismatch()),
            },
            "ell_max" => match &mut self.features {
                FeatureDescriptor::Trig { ell_max } => *ell_max = whole()?,
                _ => return Err(mismatch()),
            },
            _ => return Err(Error::InvalidConfig(format!("unknown parameter {name:?}"))),
        }
        Ok(())
    }

    pub fn sub_seed(&self, name: &str) -> u64 {
        self.seeds
            .get(name)
            .copied()
            .unwrap_or_else(|| derive_seed(self.seed, name, 0))
    }

    pub fn system(&self) -> Result<BasinSystem> {
        match &self.system {
            SystemConfig::Pendulum { params } => BasinSystem::pendulum(params.clone()),
            SystemConfig::Kuramoto { n } => BasinSystem::kuramoto(*n),
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.system {
            SystemConfig::Pendulum { .. } => 4,
            SystemConfig::Kuramoto { n } => *n,
        }
    }

    pub fn feature_spec(&self) -> Result<FeatureSpec> {
        let n = self.state_dim();
        let params = match &self.system {
            SystemConfig::Pendulum { params } => Some(params),
            SystemConfig::Kuramoto { .. } => None,
        };
        let family = match &self.features {
            FeatureDescriptor::Polynomial { d_max } => Nonlinearity::Polynomial { d_max: *d_max },
            FeatureDescriptor::RadialBasis { n_centers, h } => Nonlinearity::RadialBasis {
                centers: make_rbf_centers(*n_centers, self.sub_seed(seed_names::RBF_CENTERS)),
                h: h.unwrap_or_else(|| params.map_or(0.2, |p| p.height)),
            },
            FeatureDescriptor::PendulumExact { delta } => {
                let p = params.ok_or_else(|| Error::InvalidConfig("pendulum features need the pendulum".into()))?;
                Nonlinearity::PendulumExact {
                    magnets: perturb_magnets(
                        &p.magnets,
                        *delta,
                        self.sub_seed(seed_names::MAGNET_PERTURBATION),
                    ),
                    h: p.height,
                }
            }
            FeatureDescriptor::Trig { ell_max } => Nonlinearity::Trig { ell_max: *ell_max },
            FeatureDescriptor::KuramotoExact => Nonlinearity::KuramotoExact,
        };
        FeatureSpec::new(self.k, n, family)
    }

    pub fn grid_region(&self) -> Result<GridRegion> {
        let n = self.state_dim();
        let kind = match &self.region {
            RegionConfig::PendulumRect { x_range, y_range } => RegionKind::PendulumRect {
                x_range: *x_range,
                y_range: *y_range,
            },
            RegionConfig::TwistedSlice { q } => {
                let (p1, p2) = make_slice_vectors(n, SliceMode::Alternating)?;
                RegionKind::KuramotoSlice {
                    theta0: twisted_state(n, *q, 0.0),
                    p1,
                    p2,
                    alpha_range: [-PI, PI],
                }
            }
            RegionConfig::RandomSlice => {
                let (p1, p2) = make_slice_vectors(
                    n,
                    SliceMode::RandomHalf {
                        seed: self.sub_seed(seed_names::SLICE_VECTORS),
                    },
                )?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.sub_seed(seed_names::SLICE_BASE));
                let theta0 = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                RegionKind::KuramotoSlice {
                    theta0,
                    p1,
                    p2,
                    alpha_range: [-PI, PI],
                }
            }
            RegionConfig::ExplicitSlice { theta0, p1, p2 } => RegionKind::KuramotoSlice {
                theta0: theta0.clone(),
                p1: p1.clone(),
                p2: p2.clone(),
                alpha_range: [-PI, PI],
            },
        };
        let region = GridRegion {
            kind,
            resolution: [self.resolution, self.resolution],
        };
        region.validate()?;
        if region.state_dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: region.state_dim(),
            });
        }
        Ok(region)
    }

    /// Pendulum: uniform over the region with zero velocity. Kuramoto:
    /// uniform over `[0, 2π)ⁿ`.
    pub fn training_initial_conditions(&self) -> Vec<StateVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sub_seed(seed_names::TRAINING_ICS));
        match (&self.system, &self.region) {
            (SystemConfig::Pendulum { .. }, RegionConfig::PendulumRect { x_range, y_range }) => (0..self.n_traj)
                .map(|_| {
                    let x = rng.random_range(x_range[0]..x_range[1]);
                    let y = rng.random_range(y_range[0]..y_range[1]);
                    vec![x, y, 0.0, 0.0]
                })
                .collect(),
            _ => {
                let n = self.state_dim();
                (0..self.n_traj)
                    .map(|_| (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
                    .collect()
            }
        }
    }

    /// Every sub-seed this configuration consumes.
    pub fn resolved_seeds(&self) -> BTreeMap<String, u64> {
        let mut names = vec![seed_names::TRAINING_ICS];
        match &self.features {
            FeatureDescriptor::RadialBasis { .. } => names.push(seed_names::RBF_CENTERS),
            FeatureDescriptor::PendulumExact { .. } => names.push(seed_names::MAGNET_PERTURBATION),
            _ => {}
        }
        if matches!(self.region, RegionConfig::RandomSlice) {
            names.push(seed_names::SLICE_VECTORS);
            names.push(seed_names::SLICE_BASE);
        }
        let mut out: BTreeMap<String, u64> = names
            .into_iter()
            .map(|n| (n.to_string(), self.sub_seed(n)))
            .collect();
        out.insert("master".into(), self.seed);
        out
    }

    /// The part of the configuration that determines the ground truth.
    pub fn truth_key(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            system: &'a SystemConfig,
            region: GridRegion,
            horizon: f64,
            integrator: &'a IntegratorConfig,
        }
        Ok(serde_json::to_string(&Key {
            system: &self.system,
            region: self.grid_region()?,
            horizon: self.horizon,
            integrator: &self.integrator,
        })?)
    }

    /// Configuration of sweep replicate `r`: fresh model-side seeds, while
    /// the grid region stays fixed across the whole sweep.
    pub fn replicate(&self, r: usize) -> Self {
        let mut cfg = self.clone();
        cfg.sweep = None;
        for name in [seed_names::SLICE_VECTORS, seed_names::SLICE_BASE] {
            cfg.seeds.insert(name.to_string(), self.sub_seed(name));
        }
        cfg.seed = derive_seed(self.seed, seed_names::REPLICATE, r as u64);
        for name in [
            seed_names::TRAINING_ICS,
            seed_names::RBF_CENTERS,
            seed_names::MAGNET_PERTURBATION,
        ] {
            if let Some(base) = self.seeds.get(name) {
                cfg.seeds.insert(name.to_string(), derive_seed(*base, seed_names::REPLICATE, r as u64));
            }
        }
        cfg
    }
}

/// Ground-truth grids shared between runs with the same truth key. Each key
/// is computed once even when requested concurrently.
#[derive(Debug, Default)]
pub struct TruthCache {
    grids: Mutex<HashMap<String, Arc<Mutex<Option<BasinGrid>>>>>,
    dir: Option<std::path::PathBuf>,
}

impl TruthCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also persists grids as CSV files under `dir`.
    pub fn on_disk(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            grids: Mutex::new(HashMap::new()),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn get_or_compute(&self, cfg: &ExperimentConfig) -> Result<BasinGrid> {
        let key = cfg.truth_key()?;
        let slot = self
            .grids
            .lock()
            .expect("cache lock")
            .entry(key.clone())
            .or_default()
            .clone();
        let mut slot = slot.lock().expect("cache slot lock");
        if let Some(g) = slot.as_ref() {
            return Ok(g.clone());
        }
        let region = cfg.grid_region()?;
        let file = self
            .dir
            .as_ref()
            .map(|d| d.join(format!("truth_{:016x}.csv", fnv1a64(&key))));
        if let Some(grid) = file
            .as_ref()
            .and_then(|path| BasinGrid::load_csv(path).ok())
            .filter(|g| g.region == region)
        {
            *slot = Some(grid.clone());
            return Ok(grid);
        }
        let grid = true_basin_grid(&cfg.system()?, &region, cfg.horizon, &cfg.integrator)?;
        if let Some(path) = &file {
            let key_json: serde_json::Value = serde_json::from_str(&key)?;
            grid.save_csv(path, Some(&key_json))?;
        }
        *slot = Some(grid.clone());
        Ok(grid)
    }
}

/// Trains the model a configuration describes.
pub fn train_model(cfg: &ExperimentConfig) -> Result<(NgrcModel, f64)> {
    cfg.validate()?;
    let system = cfg.system()?;
    let spec = cfg.feature_spec()?;
    let ics = cfg.training_initial_conditions();
    let (model, stats) = train_with_stats(
        system.dynamics(),
        &ics,
        cfg.n_train,
        &spec,
        cfg.lambda,
        cfg.dt,
        &cfg.integrator,
    )?;
    Ok((model.with_seeds(cfg.resolved_seeds()), stats.rmse))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: NgrcModel,
    pub truth: BasinGrid,
    pub predicted: BasinGrid,
    pub p: f64,
    pub frac_diverged: f64,
    pub rmse: f64,
    /// Wall time of training plus prediction.
    pub seconds: f64,
}

/// Trains, predicts the basin grid and compares it with the ground truth.
pub fn run_single(cfg: &ExperimentConfig, cache: &TruthCache) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (model, rmse) = train_model(cfg)?;
    let system = cfg.system()?;
    let region = cfg.grid_region()?;
    let predicted = ngrc_basin_grid(&model, &system, &region, cfg.horizon, &cfg.integrator)?;
    let seconds = start.elapsed().as_secs_f64();
    let truth = cache.get_or_compute(cfg)?;
    let p = error_rate(&predicted, &truth)?;
    Ok(RunOutcome {
        frac_diverged: predicted.fraction_diverged(),
        model,
        truth,
        predicted,
        p,
        rmse,
        seconds,
    })
}

/// Writes `model.ngrc`, both basin CSVs, images and `summary.json`.
pub fn write_run_artifacts(dir: &Path, cfg: &ExperimentConfig, run: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let prov = cfg.to_value();
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    run.model.save(&dir.join("model.ngrc"), Some(prov.clone()))?;
    run.truth.save_csv(&dir.join("basins_truth.csv"), Some(&prov))?;
    run.predicted.save_csv(&dir.join("basins_pred.csv"), Some(&prov))?;
    render_basin_map(&run.truth, RenderMode::Truth, &dir.join("basins_truth.png"))?;
    render_basin_map(&run.predicted, RenderMode::Prediction, &dir.join("basins_pred.png"))?;
    render_basin_map(
        &run.predicted,
        RenderMode::ErrorOverlay { truth: &run.truth },
        &dir.join("basins_overlay.png"),
    )?;
    let summary = serde_json::json!({
        "config": prov,
        "p": run.p,
        "frac_diverged": run.frac_diverged,
        "rmse": run.rmse,
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub replicate: usize,
    pub seed: u64,
    pub p: f64,
    pub frac_diverged: f64,
    pub rmse: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub value: f64,
    pub mean_p: f64,
    pub std_p: f64,
    pub median_p: f64,
    pub n_ok: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl SweepReport {
    /// Mean, spread and median of `p` per sweep value, failed replicates
    /// excluded.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut values: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value) {
                values.push(r.value);
            }
        }
        values
            .into_iter()
            .map(|value| {
                let ps: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.value == value && r.error.is_none())
                    .map(|r| r.p)
                    .collect();
                let n = ps.len() as f64;
                let mean = ps.iter().sum::<f64>() / n;
                let var = if ps.len() > 1 {
                    ps.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                SweepSummary {
                    value,
                    mean_p: mean,
                    std_p: var.sqrt(),
                    median_p: median(ps.clone()),
                    n_ok: ps.len(),
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, provenance: Option<&serde_json::Value>) -> Result<()> {
        if let Some(p) = provenance {
            writeln!(w, "# config: {}", serde_json::to_string(p)?)?;
        }
        writeln!(w, "param,value,replicate,p,frac_diverged,rmse,seconds")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.3}",
                r.param, r.value, r.replicate, r.p, r.frac_diverged, r.rmse, r.seconds
            )?;
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            writeln!(
                w,
                "# failed: value={} replicate={}: {}",
                r.value,
                r.replicate,
                r.error.as_deref().unwrap_or_default()
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every `(value, replicate)` pair of the configured sweep. Failed
/// replicates are recorded with `NaN` metrics.
pub fn run_sweep(cfg: &ExperimentConfig, cache: &TruthCache) -> Result<SweepReport> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("configuration has no sweep section".into()))?;
    let mut rows = Vec::with_capacity(sweep.values.len() * sweep.replicates);
    for &value in &sweep.values {
        for r in 0..sweep.replicates {
            let mut rep = cfg.replicate(r);
            rep.set_param(&sweep.param, value)?;
            let mut row = SweepRow {
                param: sweep.param.clone(),
                value,
                replicate: r,
                seed: rep.seed,
                p: f64::NAN,
                frac_diverged: f64::NAN,
                rmse: f64::NAN,
                seconds: f64::NAN,
                error: None,
            };
            match run_single(&rep, cache) {
                Ok(out) => {
                    row.p = out.p;
                    row.frac_diverged = out.frac_diverged;
                    row.rmse = out.rmse;
                    row.seconds = out.seconds;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            rows.push(row);
        }
    }
    Ok(SweepReport { rows })
}

/// Time of the last change of the nearest-attractor label along a
/// trajectory.
fn settle_time(system: &BasinSystem, traj: &Trajectory) -> f64 {
    let mut last_change = 0usize;
    let mut prev: Option<BasinLabel> = None;
    for (t, s) in traj.states.iter().enumerate() {
        let l = system.classify(s);
        if prev.is_some_and(|p| p != l) {
            last_change = t;
        }
        prev = Some(l);
    }
    traj.t0 + last_change as f64 * traj.dt
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub ic: StateVector,
    pub truth_label: BasinLabel,
    pub predicted_label: BasinLabel,
    pub attractors_match: bool,
    pub rollout_status: RolloutStatus,
    pub truth_settle_time: f64,
    pub model_settle_time: f64,
    pub settle_time_difference: f64,
    /// RMS of the teacher-forced one-step residuals.
    pub teacher_forced_rmse: f64,
    #[serde(skip)]
    pub truth: Trajectory,
    #[serde(skip)]
    pub rollout: Trajectory,
    /// `x_{t+1} - (x_t + W g_t)` along the true trajectory.
    #[serde(skip)]
    pub teacher_forced_residuals: Vec<StateVector>,
}

/// Teacher-forced one-step residuals `x_{t+1} - x_t - W g_t` for every
/// window of a true trajectory.
pub fn one_step_residuals(model: &NgrcModel, traj: &Trajectory) -> Result<Vec<StateVector>> {
    let map: &FeatureMap = model.feature_map();
    let k = model.spec().k;
    let n = model.spec().state_dim;
    if traj.len() < k + 1 {
        return Err(Error::TrajectoryTooShort {
            len: traj.len(),
            required: k + 1,
        });
    }
    let mut g = vec![0.0; map.len()];
    let mut wg = vec![0.0; n];
    let mut out = Vec::with_capacity(traj.len() - k);
    for t in k - 1..traj.len() - 1 {
        map.embed_with(|lag| &traj.states[t - lag], &mut g);
        model.apply(&g, &mut wg);
        out.push(
            (0..n)
                .map(|i| (traj.states[t + 1][i] - traj.states[t][i]) - wg[i])
                .collect(),
        );
    }
    Ok(out)
}

/// Compares the true trajectory from `ic` with the model's teacher-forced
/// fit and its autonomous rollout over `[0, t_final]`.
pub fn diagnose_training_ic(
    model: &NgrcModel,
    system: &BasinSystem,
    ic: &[f64],
    t_final: f64,
    cfg: &IntegratorConfig,
) -> Result<DiagnosticReport> {
    let k = model.spec().k;
    let dt = model.dt();
    let steps = rollout_steps(t_final, dt, k);
    let truth = sample_trajectory(system.dynamics(), ic, dt, steps + k, cfg)?;
    let warm = History::new(truth.states[..k].to_vec())?;
    let rollout = model.rollout(&warm, steps, DEFAULT_BLOWUP_THRESHOLD)?;
    let residuals = one_step_residuals(model, &truth)?;
    let count = (residuals.len() * model.spec().state_dim).max(1) as f64;
    let tf_rmse = (residuals.iter().flatten().map(|r| r * r).sum::<f64>() / count).sqrt();
    let truth_label = system.classify(truth.last());
    let predicted_label = match rollout.status {
        RolloutStatus::Diverged(_) => BasinLabel::Diverged,
        RolloutStatus::Completed => system.classify(rollout.trajectory.last()),
    };
    let ts = settle_time(system, &truth);
    let ms = settle_time(system, &rollout.trajectory);
    Ok(DiagnosticReport {
        ic: ic.to_vec(),
        truth_label,
        predicted_label,
        attractors_match: matches!((truth_label, predicted_label), (BasinLabel::Attractor(a), BasinLabel::Attractor(b)) if a == b),
        rollout_status: rollout.status,
        truth_settle_time: ts,
        model_settle_time: ms,
        settle_time_difference: ms - ts,
        teacher_forced_rmse: tf_rmse,
        truth,
        rollout: rollout.trajectory,
        teacher_forced_residuals: residuals,
    })
}

/// Side-by-side CSV: time, true state, autonomous rollout state.
pub fn diagnostic_csv(report: &DiagnosticReport) -> String {
    let n = report.truth.dimension();
    let mut s = String::from("t");
    for i in 0..n {
        let _ = write!(s, ",true_{i}");
    }
    for i in 0..n {
        let _ = write!(s, ",model_{i}");
    }
    s.push('\n');
    for (t, x) in report.truth.states.iter().enumerate() {
        let _ = write!(s, "{}", t as f64 * report.truth.dt);
        for v in x {
            let _ = write!(s, ",{v}");
        }
        match report.rollout.states.get(t) {
            Some(y) => {
                for v in y {
                    let _ = write!(s, ",{v}");
                }
            }
            None => {
                for _ in 0..n {
                    s.push_str(",NaN");
                }
            }
        }
        s.push('\n');
    }
    s
}
