//! Basin labels, grids of initial conditions, ground-truth and NGRC-predicted
//! basin maps, error rates, and CSV/image output.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::History;
use crate::integrator::{integrate_final, sample_trajectory, ContinuousSystem, IntegratorConfig};
use crate::ngrc::{NgrcModel, RolloutStatus, DEFAULT_BLOWUP_THRESHOLD};
use crate::systems::{
    pendulum_attractors, twisted_state, winding_number, wrap_2pi, KuramotoRing, MagneticPendulum,
    MagneticPendulumParams,
};
use crate::StateVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasinLabel {
    /// Pendulum: magnet index. Kuramoto: absolute winding number.
    Attractor(u32),
    Diverged,
    Unresolved,
}

impl fmt::Display for BasinLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasinLabel::Attractor(i) => write!(f, "{i}"),
            BasinLabel::Diverged => f.write_str("diverged"),
            BasinLabel::Unresolved => f.write_str("unresolved"),
        }
    }
}

impl std::str::FromStr for BasinLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "diverged" => Ok(BasinLabel::Diverged),
            "unresolved" => Ok(BasinLabel::Unresolved),
            other => other
                .parse()
                .map(BasinLabel::Attractor)
                .map_err(|_| Error::InvalidConfig(format!("unknown basin label {other:?}"))),
        }
    }
}

fn out_of_bounds(state: &[f64]) -> bool {
    state
        .iter()
        .any(|v| !v.is_finite() || v.abs() > DEFAULT_BLOWUP_THRESHOLD)
}

/// Nearest attractor in the `(x, y)` plane; lowest index wins ties.
pub fn classify_pendulum_final(state: &[f64], attractors: &[StateVector]) -> BasinLabel {
    if out_of_bounds(state) {
        return BasinLabel::Diverged;
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, a) in attractors.iter().enumerate() {
        let d = (state[0] - a[0]).powi(2) + (state[1] - a[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    BasinLabel::Attractor(best as u32)
}

pub fn classify_kuramoto_final(theta: &[f64]) -> BasinLabel {
    if out_of_bounds(theta) {
        return BasinLabel::Diverged;
    }
    match winding_number(theta) {
        Ok(q) => BasinLabel::Attractor(q.unsigned_abs() as u32),
        Err(_) => BasinLabel::Unresolved,
    }
}

/// A system together with the rule that labels its final states.
#[derive(Debug, Clone, PartialEq)]
pub enum BasinSystem {
    Pendulum {
        system: MagneticPendulum,
        attractors: Vec<StateVector>,
    },
    Kuramoto(KuramotoRing),
}

impl BasinSystem {
    pub fn pendulum(params: MagneticPendulumParams) -> Result<Self> {
        params.validate()?;
        let attractors = pendulum_attractors(&params)?.to_vec();
        Ok(BasinSystem::Pendulum {
            system: MagneticPendulum::new(params),
            attractors,
        })
    }

    pub fn kuramoto(n: usize) -> Result<Self> {
        Ok(BasinSystem::Kuramoto(KuramotoRing::new(n)?))
    }

    pub fn dynamics(&self) -> &dyn ContinuousSystem {
        match self {
            BasinSystem::Pendulum { system, .. } => system,
            BasinSystem::Kuramoto(ring) => ring,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics().dimension()
    }

    pub fn classify(&self, state: &[f64]) -> BasinLabel {
        match self {
            BasinSystem::Pendulum { attractors, .. } => classify_pendulum_final(state, attractors),
            BasinSystem::Kuramoto(_) => classify_kuramoto_final(state),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionKind {
    PendulumRect {
        x_range: [f64; 2],
        y_range: [f64; 2],
    },
    KuramotoSlice {
        theta0: StateVector,
        p1: Vec<u8>,
        p2: Vec<u8>,
        alpha_range: [f64; 2],
    },
}

/// A 2D family of initial conditions sampled at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRegion {
    #[serde(flatten)]
    pub kind: RegionKind,
    /// `[n_x, n_y]`.
    pub resolution: [usize; 2],
}

impl GridRegion {
    pub fn pendulum_default(resolution: usize) -> Self {
        Self {
            kind: RegionKind::PendulumRect {
                x_range: [-1.5, 1.5],
                y_range: [-1.5, 1.5],
            },
            resolution: [resolution, resolution],
        }
    }

    pub fn kuramoto_slice(theta0: StateVector, p1: Vec<u8>, p2: Vec<u8>, resolution: usize) -> Self {
        Self {
            kind: RegionKind::KuramotoSlice {
                theta0,
                p1,
                p2,
                alpha_range: [-PI, PI],
            },
            resolution: [resolution, resolution],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.resolution[0] == 0 || self.resolution[1] == 0 {
            return bad("grid resolution must be positive".into());
        }
        let ordered = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        match &self.kind {
            RegionKind::PendulumRect { x_range, y_range } => {
                if !ordered(x_range) || !ordered(y_range) {
                    return bad("pendulum region ranges must be finite and increasing".into());
                }
            }
            RegionKind::KuramotoSlice {
                theta0,
                p1,
                p2,
                alpha_range,
            } => {
                if p1.len() != theta0.len() || p2.len() != theta0.len() {
                    return bad(format!(
                        "slice vectors must have {} components",
                        theta0.len()
                    ));
                }
                if p1.iter().chain(p2).any(|&b| b > 1) {
                    return bad("slice vectors must be binary".into());
                }
                if !ordered(alpha_range) {
                    return bad("alpha range must be finite and increasing".into());
                }
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            RegionKind::PendulumRect { .. } => 4,
            RegionKind::KuramotoSlice { theta0, .. } => theta0.len(),
        }
    }

    fn ranges(&self) -> ([f64; 2], [f64; 2]) {
        match &self.kind {
            RegionKind::PendulumRect { x_range, y_range } => (*x_range, *y_range),
            RegionKind::KuramotoSlice { alpha_range, .. } => (*alpha_range, *alpha_range),
        }
    }

    /// Cell-centered coordinates of cell `(i, j)`.
    pub fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        let (r1, r2) = self.ranges();
        let c = |r: [f64; 2], idx: usize, n: usize| r[0] + (idx as f64 + 0.5) * (r[1] - r[0]) / n as f64;
        (
            c(r1, i, self.resolution[0]),
            c(r2, j, self.resolution[1]),
        )
    }

    pub fn initial_condition_at(&self, c1: f64, c2: f64) -> StateVector {
        match &self.kind {
            RegionKind::PendulumRect { .. } => vec![c1, c2, 0.0, 0.0],
            RegionKind::KuramotoSlice { theta0, p1, p2, .. } => theta0
                .iter()
                .zip(p1.iter().zip(p2))
                .map(|(t, (&a, &b))| wrap_2pi(t + c1 * a as f64 + c2 * b as f64))
                .collect(),
        }
    }

    pub fn initial_condition(&self, i: usize, j: usize) -> StateVector {
        let (c1, c2) = self.coords(i, j);
        self.initial_condition_at(c1, c2)
    }

    /// Cell `(i, j)` for a row-major index `j * n_x + i`.
    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index % self.resolution[0], index / self.resolution[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinGrid {
    pub region: GridRegion,
    /// Row-major, index `j * n_x + i`.
    pub labels: Vec<BasinLabel>,
}

impl BasinGrid {
    pub fn new(region: GridRegion, labels: Vec<BasinLabel>) -> Result<Self> {
        if labels.len() != region.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {}×{} grid",
                labels.len(),
                region.resolution[0],
                region.resolution[1]
            )));
        }
        Ok(Self { region, labels })
    }

    pub fn get(&self, i: usize, j: usize) -> BasinLabel {
        self.labels[j * self.region.resolution[0] + i]
    }

    pub fn fraction_diverged(&self) -> f64 {
        let d = self
            .labels
            .iter()
            .filter(|l| **l == BasinLabel::Diverged)
            .count();
        d as f64 / self.labels.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W, provenance: Option<&serde_json::Value>) -> Result<()> {
        writeln!(w, "# region: {}", serde_json::to_string(&self.region)?)?;
        if let Some(p) = provenance {
            writeln!(w, "# config: {}", serde_json::to_string(p)?)?;
        }
        writeln!(w, "i,j,coord1,coord2,label")?;
        let [nx, ny] = self.region.resolution;
        for j in 0..ny {
            for i in 0..nx {
                let (c1, c2) = self.region.coords(i, j);
                writeln!(w, "{i},{j},{c1},{c2},{}", self.get(i, j))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, provenance: Option<&serde_json::Value>) -> Result<()> {
        self.write_csv(BufWriter::new(std::fs::File::create(path)?), provenance)
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfig(format!("basin CSV: {m}"));
        let mut region: Option<GridRegion> = None;
        let mut labels: Vec<Option<BasinLabel>> = Vec::new();
        for line in BufReader::new(r).lines() {
            let line = line?;
            if let Some(json) = line.strip_prefix("# region: ") {
                let reg: GridRegion = serde_json::from_str(json)?;
                labels = vec![None; reg.n_cells()];
                region = Some(reg);
                continue;
            }
            if line.starts_with('#') || line.starts_with("i,") || line.trim().is_empty() {
                continue;
            }
            let reg = region.as_ref().ok_or_else(|| bad("missing region header".into()))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 columns in {line:?}")));
            }
            let i: usize = fields[0].parse().map_err(|_| bad(line.clone()))?;
            let j: usize = fields[1].parse().map_err(|_| bad(line.clone()))?;
            if i >= reg.resolution[0] || j >= reg.resolution[1] {
                return Err(bad(format!("cell ({i}, {j}) outside the grid")));
            }
            labels[j * reg.resolution[0] + i] = Some(fields[4].parse()?);
        }
        let region = region.ok_or_else(|| bad("missing region header".into()))?;
        let labels = labels
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("missing cells".into()))?;
        BasinGrid::new(region, labels)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Fraction of cells whose labels differ. Only equal attractor labels count
/// as agreement.
pub fn error_rate(predicted: &BasinGrid, truth: &BasinGrid) -> Result<f64> {
    if predicted.region != truth.region {
        return Err(Error::ShapeMismatch(
            "basin grids cover different regions or resolutions".into(),
        ));
    }
    let wrong = predicted
        .labels
        .iter()
        .zip(&truth.labels)
        .filter(|(a, b)| !matches!((a, b), (BasinLabel::Attractor(x), BasinLabel::Attractor(y)) if x == y))
        .count();
    Ok(wrong as f64 / truth.labels.len() as f64)
}

/// Labels every cell by integrating the true system for `t_final`. Cells
/// whose integration fails are `Unresolved`.
pub fn true_basin_grid(
    system: &BasinSystem,
    region: &GridRegion,
    t_final: f64,
    cfg: &IntegratorConfig,
) -> Result<BasinGrid> {
    check_region(system, region, t_final)?;
    let labels = (0..region.n_cells())
        .into_par_iter()
        .map(|idx| {
            let (i, j) = region.cell(idx);
            let ic = region.initial_condition(i, j);
            match integrate_final(system.dynamics(), &ic, t_final, cfg) {
                Ok(x) => system.classify(&x),
                Err(_) => BasinLabel::Unresolved,
            }
        })
        .collect();
    BasinGrid::new(region.clone(), labels)
}

fn check_region(system: &BasinSystem, region: &GridRegion, t_final: f64) -> Result<()> {
    region.validate()?;
    if region.state_dim() != system.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: system.state_dim(),
            found: region.state_dim(),
        });
    }
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "basin horizon must be positive, got {t_final}"
        )));
    }
    Ok(())
}

/// Number of model iterations covering `t_final` after a warmup of `k`
/// states: `⌈T/dt⌉ - (k - 1)`.
pub fn rollout_steps(t_final: f64, dt: f64, k: usize) -> usize {
    let ratio = t_final / dt;
    // Absorb representation error such as 100 / 0.01 = 10000.000000000002.
    let total = (ratio * (1.0 - 4.0 * f64::EPSILON)).ceil() as usize;
    total.saturating_sub(k - 1)
}

/// The first `k` true samples from `ic`, spaced by the model's `dt`.
pub fn warmup_history(
    system: &BasinSystem,
    ic: &[f64],
    k: usize,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<History> {
    let traj = sample_trajectory(system.dynamics(), ic, dt, k, cfg)?;
    History::new(traj.states)
}

/// Labels every cell by rolling out `model` from `k` true warmup states.
pub fn ngrc_basin_grid(
    model: &NgrcModel,
    system: &BasinSystem,
    region: &GridRegion,
    t_final: f64,
    cfg: &IntegratorConfig,
) -> Result<BasinGrid> {
    check_region(system, region, t_final)?;
    if model.spec().state_dim != system.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: system.state_dim(),
            found: model.spec().state_dim,
        });
    }
    let k = model.spec().k;
    let steps = rollout_steps(t_final, model.dt(), k);
    let labels = (0..region.n_cells())
        .into_par_iter()
        .map(|idx| {
            let (i, j) = region.cell(idx);
            let ic = region.initial_condition(i, j);
            let Ok(warm) = warmup_history(system, &ic, k, model.dt(), cfg) else {
                return BasinLabel::Unresolved;
            };
            match model.rollout_final(&warm, steps, DEFAULT_BLOWUP_THRESHOLD) {
                Ok((_, RolloutStatus::Diverged(_))) => BasinLabel::Diverged,
                Ok((x, RolloutStatus::Completed)) => system.classify(&x),
                Err(_) => BasinLabel::Unresolved,
            }
        })
        .collect();
    BasinGrid::new(region.clone(), labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SliceMode {
    Alternating,
    RandomHalf { seed: u64 },
}

/// Binary orientation vectors for a Kuramoto slice.
pub fn make_slice_vectors(n: usize, mode: SliceMode) -> Result<(Vec<u8>, Vec<u8>)> {
    if n < 5 {
        return Err(Error::InvalidConfig(format!(
            "slice vectors need n >= 5, got {n}"
        )));
    }
    match mode {
        SliceMode::Alternating => {
            let p1 = (0..n).map(|i| (i % 2 == 0) as u8).collect();
            let p2 = (0..n).map(|i| (i % 2 == 1) as u8).collect();
            Ok((p1, p2))
        }
        SliceMode::RandomHalf { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || {
                let mut v = vec![0u8; n];
                for idx in sample(&mut rng, n, n / 2) {
                    v[idx] = 1;
                }
                v
            };
            let p1 = draw();
            let p2 = draw();
            Ok((p1, p2))
        }
    }
}

/// The slice through the `q`-twisted state with alternating orientations.
pub fn twisted_slice(n: usize, q: i64, resolution: usize) -> Result<GridRegion> {
    let (p1, p2) = make_slice_vectors(n, SliceMode::Alternating)?;
    Ok(GridRegion::kuramoto_slice(twisted_state(n, q, 0.0), p1, p2, resolution))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenderMode<'a> {
    Truth,
    /// Diverged cells in black.
    Prediction,
    /// Prediction colors with every cell that disagrees with `truth` in black.
    ErrorOverlay { truth: &'a BasinGrid },
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [188, 189, 34],
    [23, 190, 207],
    [127, 127, 127],
];
const BLACK: [u8; 3] = [0, 0, 0];
const UNRESOLVED_GRAY: [u8; 3] = [200, 200, 200];

pub fn label_color(label: BasinLabel) -> [u8; 3] {
    match label {
        BasinLabel::Attractor(i) => PALETTE[i as usize % PALETTE.len()],
        BasinLabel::Diverged => BLACK,
        BasinLabel::Unresolved => UNRESOLVED_GRAY,
    }
}

/// RGB pixels, one per cell, with the second coordinate increasing upwards.
pub fn render_pixels(grid: &BasinGrid, mode: RenderMode<'_>) -> Result<Vec<u8>> {
    if grid.labels.is_empty() {
        return Err(Error::ShapeMismatch("cannot render an empty grid".into()));
    }
    if let RenderMode::ErrorOverlay { truth } = mode {
        if truth.region != grid.region {
            return Err(Error::ShapeMismatch(
                "overlay reference covers a different grid".into(),
            ));
        }
    }
    let [nx, ny] = grid.region.resolution;
    let mut px = Vec::with_capacity(nx * ny * 3);
    for row in 0..ny {
        let j = ny - 1 - row;
        for i in 0..nx {
            let label = grid.get(i, j);
            let color = match mode {
                RenderMode::ErrorOverlay { truth } => match (label, truth.get(i, j)) {
                    (BasinLabel::Attractor(a), BasinLabel::Attractor(b)) if a == b => {
                        label_color(label)
                    }
                    _ => BLACK,
                },
                _ => label_color(label),
            };
            px.extend_from_slice(&color);
        }
    }
    Ok(px)
}

/// Writes a PNG, or a binary PPM when the extension is `.ppm`.
pub fn render_basin_map(grid: &BasinGrid, mode: RenderMode<'_>, path: &Path) -> Result<()> {
    let px = render_pixels(grid, mode)?;
    let [nx, ny] = grid.region.resolution;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        write!(w, "P6\n{nx} {ny}\n255\n")?;
        w.write_all(&px)?;
        w.flush()?;
    } else {
        let mut enc = png::Encoder::new(w, nx as u32, ny as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&px)?;
        writer.finish()?;
    }
    Ok(())
}
