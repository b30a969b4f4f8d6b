use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ngrc_core::basins::{
    error_rate, ngrc_basin_grid, render_basin_map, BasinGrid, RenderMode,
};
use ngrc_core::harness::{
    diagnose_training_ic, diagnostic_csv, run_single, run_sweep, train_model, write_run_artifacts,
    ExperimentConfig, FeatureDescriptor, SystemConfig, TruthCache,
};
use ngrc_core::ngrc::NgrcModel;
use ngrc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ngrc", version, about = "NGRC basin-of-attraction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Magnet-position uncertainty for the exact pendulum features.
    #[arg(long)]
    delta: Option<f64>,
    /// Pendulum height above the magnet plane.
    #[arg(long)]
    height: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the true system over the grid and write basins_truth.csv.
    TruthBasins(Common),
    /// Train a model and write model.ngrc.
    Train(Common),
    /// Predict the basin grid with a trained (or freshly trained) model.
    PredictBasins {
        #[command(flatten)]
        common: Common,
        /// Existing model file; trains one from the config when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train, predict and compare in one go.
    Run(Common),
    /// Run the configured parameter sweep and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured replicate count.
        #[arg(long)]
        replicates: Option<usize>,
        /// Marks rows with p below this value as useful in the summary.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare teacher-forced fit and autonomous rollout on training ICs.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Only this training IC (default: all).
        #[arg(long)]
        ic_index: Option<usize>,
    },
    /// Render a basin CSV as an image (.png or .ppm).
    Render {
        /// Basin CSV to draw.
        #[arg(long)]
        grid: PathBuf,
        /// Reference grid for the overlay mode.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Truth)]
        mode: Mode,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Truth,
    Prediction,
    Overlay,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text)?
            }
            None => ExperimentConfig::pendulum(FeatureDescriptor::PendulumExact { delta: 0.0 }),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let set = |cfg: &mut ExperimentConfig, name: &str, v: Option<f64>| -> Result<()> {
            match v {
                Some(v) => cfg.set_param(name, v),
                None => Ok(()),
            }
        };
        set(&mut cfg, "dt", self.dt)?;
        set(&mut cfg, "lambda", self.lambda)?;
        set(&mut cfg, "k", self.k.map(|v| v as f64))?;
        set(&mut cfg, "n_traj", self.n_traj.map(|v| v as f64))?;
        set(&mut cfg, "n_train", self.n_train.map(|v| v as f64))?;
        set(&mut cfg, "resolution", self.resolution.map(|v| v as f64))?;
        set(&mut cfg, "delta", self.delta)?;
        if let Some(h) = self.height {
            match &mut cfg.system {
                SystemConfig::Pendulum { params } => params.height = h,
                SystemConfig::Kuramoto { .. } => {
                    return Err(Error::InvalidConfig("--height needs the pendulum".into()))
                }
            }
        }
        cfg.validate()?;
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        }
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("config.json"), cfg.to_json()?)?;
        Ok(cfg)
    }

    fn cache(&self) -> Result<TruthCache> {
        TruthCache::on_disk(&self.out.join("cache"))
    }
}

fn load_or_train(cfg: &ExperimentConfig, model: Option<&Path>) -> Result<NgrcModel> {
    match model {
        Some(path) => NgrcModel::load(path),
        None => Ok(train_model(cfg)?.0),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TruthBasins(common) => {
            let cfg = common.resolve()?;
            let grid = common.cache()?.get_or_compute(&cfg)?;
            grid.save_csv(&common.out.join("basins_truth.csv"), Some(&cfg.to_value()))?;
            render_basin_map(&grid, RenderMode::Truth, &common.out.join("basins_truth.png"))?;
            println!("wrote {}", common.out.join("basins_truth.csv").display());
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let (model, rmse) = train_model(&cfg)?;
            model.save(&common.out.join("model.ngrc"), Some(cfg.to_value()))?;
            let summary = serde_json::json!({ "config": cfg.to_value(), "rmse": rmse, "features": model.feature_map().len() });
            std::fs::write(common.out.join("train.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("training RMSE {rmse:.3e}; wrote {}", common.out.join("model.ngrc").display());
        }
        Command::PredictBasins { common, model } => {
            let cfg = common.resolve()?;
            let model = load_or_train(&cfg, model.as_deref())?;
            let system = cfg.system()?;
            let grid = ngrc_basin_grid(&model, &system, &cfg.grid_region()?, cfg.horizon, &cfg.integrator)?;
            grid.save_csv(&common.out.join("basins_pred.csv"), Some(&cfg.to_value()))?;
            render_basin_map(&grid, RenderMode::Prediction, &common.out.join("basins_pred.png"))?;
            let truth = common.cache()?.get_or_compute(&cfg)?;
            let p = error_rate(&grid, &truth)?;
            println!("p = {p:.4}, diverged = {:.4}", grid.fraction_diverged());
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let out = run_single(&cfg, &common.cache()?)?;
            write_run_artifacts(&common.out, &cfg, &out)?;
            println!(
                "p = {:.4}, diverged = {:.4}, rmse = {:.3e}",
                out.p, out.frac_diverged, out.rmse
            );
        }
        Command::Sweep {
            common,
            replicates,
            threshold,
        } => {
            let mut cfg = common.resolve()?;
            if let (Some(r), Some(s)) = (replicates, cfg.sweep.as_mut()) {
                s.replicates = r;
            }
            cfg.validate()?;
            let report = run_sweep(&cfg, &common.cache()?)?;
            let file = std::fs::File::create(common.out.join("sweep.csv"))?;
            report.write_csv(std::io::BufWriter::new(file), Some(&cfg.to_value()))?;
            let mut summary = String::from("value,mean_p,std_p,median_p,n_ok");
            if threshold.is_some() {
                summary.push_str(",useful");
            }
            summary.push('\n');
            for s in report.summary() {
                summary.push_str(&format!(
                    "{},{},{},{},{}",
                    s.value, s.mean_p, s.std_p, s.median_p, s.n_ok
                ));
                if let Some(t) = threshold {
                    summary.push_str(&format!(",{}", s.mean_p < t));
                }
                summary.push('\n');
            }
            std::fs::write(common.out.join("sweep_summary.csv"), &summary)?;
            print!("{summary}");
        }
        Command::Diagnose {
            common,
            model,
            ic_index,
        } => {
            let cfg = common.resolve()?;
            let model = load_or_train(&cfg, model.as_deref())?;
            let system = cfg.system()?;
            let ics = cfg.training_initial_conditions();
            let indices: Vec<usize> = match ic_index {
                Some(i) if i < ics.len() => vec![i],
                Some(i) => {
                    return Err(Error::InvalidConfig(format!(
                        "ic index {i} out of range (n_traj = {})",
                        ics.len()
                    )))
                }
                None => (0..ics.len()).collect(),
            };
            let mut reports = Vec::new();
            for &i in &indices {
                let rep = diagnose_training_ic(&model, &system, &ics[i], cfg.horizon, &cfg.integrator)?;
                if indices.len() == 1 {
                    std::fs::write(common.out.join(format!("diagnose_{i}.csv")), diagnostic_csv(&rep))?;
                }
                reports.push(serde_json::json!({ "index": i, "report": rep }));
            }
            let matched = reports
                .iter()
                .filter(|r| r["report"]["attractors_match"].as_bool() == Some(true))
                .count();
            let doc = serde_json::json!({
                "config": cfg.to_value(),
                "matched": matched,
                "total": reports.len(),
                "reports": reports,
            });
            std::fs::write(common.out.join("diagnose.json"), serde_json::to_string_pretty(&doc)?)?;
            println!("attractors match for {matched} of {} training ICs", indices.len());
        }
        Command::Render {
            grid,
            truth,
            mode,
            out,
        } => {
            let grid = BasinGrid::load_csv(&grid)?;
            match mode {
                Mode::Truth => render_basin_map(&grid, RenderMode::Truth, &out)?,
                Mode::Prediction => render_basin_map(&grid, RenderMode::Prediction, &out)?,
                Mode::Overlay => {
                    let truth_path = truth.ok_or_else(|| {
                        Error::InvalidConfig("overlay mode needs --truth".into())
                    })?;
                    let reference = BasinGrid::load_csv(&truth_path)?;
                    render_basin_map(&grid, RenderMode::ErrorOverlay { truth: &reference }, &out)?;
                }
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
